//! Feature files, JSON Lines manifests and the synthetic corpus generator.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::DataError;
use crate::numeric::{Matrix, SeededStream};

pub const FEATURE_MAGIC: [u8; 4] = *b"MLOT";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Language,
    Acoustic,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Language, Modality::Acoustic];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Modality> {
        Modality::ALL.get(code as usize).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Language => "language",
            Modality::Acoustic => "acoustic",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One modality's L × d feature sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub values: Matrix,
}

/// Serializes a sequence; values are narrowed to f32.
pub fn encode_feature_file(fs: &FeatureSequence) -> Vec<u8> {
    let (l, d) = fs.values.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * l * d);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.push(fs.modality.code());
    out.push(0);
    out.extend_from_slice(&(l as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in fs.values.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses the bytes of a feature file; `path` is only used in errors.
pub fn decode_feature_file(path: &Path, bytes: &[u8]) -> Result<FeatureSequence, DataError> {
    let truncated = |expected| DataError::Truncated {
        path: path.to_path_buf(),
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != FEATURE_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(DataError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let modality = Modality::from_code(bytes[6]).ok_or(DataError::UnknownModality {
        path: path.to_path_buf(),
        code: bytes[6],
    })?;
    let l = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if l == 0 || d == 0 {
        return Err(DataError::EmptySequence {
            path: path.to_path_buf(),
            rows: l,
            cols: d,
        });
    }
    let expected = HEADER_LEN + 4 * l * d;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(l * d);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(DataError::NonFiniteValue {
                path: path.to_path_buf(),
                row: k / d,
                col: k % d,
            });
        }
        data.push(v as f64);
    }
    Ok(FeatureSequence {
        modality,
        values: Matrix::new(l, d, data).expect("length checked"),
    })
}

pub fn write_feature_file(path: impl AsRef<Path>, fs: &FeatureSequence) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, encode_feature_file(fs)).map_err(|e| DataError::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_feature_file(path, &bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, dev or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturePaths {
    pub visual: PathBuf,
    pub language: PathBuf,
    pub acoustic: PathBuf,
}

impl FeaturePaths {
    pub fn get(&self, m: Modality) -> &Path {
        match m {
            Modality::Visual => &self.visual,
            Modality::Language => &self.language,
            Modality::Acoustic => &self.acoustic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub label: u8,
    pub split: Split,
    pub features: FeaturePaths,
    /// Generator rule that produced the label, for synthetic corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<Rule>,
    /// Planted signs (visual, language, acoustic), for synthetic corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signs: Option<[i8; 3]>,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    /// Directory that relative feature paths are resolved against.
    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or_else(|| Path::new("."))
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for r in &self.records {
            counts[r.split as usize] += 1;
        }
        counts
    }

    pub fn find(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir().join(p)
        }
    }

    /// Reads the three feature files of `record`.
    pub fn load_sample(&self, record: &SampleRecord) -> Result<Sample, DataError> {
        let mut views = Vec::with_capacity(3);
        for m in Modality::ALL {
            let path = self.resolve(record.features.get(m));
            let fs = read_feature_file(&path)?;
            if fs.modality != m {
                return Err(DataError::Manifest {
                    path: self.path.clone(),
                    line: 0,
                    message: format!(
                        "sample {:?}: {} is tagged {}, expected {}",
                        record.id,
                        path.display(),
                        fs.modality,
                        m
                    ),
                });
            }
            views.push(fs.values);
        }
        let views: [Matrix; 3] = views.try_into().expect("three modalities");
        Ok(Sample {
            id: record.id.clone(),
            label: record.label,
            views,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>, DataError> {
        self.split(split)
            .into_iter()
            .map(|r| self.load_sample(r))
            .collect()
    }
}

/// A loaded sample: one matrix per modality in visual, language, acoustic
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: u8,
    pub views: [Matrix; 3],
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| DataError::Manifest {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let id = value
            .get("id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| bad("missing string field \"id\"".into()))?
            .to_string();
        let features = value
            .get("features")
            .and_then(|v| v.as_object())
            .ok_or_else(|| bad(format!("sample {id:?} has no \"features\" object")))?;
        for m in Modality::ALL {
            if !features.contains_key(m.name()) {
                return Err(DataError::MissingModality {
                    id,
                    modality: m.name().into(),
                });
            }
        }
        let record: SampleRecord = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        if record.label > 1 {
            return Err(bad(format!("label must be 0 or 1, got {}", record.label)));
        }
        if !seen.insert(record.id.clone()) {
            return Err(DataError::DuplicateId(record.id));
        }
        records.push(record);
    }
    let manifest = Manifest {
        path: path.to_path_buf(),
        records,
    };
    if manifest.records.is_empty() {
        log::warn!("{}: manifest has no records", path.display());
    } else {
        let [train, dev, test] = manifest.split_counts();
        log::info!(
            "{}: {train} train / {dev} dev / {test} test records",
            path.display()
        );
    }
    Ok(manifest)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[SampleRecord]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| DataError::io(path, e))
}

/// Class weights `[w_pos, w_neg]` for the training records.
///
/// User weights pass through unchanged. Otherwise the majority class gets
/// 1 and the minority class `min(N_major / N_minor, 2)`.
pub fn class_weights(
    records: &[&SampleRecord],
    user: Option<[f64; 2]>,
) -> Result<[f64; 2], DataError> {
    let positives = records.iter().filter(|r| r.label == 1).count();
    let negatives = records.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(DataError::SingleClass {
            positives,
            negatives,
        });
    }
    if let Some(w) = user {
        return Ok(w);
    }
    let major = positives.max(negatives) as f64;
    let w = |n: usize| (major / n as f64).min(2.0);
    Ok([w(positives), w(negatives)])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// Label 1 iff the visual and language signs disagree.
    CrossModal,
    /// Label 1 iff the language sign is positive.
    Unimodal,
    /// Each sample follows one of the two rules, chosen by a fair coin.
    Mixed,
}

impl std::str::FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cross-modal" => Ok(Rule::CrossModal),
            "unimodal" => Ok(Rule::Unimodal),
            "mixed" => Ok(Rule::Mixed),
            other => Err(format!(
                "unknown rule {other:?} (expected cross-modal, unimodal or mixed)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_per_class: usize,
    /// Inclusive sequence length range per modality.
    pub lengths: [(usize, usize); 3],
    pub dims: [usize; 3],
    pub rule: Rule,
    pub noise: f64,
    /// Norm of the planted bump.
    pub amplitude: f64,
    /// Train / dev / test fractions, applied per class.
    pub splits: [f64; 3],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_per_class: 100,
            lengths: [(8, 16), (8, 16), (8, 16)],
            dims: [32, 24, 16],
            rule: Rule::CrossModal,
            noise: 0.5,
            amplitude: 6.0,
            splits: [0.8, 0.1, 0.1],
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.n_per_class == 0 {
            return bad("n per class must be at least 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be a finite value >= 0, got {}", self.noise));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return bad(format!("amplitude must be finite and >= 0, got {}", self.amplitude));
        }
        for (m, &(lo, hi)) in self.lengths.iter().enumerate() {
            if lo == 0 || lo > hi {
                return bad(format!("bad length range {lo}..={hi} for {}", Modality::ALL[m]));
            }
        }
        if self.dims.contains(&0) {
            return bad(format!("feature dims must be positive, got {:?}", self.dims));
        }
        let total: f64 = self.splits.iter().sum();
        if self.splits.iter().any(|&f| !(f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions must be >= 0 and sum to 1, got {:?}", self.splits));
        }
        Ok(())
    }

    /// Per-class sample counts for train, dev and test.
    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.n_per_class as f64;
        let train = (n * self.splits[0]).round() as usize;
        let dev = ((n * self.splits[1]).round() as usize).min(self.n_per_class - train);
        [train, dev, self.n_per_class - train - dev]
    }
}

fn signs_for(label: u8, rule: Rule, rng: &mut SeededStream) -> [i8; 3] {
    let sign = |b: bool| if b { 1i8 } else { -1 };
    let mut s = [sign(rng.coin()), sign(rng.coin()), sign(rng.coin())];
    match rule {
        Rule::CrossModal => s[1] = if label == 1 { -s[0] } else { s[0] },
        Rule::Unimodal => s[1] = sign(label == 1),
        Rule::Mixed => unreachable!("resolved per sample"),
    }
    s
}

/// Writes a synthetic trimodal corpus under `out_dir` and returns the
/// manifest path.
///
/// Every modality has a fixed unit direction. A sample carries one latent
/// sign per modality, planted as `sign · amplitude · direction` on a random
/// row of otherwise Gaussian noise.
pub fn gen_synthetic(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf, DataError> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let feature_dir = out_dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| DataError::io(&feature_dir, e))?;

    let mut dir_rng = SeededStream::with_stream(spec.seed, 0);
    let directions: Vec<Vec<f64>> = spec
        .dims
        .iter()
        .map(|&d| {
            let v: Vec<f64> = (0..d).map(|_| dir_rng.gaussian()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();

    let mut rng = SeededStream::with_stream(spec.seed, 1);
    let sizes = spec.split_sizes();
    let mut records = Vec::with_capacity(2 * spec.n_per_class);
    for (split_idx, split) in Split::ALL.into_iter().enumerate() {
        for k in 0..sizes[split_idx] {
            for label in [1u8, 0] {
                let id = format!("{}-{:05}-{}", split.name(), k, label);
                let rule = match spec.rule {
                    Rule::Mixed if rng.coin() => Rule::CrossModal,
                    Rule::Mixed => Rule::Unimodal,
                    r => r,
                };
                let signs = signs_for(label, rule, &mut rng);
                let mut paths = Vec::with_capacity(3);
                for m in Modality::ALL {
                    let i = m.index();
                    let (lo, hi) = spec.lengths[i];
                    let len = rng.int_inclusive(lo, hi);
                    let mut values = rng.gaussian_matrix(len, spec.dims[i], spec.noise);
                    let row = rng.int_inclusive(0, len - 1);
                    let s = signs[i] as f64 * spec.amplitude;
                    for (v, dir) in values.row_mut(row).iter_mut().zip(&directions[i]) {
                        *v += s * dir;
                    }
                    let rel = PathBuf::from("features").join(format!("{id}.{}.mlot", m.name()));
                    write_feature_file(
                        out_dir.join(&rel),
                        &FeatureSequence {
                            modality: m,
                            values,
                        },
                    )?;
                    paths.push(rel);
                }
                let [visual, language, acoustic]: [PathBuf; 3] =
                    paths.try_into().expect("three modalities");
                records.push(SampleRecord {
                    id,
                    label,
                    split,
                    features: FeaturePaths {
                        visual,
                        language,
                        acoustic,
                    },
                    rule: (spec.rule == Rule::Mixed).then_some(rule),
                    signs: Some(signs),
                });
            }
        }
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// SHA-256 over every file below `dir`: sorted relative paths, each
/// followed by a NUL and the file's bytes.
pub fn dir_digest(dir: impl AsRef<Path>) -> Result<String, DataError> {
    let dir = dir.as_ref();
    let mut rel = Vec::new();
    for entry in walkdir::WalkDir::new(dir) {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            DataError::io(path, e.into())
        })?;
        if entry.file_type().is_dir() {
            continue;
        }
        let name = entry
            .path()
            .strip_prefix(dir)
            .expect("below dir")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        rel.push((name, entry.into_path()));
    }
    rel.sort();
    let mut hasher = Sha256::new();
    for (name, p) in rel {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(&p).map_err(|e| DataError::io(&p, e))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(m: Modality, rows: usize, cols: usize, rng: &mut SeededStream) -> FeatureSequence {
        FeatureSequence {
            modality: m,
            values: rng.gaussian_matrix(rows, cols, 1.0),
        }
    }

    #[test]
    fn single_zero_value_layout() {
        let fs = FeatureSequence {
            modality: Modality::Visual,
            values: Matrix::zeros(1, 1),
        };
        let bytes = encode_feature_file(&fs);
        assert_eq!(
            bytes,
            vec![b'M', b'L', b'O', b'T', 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]
        );
    }

    #[test]
    fn language_header_declares_shape() {
        let mut rng = SeededStream::new(1);
        let bytes = encode_feature_file(&seq(Modality::Language, 12, 768, &mut rng));
        assert_eq!(bytes[6], 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 12);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 768);
        assert_eq!(bytes.len(), 16 + 4 * 12 * 768);
    }

    #[test]
    fn roundtrip_at_f32_precision() {
        let mut rng = SeededStream::new(2);
        let p = Path::new("mem");
        for _ in 0..200 {
            let m = Modality::ALL[rng.int_inclusive(0, 2)];
            let fs = seq(m, rng.int_inclusive(1, 9), rng.int_inclusive(1, 9), &mut rng);
            let back = decode_feature_file(p, &encode_feature_file(&fs)).unwrap();
            assert_eq!(back.modality, m);
            for (a, b) in fs.values.data().iter().zip(back.values.data()) {
                assert_eq!(*b, *a as f32 as f64);
            }
        }
    }

    #[test]
    fn corruption_kinds() {
        let mut rng = SeededStream::new(3);
        let p = Path::new("x.mlot");
        let good = encode_feature_file(&seq(Modality::Acoustic, 3, 2, &mut rng));

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_feature_file(p, &bad),
            Err(DataError::BadMagic { found, .. }) if &found == b"XLOT"
        ));

        let short = &good[..good.len() - 4];
        assert!(matches!(
            decode_feature_file(p, short),
            Err(DataError::Truncated { expected: 40, actual: 36, .. })
        ));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_feature_file(p, &bad),
            Err(DataError::UnsupportedVersion { found: 2, .. })
        ));

        let mut bad = good.clone();
        bad[6] = 9;
        assert!(matches!(decode_feature_file(p, &bad), Err(DataError::UnknownModality { code: 9, .. })));

        let mut bad = good.clone();
        bad[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_feature_file(p, &bad),
            Err(DataError::NonFiniteValue { row: 0, col: 0, .. })
        ));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_feature_file(p, &bad), Err(DataError::TrailingBytes { .. })));

        for e in [
            decode_feature_file(p, &good[..2]).unwrap_err(),
            decode_feature_file(p, short).unwrap_err(),
        ] {
            assert!(e.is_corruption());
        }
    }

    fn record(id: &str, label: u8) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            label,
            split: Split::Train,
            features: FeaturePaths {
                visual: "v".into(),
                language: "l".into(),
                acoustic: "a".into(),
            },
            rule: None,
            signs: None,
        }
    }

    #[test]
    fn class_weight_rules() {
        let balanced: Vec<_> = (0..4).map(|i| record(&i.to_string(), (i % 2) as u8)).collect();
        let refs: Vec<_> = balanced.iter().collect();
        assert_eq!(class_weights(&refs, None).unwrap(), [1.0, 1.0]);
        assert_eq!(class_weights(&refs, Some([1.2, 1.0])).unwrap(), [1.2, 1.0]);

        let skewed: Vec<_> = (0..4).map(|i| record(&i.to_string(), (i == 0) as u8)).collect();
        let refs: Vec<_> = skewed.iter().collect();
        assert_eq!(class_weights(&refs, None).unwrap(), [2.0, 1.0]);

        let mild: Vec<_> = (0..5).map(|i| record(&i.to_string(), (i < 2) as u8)).collect();
        let refs: Vec<_> = mild.iter().collect();
        assert_eq!(class_weights(&refs, None).unwrap(), [1.5, 1.0]);

        let one: Vec<_> = (0..3).map(|i| record(&i.to_string(), 1)).collect();
        let refs: Vec<_> = one.iter().collect();
        assert!(matches!(
            class_weights(&refs, Some([1.0, 1.0])),
            Err(DataError::SingleClass { positives: 3, negatives: 0 })
        ));
    }

    #[test]
    fn split_sizes_per_class() {
        let spec = SynthSpec::default();
        assert_eq!(spec.split_sizes(), [80, 10, 10]);
        let spec = SynthSpec {
            n_per_class: 700,
            splits: [5.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0],
            ..SynthSpec::default()
        };
        assert_eq!(spec.split_sizes(), [500, 100, 100]);
    }

    #[test]
    fn spec_validation() {
        let bad = SynthSpec {
            noise: -1.0,
            ..SynthSpec::default()
        };
        assert!(matches!(bad.validate(), Err(DataError::InvalidSpec(_))));
        let bad = SynthSpec {
            splits: [0.5, 0.5, 0.5],
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthSpec {
            lengths: [(3, 2), (1, 1), (1, 1)],
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cross_modal_signs_hide_the_label() {
        let mut rng = SeededStream::new(4);
        let mut agree = [0usize; 3];
        let n = 20_000;
        for k in 0..n {
            let label = (k % 2) as u8;
            let s = signs_for(label, Rule::CrossModal, &mut rng);
            assert_eq!(label == 1, s[0] != s[1]);
            for m in 0..3 {
                agree[m] += ((s[m] == 1) == (label == 1)) as usize;
            }
        }
        for a in agree {
            assert!((a as f64 / n as f64 - 0.5).abs() < 0.05);
        }
    }
}
