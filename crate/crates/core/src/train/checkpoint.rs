//! Binary checkpoint container.
//!
//! Layout (little-endian): `"MLCK"`, u16 version, u32 config length, config
//! JSON, 32-byte SHA-256 of the config JSON, u64 step, u32 array count, then
//! per array: u32 name length, name, u32 rows, u32 cols, rows·cols f64.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AdamState, BestModel, HistoryRow, RunConfig, TrainState};
use crate::data::{Modality, Split};
use crate::error::TrainError;
use crate::model::ModelParams;
use crate::numeric::{Matrix, ParamSet};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MLCK";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

impl Checkpoint {
    /// Parameters of the best dev checkpoint, or the latest ones.
    pub fn best_params(&self) -> &ModelParams {
        self.state
            .best
            .as_ref()
            .map_or(&self.state.params, |b| &b.params)
    }
}

fn put_array(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn split_code(s: Split) -> f64 {
    match s {
        Split::Train => 0.0,
        Split::Dev => 1.0,
        Split::Test => 2.0,
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let json = ckpt.config.to_json();
    let state = &ckpt.state;
    let mut arrays: Vec<(String, Matrix)> = Vec::new();
    let names = state.params.names();
    for (n, t) in names.iter().zip(state.params.tensors()) {
        arrays.push((format!("param/{n}"), t.clone()));
    }
    for (m, layer) in Modality::ALL.iter().zip(&state.params.otk) {
        if let Some(f) = &layer.feature_map.frequencies {
            arrays.push((format!("frequencies/{m}"), f.clone()));
        }
    }
    for (n, t) in names.iter().zip(&state.adam.m) {
        arrays.push((format!("adam.m/{n}"), t.clone()));
    }
    for (n, t) in names.iter().zip(&state.adam.v) {
        arrays.push((format!("adam.v/{n}"), t.clone()));
    }
    let mut hist = Vec::with_capacity(state.history.len() * 5);
    for r in &state.history {
        hist.extend([r.step as f64, split_code(r.split), r.loss, r.accuracy, r.macro_f1]);
    }
    arrays.push((
        "history".into(),
        Matrix::new(state.history.len(), 5, hist).expect("history shape"),
    ));
    if let Some(best) = &state.best {
        arrays.push((
            "best.meta".into(),
            Matrix::row_vector(&[best.step as f64, best.accuracy]),
        ));
        for (n, t) in names.iter().zip(best.params.tensors()) {
            arrays.push((format!("best/{n}"), t.clone()));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&Sha256::digest(json.as_bytes()));
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, m) in &arrays {
        put_array(&mut out, name, m);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct Arrays<'p> {
    map: HashMap<String, Matrix>,
    path: &'p Path,
}

impl Arrays<'_> {
    fn take(&mut self, name: String, shape: (usize, usize)) -> Result<Matrix, TrainError> {
        let corrupt = |message| TrainError::CheckpointCorrupt {
            path: self.path.to_path_buf(),
            message,
        };
        let m = self
            .map
            .remove(&name)
            .ok_or_else(|| corrupt(format!("missing array {name}")))?;
        if m.shape() != shape {
            return Err(corrupt(format!(
                "array {name} has shape {:?}, expected {shape:?}",
                m.shape()
            )));
        }
        Ok(m)
    }

    /// Copies `template` with every tensor replaced by `{prefix}/{name}`.
    fn fill(&mut self, template: &ModelParams, prefix: &str) -> Result<ModelParams, TrainError> {
        let names = template.names();
        let mut p = template.clone();
        for (t, n) in p.tensors_mut().into_iter().zip(&names) {
            *t = self.take(format!("{prefix}/{n}"), t.shape())?;
        }
        Ok(p)
    }
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    let corrupt = |message: String| TrainError::CheckpointCorrupt {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(TrainError::CheckpointMagic {
            path: path.to_path_buf(),
            found,
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16().map_err(corrupt)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = r.u32().map_err(corrupt)? as usize;
    let json = r.take(len).map_err(corrupt)?;
    let digest = r.take(32).map_err(corrupt)?;
    if Sha256::digest(json).as_slice() != digest {
        return Err(corrupt("config digest mismatch".into()));
    }
    let json = std::str::from_utf8(json).map_err(|e| corrupt(e.to_string()))?;
    let config = RunConfig::from_json(json).map_err(|e| corrupt(format!("config: {e}")))?;
    let step = r.u64().map_err(corrupt)?;
    let count = r.u32().map_err(corrupt)?;
    let mut arrays = HashMap::new();
    for _ in 0..count {
        let nlen = r.u32().map_err(corrupt)? as usize;
        let name = std::str::from_utf8(r.take(nlen).map_err(corrupt)?)
            .map_err(|e| corrupt(e.to_string()))?
            .to_string();
        let rows = r.u32().map_err(corrupt)? as usize;
        let cols = r.u32().map_err(corrupt)? as usize;
        let raw = r.take(rows * cols * 8).map_err(corrupt)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.insert(name, Matrix::new(rows, cols, data).expect("sized from header"));
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut arrays = Arrays { map: arrays, path };
    let template = ModelParams::init(&config.model, config.train.seed)?;
    let mut params = arrays.fill(&template, "param")?;
    for (m, layer) in Modality::ALL.iter().zip(params.otk.iter_mut()) {
        if let Some(f) = &mut layer.feature_map.frequencies {
            *f = arrays.take(format!("frequencies/{m}"), f.shape())?;
        }
    }
    let names = template.names();
    let mut adam = AdamState::new(&params);
    for (prefix, moments) in [("adam.m", &mut adam.m), ("adam.v", &mut adam.v)] {
        for (t, n) in moments.iter_mut().zip(&names) {
            *t = arrays.take(format!("{prefix}/{n}"), t.shape())?;
        }
    }
    let hist_rows = arrays.map.get("history").map_or(0, |h| h.rows());
    let hist = arrays.take("history".into(), (hist_rows, 5))?;
    let mut history = Vec::with_capacity(hist_rows);
    for i in 0..hist_rows {
        let row = hist.row(i);
        let split = match row[1] as u8 {
            0 => Split::Train,
            1 => Split::Dev,
            2 => Split::Test,
            other => return Err(corrupt(format!("bad split code {other} in history"))),
        };
        history.push(HistoryRow {
            step: row[0] as u64,
            split,
            loss: row[2],
            accuracy: row[3],
            macro_f1: row[4],
        });
    }
    let best = if arrays.map.contains_key("best.meta") {
        let meta = arrays.take("best.meta".into(), (1, 2))?;
        let mut best_params = arrays.fill(&template, "best")?;
        for (a, b) in best_params.otk.iter_mut().zip(&params.otk) {
            a.feature_map = b.feature_map.clone();
        }
        Some(BestModel {
            step: meta.get(0, 0) as u64,
            accuracy: meta.get(0, 1),
            params: best_params,
        })
    } else {
        None
    };
    if let Some(extra) = arrays.map.keys().next() {
        return Err(corrupt(format!("unexpected array {extra}")));
    }
    Ok(Checkpoint {
        config,
        state: TrainState {
            params,
            adam,
            step,
            history,
            best,
        },
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| TrainError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TrainError::io(path, e))?;
    decode_checkpoint(path, &bytes)
}
