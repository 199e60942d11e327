//! The full classifier: per-modality self-attention and OTK unification,
//! pairwise cross transport, attention fusion and the classification head.

use serde::{Deserialize, Serialize};

use crate::attention::{self_attention, self_attention_backward, AttentionCache, SelfAttentionParams};
use crate::data::Modality;
use crate::error::ModelError;
use crate::fusion::{
    classify, cross_transport_pooled, cross_transport_pooled_backward, maf, maf_backward,
    CrossCache, DenseStack, FusionMode, MafCache, MafParams, StackCache, MODALITIES,
};
use crate::numeric::{grad_check, GradCheckReport, Matrix, ParamSet, SeededStream};
use crate::ot::SinkhornOptions;
use crate::otk::{otk_backward, unify, KernelSpec, OtkCache, OtkLayer};
use crate::train::{weighted_ce, weighted_ce_grad};

/// Switches for the ablation variants.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_self_attention: bool,
    pub no_cross_attention: bool,
    pub no_maf: bool,
    /// Active modalities in visual, language, acoustic order.
    pub modalities: [bool; 3],
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            no_self_attention: false,
            no_cross_attention: false,
            no_maf: false,
            modalities: [true; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature width per modality (visual, language, acoustic); taken from
    /// the training data when absent.
    pub input_dims: Option<[usize; 3]>,
    /// Self-attention heads k.
    pub heads: usize,
    /// Self-attention inner width r.
    pub inner: usize,
    pub l_uni: usize,
    pub d_uni: usize,
    pub kernel: KernelSpec,
    pub normalize_rows: bool,
    /// Solver settings for the OTK and cross-transport couplings.
    pub sinkhorn: SinkhornOptions,
    pub maf_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub init_std: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dims: None,
            heads: 80,
            inner: 30,
            l_uni: 100,
            d_uni: 64,
            kernel: KernelSpec::DotProduct,
            normalize_rows: true,
            sinkhorn: SinkhornOptions::default(),
            maf_hidden: vec![8, 4],
            classifier_hidden: vec![32, 8],
            init_std: 0.02,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("heads", self.heads),
            ("inner", self.inner),
            ("l_uni", self.l_uni),
            ("d_uni", self.d_uni),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if let Some(dims) = self.input_dims {
            if dims.contains(&0) {
                return Err(ModelError::Config(format!("input dims must be positive, got {dims:?}")));
            }
        }
        if self.maf_hidden.contains(&0) || self.classifier_hidden.contains(&0) {
            return Err(ModelError::Config("hidden layer widths must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(ModelError::Config(format!("init_std must be positive, got {}", self.init_std)));
        }
        let s = &self.sinkhorn;
        if !(s.eps > 0.0 && s.eps.is_finite()) || s.max_iter == 0 || !(s.tol >= 0.0) {
            return Err(ModelError::Config(format!("bad sinkhorn settings {s:?}")));
        }
        if !self.ablation.modalities.iter().any(|&m| m) {
            return Err(ModelError::Config("at least one modality must be active".into()));
        }
        self.kernel.validate()
    }

    /// Width of each part of a shared vector.
    pub fn part_dim(&self) -> usize {
        self.kernel.embed_dim(self.d_uni)
    }
}

/// All trainable arrays. The same type holds gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub attention: Vec<SelfAttentionParams>,
    /// d_m × part width, projecting the pooled self-attention summary.
    pub pool_proj: Vec<Matrix>,
    pub otk: Vec<OtkLayer>,
    pub maf: MafParams,
}

fn stack_tensors<'a>(stack: &'a DenseStack, prefix: &str, names: &mut Vec<String>, out: &mut Vec<&'a Matrix>) {
    for (i, layer) in stack.layers.iter().enumerate() {
        names.push(format!("{prefix}.dense{i}.weight"));
        names.push(format!("{prefix}.dense{i}.bias"));
        out.push(&layer.weight);
        out.push(&layer.bias);
    }
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let dims = config
            .input_dims
            .ok_or_else(|| ModelError::Config("input dims are not set".into()))?;
        let mut rng = SeededStream::with_stream(seed, u64::MAX);
        let std = config.init_std;
        let part = config.part_dim();
        let mut attention = Vec::with_capacity(MODALITIES);
        let mut pool_proj = Vec::with_capacity(MODALITIES);
        let mut otk = Vec::with_capacity(MODALITIES);
        for d_m in dims {
            attention.push(SelfAttentionParams::new(d_m, config.heads, config.inner, std, &mut rng)?);
            pool_proj.push(rng.gaussian_matrix(d_m, part, std));
            otk.push(OtkLayer::new(
                d_m,
                config.l_uni,
                config.d_uni,
                config.kernel,
                config.normalize_rows,
                config.sinkhorn,
                std,
                &mut rng,
            )?);
        }
        let maf = MafParams::new(part, &config.maf_hidden, &config.classifier_hidden, std, &mut rng)?;
        Ok(ModelParams {
            attention,
            pool_proj,
            otk,
            maf,
        })
    }

    /// Same structure with every trainable entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(alpha, b).expect("same structure");
        }
    }

    fn named(&self) -> (Vec<String>, Vec<&Matrix>) {
        let mut names = Vec::new();
        let mut out = Vec::new();
        for m in Modality::ALL {
            let i = m.index();
            let a = &self.attention[i];
            let o = &self.otk[i];
            names.extend([
                format!("{m}.w_h1"),
                format!("{m}.w_h2"),
                format!("{m}.pool_proj"),
                format!("{m}.otk.projection"),
                format!("{m}.otk.reference"),
            ]);
            out.extend([&a.w_h1, &a.w_h2, &self.pool_proj[i], &o.projection, &o.reference]);
        }
        for m in Modality::ALL {
            stack_tensors(&self.maf.attention[m.index()], &format!("maf.{m}"), &mut names, &mut out);
        }
        names.push("fusion.w_u".into());
        out.push(&self.maf.w_u);
        stack_tensors(&self.maf.classifier, "classifier", &mut names, &mut out);
        (names, out)
    }
}

impl ParamSet for ModelParams {
    fn names(&self) -> Vec<String> {
        self.named().0
    }

    fn tensors(&self) -> Vec<&Matrix> {
        self.named().1
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        let ModelParams {
            attention,
            pool_proj,
            otk,
            maf,
        } = self;
        for ((a, p), o) in attention.iter_mut().zip(pool_proj.iter_mut()).zip(otk.iter_mut()) {
            out.push(&mut a.w_h1);
            out.push(&mut a.w_h2);
            out.push(p);
            out.push(&mut o.projection);
            out.push(&mut o.reference);
        }
        let MafParams {
            attention,
            w_u,
            classifier,
        } = maf;
        for stack in attention.iter_mut() {
            for layer in &mut stack.layers {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out.push(w_u);
        for layer in &mut classifier.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }
}

/// The two other modalities of `m`, in ascending order.
pub fn partners(m: usize) -> [usize; 2] {
    match m {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

#[derive(Clone, Debug)]
struct SelfBranch {
    cache: AttentionCache,
    pooled: Vec<f64>,
}

/// Everything a forward pass produced.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub maf_weights: [f64; 3],
    pub shared: Vec<Vec<f64>>,
    self_branch: Vec<Option<SelfBranch>>,
    otk: Vec<Option<OtkCache>>,
    /// `cross[m][s]` transports `partners(m)[s]` into modality m.
    cross: Vec<[Option<CrossCache>; 2]>,
    maf: MafCache,
    classifier: StackCache,
}

impl Forward {
    /// Self-attention weights W_m (k × L_m) of a modality, when computed.
    pub fn attention_map(&self, m: Modality) -> Option<&Matrix> {
        self.self_branch[m.index()].as_ref().map(|b| &b.cache.weights)
    }

    pub fn prediction(&self) -> u8 {
        (self.logits[1] > self.logits[0]) as u8
    }
}

pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    views: &[Matrix; 3],
) -> Result<Forward, ModelError> {
    let abl = &config.ablation;
    let active = abl.modalities;
    let part = config.part_dim();
    for (m, v) in views.iter().enumerate() {
        let expected = params.attention[m].input_dim();
        if active[m] && v.cols() != expected {
            return Err(ModelError::Dimension {
                what: format!("{} feature width", Modality::ALL[m]),
                expected,
                actual: v.cols(),
            });
        }
    }

    let mut self_branch = vec![None, None, None];
    if !abl.no_self_attention {
        for m in (0..MODALITIES).filter(|&m| active[m]) {
            let (_, summary, cache) = self_attention(&views[m], &params.attention[m])?;
            self_branch[m] = Some(SelfBranch {
                cache,
                pooled: summary.mean_rows(),
            });
        }
    }

    let use_cross = !abl.no_cross_attention && active.iter().filter(|&&a| a).count() > 1;
    let mut unified = [None, None, None];
    let mut otk = vec![None, None, None];
    if use_cross {
        for m in (0..MODALITIES).filter(|&m| active[m]) {
            let (u, cache) = unify(&views[m], &params.otk[m])?;
            unified[m] = Some(u);
            otk[m] = Some(cache);
        }
    }

    let mut shared = Vec::with_capacity(MODALITIES);
    let mut cross: Vec<[Option<CrossCache>; 2]> = vec![[None, None], [None, None], [None, None]];
    for m in 0..MODALITIES {
        let mut s = vec![0.0; 3 * part];
        if !active[m] {
            shared.push(s);
            continue;
        }
        if let Some(b) = &self_branch[m] {
            let v = params.pool_proj[m].vec_matmul(&b.pooled)?;
            s[..part].copy_from_slice(&v);
        }
        if use_cross {
            let target = unified[m].as_ref().expect("active modality unified");
            for (slot, &n) in partners(m).iter().enumerate() {
                if let Some(source) = &unified[n] {
                    let (pooled, cache) = cross_transport_pooled(source, target, config.sinkhorn)?;
                    s[(slot + 1) * part..(slot + 2) * part].copy_from_slice(&pooled);
                    cross[m][slot] = Some(cache);
                }
            }
        }
        shared.push(s);
    }

    let mode = if abl.no_maf {
        FusionMode::Plain
    } else {
        FusionMode::Attention
    };
    let (maf_weights, fused, maf_cache) = maf(&shared, &params.maf, active, mode)?;
    let (logits, classifier) = classify(&fused, &params.maf)?;
    Ok(Forward {
        logits,
        maf_weights,
        shared,
        self_branch,
        otk,
        cross,
        maf: maf_cache,
        classifier,
    })
}

/// Gradients of a scalar objective given `∂/∂logits`.
pub fn backward(
    params: &ModelParams,
    fwd: &Forward,
    grad_logits: &[f64],
) -> Result<ModelParams, ModelError> {
    let mut grads = params.zeros_like();
    let part = params.maf.shared_dim() / 3;

    let (grad_fused, cls) = params.maf.classifier.backward(&fwd.classifier, grad_logits);
    for (layer, g) in grads.maf.classifier.layers.iter_mut().zip(cls) {
        layer.weight = g.weight;
        layer.bias = g.bias;
    }
    let mg = maf_backward(&fwd.maf, &params.maf, &grad_fused)?;
    grads.maf.w_u = mg.w_u;
    for (stack, layer_grads) in grads.maf.attention.iter_mut().zip(mg.attention) {
        for (layer, g) in stack.layers.iter_mut().zip(layer_grads) {
            layer.weight = g.weight;
            layer.bias = g.bias;
        }
    }

    let mut grad_unified: Vec<Option<Matrix>> = fwd
        .otk
        .iter()
        .map(|c| c.as_ref().map(|_| Matrix::zeros(params.otk[0].reference_size(), part)))
        .collect();
    for m in 0..MODALITIES {
        let g = &mg.shared[m];
        if let Some(b) = &fwd.self_branch[m] {
            let g_self = &g[..part];
            let proj = &params.pool_proj[m];
            grads.pool_proj[m] = Matrix::from_fn(proj.rows(), part, |i, j| b.pooled[i] * g_self[j]);
            let g_pooled = proj.matvec(g_self)?;
            let k = params.attention[m].heads();
            let g_summary = Matrix::from_fn(k, g_pooled.len(), |_, c| g_pooled[c] / k as f64);
            let ag = self_attention_backward(&b.cache, &params.attention[m], &g_summary)?;
            grads.attention[m].w_h1 = ag.w_h1;
            grads.attention[m].w_h2 = ag.w_h2;
        }
        for (slot, &n) in partners(m).iter().enumerate() {
            if let Some(cache) = &fwd.cross[m][slot] {
                let gp = &g[(slot + 1) * part..(slot + 2) * part];
                let (gs, gt) = cross_transport_pooled_backward(cache, gp)?;
                grad_unified[n].as_mut().expect("source unified").add_scaled(1.0, &gs)?;
                grad_unified[m].as_mut().expect("target unified").add_scaled(1.0, &gt)?;
            }
        }
    }
    for m in 0..MODALITIES {
        if let (Some(cache), Some(g)) = (&fwd.otk[m], &grad_unified[m]) {
            let og = otk_backward(cache, &params.otk[m], g)?;
            grads.otk[m].projection = og.projection.expect("unify keeps the input");
            grads.otk[m].reference = og.reference;
        }
    }
    Ok(grads)
}

/// Weighted cross-entropy of one sample and its parameter gradients.
pub fn loss_and_grad(
    params: &ModelParams,
    config: &ModelConfig,
    views: &[Matrix; 3],
    label: u8,
    class_weights: [f64; 2],
) -> Result<(f64, Forward, ModelParams), ModelError> {
    let fwd = forward(params, config, views)?;
    let loss = weighted_ce(&fwd.logits, label, class_weights);
    let g = weighted_ce_grad(&fwd.logits, label, class_weights);
    let grads = backward(params, &fwd, &g)?;
    Ok((loss, fwd, grads))
}

/// The small model used for whole-network gradient checks: k = 4, r = 3,
/// L_uni = 5, d_uni = 4.
///
/// Sinkhorn runs a fixed five sweeps. Near convergence the reference set
/// only reaches the loss through the row-marginal residual, so its true
/// gradient falls below what central differences can resolve.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        input_dims: Some([6, 5, 4]),
        heads: 4,
        inner: 3,
        l_uni: 5,
        d_uni: 4,
        sinkhorn: SinkhornOptions {
            eps: 0.1,
            max_iter: 5,
            tol: 0.0,
        },
        init_std: 0.5,
        ..ModelConfig::default()
    }
}

/// Central-difference check of every parameter gradient on one random
/// sample. `fault` scales the largest analytic gradient entry, to show the
/// check catches a broken backward pass.
pub fn check_model_gradients(
    config: &ModelConfig,
    seed: u64,
    h: f64,
    tol: f64,
    fault: Option<f64>,
) -> Result<GradCheckReport, ModelError> {
    let mut params = ModelParams::init(config, seed)?;
    let dims = config.input_dims.expect("set by init");
    let mut rng = SeededStream::with_stream(seed, 1);
    let lens = [6, 4, 7];
    let views = [0, 1, 2].map(|m| rng.gaussian_matrix(lens[m], dims[m], 1.0));
    let weights = [1.2, 1.0];
    let (_, _, mut grads) = loss_and_grad(&params, config, &views, 1, weights)?;
    if let Some(scale) = fault {
        let mut best: Option<(f64, &mut f64)> = None;
        for t in grads.tensors_mut() {
            for v in t.data_mut() {
                if best.as_ref().is_none_or(|(b, _)| v.abs() > *b) {
                    best = Some((v.abs(), v));
                }
            }
        }
        if let Some((_, v)) = best {
            *v *= scale;
        }
    }
    Ok(grad_check(&mut params, &grads, h, tol, |p| {
        forward(p, config, &views).map_or(f64::NAN, |f| weighted_ce(&f.logits, 1, weights))
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{cross_transport, shared_repr};
    use crate::attention::self_attention;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dims: Some([5, 4, 3]),
            ..grad_check_config()
        }
    }

    fn views(config: &ModelConfig, rng: &mut SeededStream) -> [Matrix; 3] {
        let lens = [6, 4, 7];
        [0, 1, 2].map(|m| rng.gaussian_matrix(lens[m], config.input_dims.unwrap()[m], 1.0))
    }

    #[test]
    fn paper_default_widths() {
        let config = ModelConfig {
            input_dims: Some([32, 24, 16]),
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&config, 1).unwrap();
        assert_eq!(params.maf.w_u.shape(), (192, 576));
        assert_eq!(params.otk[0].reference.shape(), (100, 64));
        assert_eq!(params.attention[1].w_h1.shape(), (30, 24));
        assert_eq!(params.attention[1].w_h2.shape(), (80, 30));
        let mut rng = SeededStream::new(2);
        let fwd = forward(&params, &config, &views(&config, &mut rng)).unwrap();
        assert_eq!(fwd.logits.len(), 2);
        assert!(fwd.shared.iter().all(|s| s.len() == 192));
        assert!((fwd.maf_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn names_and_tensors_align() {
        let mut params = ModelParams::init(&tiny_config(), 3).unwrap();
        let names = params.names();
        let n = params.tensors().len();
        assert_eq!(names.len(), n);
        assert_eq!(params.tensors_mut().len(), n);
        let shapes: Vec<_> = params.tensors().iter().map(|t| t.shape()).collect();
        let shapes_mut: Vec<_> = params.tensors_mut().iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(names[0], "visual.w_h1");
        assert_eq!(names.last().unwrap(), "classifier.dense2.bias");
    }

    #[test]
    fn fused_pooling_matches_reference_path() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 4).unwrap();
        let mut rng = SeededStream::new(5);
        let v = views(&config, &mut rng);
        let fwd = forward(&params, &config, &v).unwrap();
        let unified: Vec<Matrix> = (0..3).map(|m| unify(&v[m], &params.otk[m]).unwrap().0).collect();
        for m in 0..3 {
            let [n, p] = partners(m);
            let tn = cross_transport(&unified[n], &unified[m], config.sinkhorn).unwrap().0;
            let tp = cross_transport(&unified[p], &unified[m], config.sinkhorn).unwrap().0;
            let (_, summary, _) = self_attention(&v[m], &params.attention[m]).unwrap();
            let expect = shared_repr(&summary, &tn, &tp, &params.pool_proj[m]).unwrap();
            for (a, b) in fwd.shared[m].iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn ablations_zero_their_parts() {
        let base = tiny_config();
        let params = ModelParams::init(&base, 6).unwrap();
        let mut rng = SeededStream::new(7);
        let v = views(&base, &mut rng);
        let part = base.part_dim();

        let mut c = base.clone();
        c.ablation.no_cross_attention = true;
        let fwd = forward(&params, &c, &v).unwrap();
        for s in &fwd.shared {
            assert!(s[..part].iter().any(|&x| x != 0.0));
            assert!(s[part..].iter().all(|&x| x == 0.0));
        }

        let mut c = base.clone();
        c.ablation.no_self_attention = true;
        let fwd = forward(&params, &c, &v).unwrap();
        for s in &fwd.shared {
            assert!(s[..part].iter().all(|&x| x == 0.0));
            assert_eq!(s.len(), 3 * part);
        }
        assert!(fwd.attention_map(Modality::Visual).is_none());

        let mut c = base.clone();
        c.ablation.no_maf = true;
        assert_eq!(forward(&params, &c, &v).unwrap().maf_weights, [0.0; 3]);

        let mut c = base.clone();
        c.ablation.modalities = [false, true, false];
        let fwd = forward(&params, &c, &v).unwrap();
        assert_eq!(fwd.maf_weights, [0.0, 1.0, 0.0]);
        assert!(fwd.shared[0].iter().all(|&x| x == 0.0));
        assert!(fwd.shared[1][part..].iter().all(|&x| x == 0.0));
        // inactive views are never read
        let mut v2 = v.clone();
        v2[0] = Matrix::zeros(2, 99);
        assert_eq!(forward(&params, &c, &v2).unwrap().logits, fwd.logits);

        let mut c = base.clone();
        c.ablation.modalities = [true, true, false];
        let fwd = forward(&params, &c, &v).unwrap();
        assert!(fwd.shared[0][2 * part..].iter().all(|&x| x == 0.0));
        assert!(fwd.shared[0][part..2 * part].iter().any(|&x| x != 0.0));
    }

    fn check_config(config: &ModelConfig, seed: u64) {
        let report = check_model_gradients(config, seed, 1e-5, 1e-4, None).unwrap();
        assert!(report.pass, "{:#?}", report.worst());
    }

    #[test]
    fn full_model_gradients() {
        check_config(&tiny_config(), 8);
    }

    #[test]
    fn ablated_model_gradients() {
        let mut c = tiny_config();
        c.ablation.no_maf = true;
        c.ablation.modalities = [true, false, true];
        check_config(&c, 9);
        let mut c = tiny_config();
        c.ablation.no_cross_attention = true;
        check_config(&c, 10);
    }

    #[test]
    fn injected_fault_is_caught() {
        let report = check_model_gradients(&grad_check_config(), 1, 1e-5, 1e-4, Some(1.1)).unwrap();
        assert!(!report.pass);
        assert!(report.max_relative_error > 0.05);
    }
}
