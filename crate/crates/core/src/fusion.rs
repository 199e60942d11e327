//! Cross-modal transport, shared representations, attention fusion and the
//! classification head.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::numeric::{dot, softmax, softmax_backward, Matrix, SeededStream};
use crate::ot::{
    barycentric_map, sinkhorn_unrolled, uniform, CostMatrix, Coupling, SinkhornOptions,
    SinkhornTape,
};

/// Number of modalities fused by the model.
pub const MODALITIES: usize = 3;

/// Squared Euclidean distances between the rows of `source` and `target`.
pub fn squared_distances(source: &Matrix, target: &Matrix) -> Matrix {
    Matrix::from_fn(source.rows(), target.rows(), |i, j| {
        source
            .row(i)
            .iter()
            .zip(target.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    })
}

fn solve_cross(
    source: &Matrix,
    target: &Matrix,
    opts: SinkhornOptions,
) -> Result<(Coupling, SinkhornTape), ModelError> {
    if source.cols() != target.cols() {
        return Err(ModelError::Dimension {
            what: "cross-transport feature width".into(),
            expected: target.cols(),
            actual: source.cols(),
        });
    }
    let cost = CostMatrix::new(squared_distances(source, target))?;
    Ok(sinkhorn_unrolled(
        &cost,
        &uniform(source.rows()),
        &uniform(target.rows()),
        opts,
    )?)
}

/// Transports `source` rows into the frame of `target`: the barycentric
/// image of each source row under the entropic plan for squared Euclidean
/// cost with uniform marginals.
pub fn cross_transport(
    source: &Matrix,
    target: &Matrix,
    opts: SinkhornOptions,
) -> Result<(Matrix, Coupling), ModelError> {
    let (coupling, _) = solve_cross(source, target, opts)?;
    let mapped = barycentric_map(&coupling, target)?;
    Ok((mapped, coupling))
}

#[derive(Clone, Debug)]
pub struct CrossCache {
    source: Matrix,
    target: Matrix,
    column_weights: Vec<f64>,
    pub coupling: Coupling,
    tape: SinkhornTape,
}

/// Mean over rows of [`cross_transport`], evaluated without materializing
/// the transported matrix: `Σ_j w_j target_j` with `w_j = Σ_i P_ij / (n a_i)`.
pub fn cross_transport_pooled(
    source: &Matrix,
    target: &Matrix,
    opts: SinkhornOptions,
) -> Result<(Vec<f64>, CrossCache), ModelError> {
    let (coupling, tape) = solve_cross(source, target, opts)?;
    let n = source.rows() as f64;
    let mut column_weights = vec![0.0; target.rows()];
    for (i, &a) in coupling.a.iter().enumerate() {
        let s = 1.0 / (n * a);
        for (w, &p) in column_weights.iter_mut().zip(coupling.plan.row(i)) {
            *w += s * p;
        }
    }
    let pooled = target.vec_matmul(&column_weights)?;
    Ok((
        pooled,
        CrossCache {
            source: source.clone(),
            target: target.clone(),
            column_weights,
            coupling,
            tape,
        },
    ))
}

/// Gradients of [`cross_transport_pooled`] w.r.t. `(source, target)`.
pub fn cross_transport_pooled_backward(
    cache: &CrossCache,
    grad_pooled: &[f64],
) -> Result<(Matrix, Matrix), ModelError> {
    let (n, m) = cache.coupling.plan.shape();
    let d = cache.target.cols();
    let mut grad_target = Matrix::zeros(m, d);
    for j in 0..m {
        let w = cache.column_weights[j];
        for (g, &gp) in grad_target.row_mut(j).iter_mut().zip(grad_pooled) {
            *g = w * gp;
        }
    }
    let grad_w: Vec<f64> = (0..m).map(|j| dot(cache.target.row(j), grad_pooled)).collect();
    let nf = n as f64;
    let grad_plan = Matrix::from_fn(n, m, |i, j| grad_w[j] / (nf * cache.coupling.a[i]));
    let grad_cost = cache.tape.backward(&grad_plan);
    let mut grad_source = Matrix::zeros(n, d);
    for i in 0..n {
        let si = cache.source.row(i);
        for j in 0..m {
            let g = 2.0 * grad_cost.get(i, j);
            if g == 0.0 {
                continue;
            }
            let tj = cache.target.row(j).to_vec();
            for c in 0..d {
                let diff = si[c] - tj[c];
                grad_source.data_mut()[i * d + c] += g * diff;
                grad_target.data_mut()[j * d + c] -= g * diff;
            }
        }
    }
    Ok((grad_source, grad_target))
}

/// Per-modality shared vector `[self ⊕ from-n ⊕ from-p]`.
///
/// The self part is the mean of the k head summaries projected to the
/// unified width; each transported part is the mean of its rows.
pub fn shared_repr(
    summaries: &Matrix,
    transported_n: &Matrix,
    transported_p: &Matrix,
    pool_proj: &Matrix,
) -> Result<Vec<f64>, ModelError> {
    if summaries.cols() != pool_proj.rows() {
        return Err(ModelError::Dimension {
            what: "self-attention summary width".into(),
            expected: pool_proj.rows(),
            actual: summaries.cols(),
        });
    }
    let d_uni = pool_proj.cols();
    for t in [transported_n, transported_p] {
        if t.cols() != d_uni {
            return Err(ModelError::Dimension {
                what: "transported feature width".into(),
                expected: d_uni,
                actual: t.cols(),
            });
        }
    }
    let mut out = pool_proj.vec_matmul(&summaries.mean_rows())?;
    out.extend(transported_n.mean_rows());
    out.extend(transported_p.mean_rows());
    Ok(out)
}

/// Affine layer `y = W x + b` with W stored out × in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn new(input: usize, output: usize, init_std: f64, rng: &mut SeededStream) -> Self {
        Dense {
            weight: rng.gaussian_matrix(output, input, init_std),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .matvec(x)
            .expect("dense input width")
            .into_iter()
            .zip(self.bias.data())
            .map(|(y, b)| y + b)
            .collect()
    }
}

/// Dense layers with tanh between them and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseStack {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct StackCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl DenseStack {
    /// `dims = [in, h1, ..., out]`.
    pub fn new(dims: &[usize], init_std: f64, rng: &mut SeededStream) -> Result<Self, ModelError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(ModelError::Config(format!("bad dense stack dims {dims:?}")));
        }
        Ok(DenseStack {
            layers: dims
                .windows(2)
                .map(|w| Dense::new(w[0], w[1], init_std, rng))
                .collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.rows()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.rows()));
        d
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, StackCache), ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::Dimension {
                what: "dense stack input".into(),
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&h);
            if idx < last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut h, y));
        }
        Ok((h, StackCache { inputs }))
    }

    /// Returns the input gradient and per-layer parameter gradients.
    pub fn backward(&self, cache: &StackCache, grad_out: &[f64]) -> (Vec<f64>, Vec<DenseGrads>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[idx];
            let weight = Matrix::from_fn(g.len(), x.len(), |o, i| g[o] * x[i]);
            let bias = Matrix::row_vector(&g);
            let mut gx = layer.weight.vec_matmul(&g).expect("dense width");
            if idx > 0 {
                // x is tanh output of the previous layer
                for (gx, &xv) in gx.iter_mut().zip(x) {
                    *gx *= 1.0 - xv * xv;
                }
            }
            grads.push(DenseGrads { weight, bias });
            g = gx;
        }
        grads.reverse();
        (g, grads)
    }
}

/// How modality attention weights are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Softmax over the active modalities' dense-stack logits.
    Attention,
    /// All weights zero, so every scaling is exactly one.
    Plain,
}

/// Trainable fusion and classification parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MafParams {
    /// One d_uni → … → 1 stack per modality.
    pub attention: Vec<DenseStack>,
    /// out × (3 · shared width)
    pub w_u: Matrix,
    pub classifier: DenseStack,
}

impl MafParams {
    pub fn new(
        d_uni: usize,
        maf_hidden: &[usize],
        classifier_hidden: &[usize],
        init_std: f64,
        rng: &mut SeededStream,
    ) -> Result<Self, ModelError> {
        let shared = 3 * d_uni;
        let mut maf_dims = vec![d_uni];
        maf_dims.extend_from_slice(maf_hidden);
        maf_dims.push(1);
        let attention = (0..MODALITIES)
            .map(|_| DenseStack::new(&maf_dims, init_std, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let w_u = rng.gaussian_matrix(shared, MODALITIES * shared, init_std);
        let mut cls_dims = vec![shared];
        cls_dims.extend_from_slice(classifier_hidden);
        cls_dims.push(2);
        let classifier = DenseStack::new(&cls_dims, init_std, rng)?;
        Ok(MafParams {
            attention,
            w_u,
            classifier,
        })
    }

    pub fn shared_dim(&self) -> usize {
        self.w_u.rows()
    }
}

#[derive(Clone, Debug)]
pub struct MafCache {
    shared: Vec<Vec<f64>>,
    stacks: Vec<Option<StackCache>>,
    pub weights: [f64; MODALITIES],
    active: [bool; MODALITIES],
    mode: FusionMode,
    concat: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MafGrads {
    pub shared: Vec<Vec<f64>>,
    pub attention: Vec<Vec<DenseGrads>>,
    pub w_u: Matrix,
}

fn descriptor(shared: &[f64]) -> Vec<f64> {
    let d = shared.len() / 3;
    (0..d)
        .map(|c| (shared[c] + shared[d + c] + shared[2 * d + c]) / 3.0)
        .collect()
}

/// Modality attention and weighted fusion.
///
/// Each active modality's descriptor (mean of its three parts) runs through
/// its dense stack to a logit; the weights are the softmax of those logits,
/// each shared vector is scaled by `1 + w_m`, and the concatenation is
/// projected by `W_U`. Inactive modalities have weight zero and contribute
/// nothing.
pub fn maf(
    shared: &[Vec<f64>],
    params: &MafParams,
    active: [bool; MODALITIES],
    mode: FusionMode,
) -> Result<([f64; MODALITIES], Vec<f64>, MafCache), ModelError> {
    let width = params.shared_dim();
    if shared.len() != MODALITIES {
        return Err(ModelError::Dimension {
            what: "number of shared vectors".into(),
            expected: MODALITIES,
            actual: shared.len(),
        });
    }
    for s in shared {
        if s.len() != width {
            return Err(ModelError::Dimension {
                what: "shared vector length".into(),
                expected: width,
                actual: s.len(),
            });
        }
    }
    let mut weights = [0.0; MODALITIES];
    let mut stacks = vec![None, None, None];
    if mode == FusionMode::Attention {
        let mut logits = Vec::new();
        let mut idx = Vec::new();
        for m in 0..MODALITIES {
            if !active[m] {
                continue;
            }
            let (out, cache) = params.attention[m].forward(&descriptor(&shared[m]))?;
            logits.push(out[0]);
            idx.push(m);
            stacks[m] = Some(cache);
        }
        for (w, m) in softmax(&logits).into_iter().zip(idx) {
            weights[m] = w;
        }
    }
    let mut concat = Vec::with_capacity(MODALITIES * width);
    for m in 0..MODALITIES {
        if active[m] {
            let s = 1.0 + weights[m];
            concat.extend(shared[m].iter().map(|v| s * v));
        } else {
            concat.extend(std::iter::repeat_n(0.0, width));
        }
    }
    let fused = params.w_u.matvec(&concat)?;
    let cache = MafCache {
        shared: shared.to_vec(),
        stacks,
        weights,
        active,
        mode,
        concat,
    };
    Ok((weights, fused, cache))
}

pub fn maf_backward(
    cache: &MafCache,
    params: &MafParams,
    grad_fused: &[f64],
) -> Result<MafGrads, ModelError> {
    let width = params.shared_dim();
    let w_u = Matrix::from_fn(grad_fused.len(), cache.concat.len(), |o, i| {
        grad_fused[o] * cache.concat[i]
    });
    let grad_concat = params.w_u.vec_matmul(grad_fused)?;
    let mut grad_shared = vec![vec![0.0; width]; MODALITIES];
    let mut grad_weights = [0.0; MODALITIES];
    for m in 0..MODALITIES {
        if !cache.active[m] {
            continue;
        }
        let g = &grad_concat[m * width..(m + 1) * width];
        let s = 1.0 + cache.weights[m];
        for (gs, &gv) in grad_shared[m].iter_mut().zip(g) {
            *gs = s * gv;
        }
        grad_weights[m] = dot(g, &cache.shared[m]);
    }
    let mut attention = vec![Vec::new(), Vec::new(), Vec::new()];
    if cache.mode == FusionMode::Attention {
        let idx: Vec<usize> = (0..MODALITIES).filter(|&m| cache.active[m]).collect();
        let probs: Vec<f64> = idx.iter().map(|&m| cache.weights[m]).collect();
        let gw: Vec<f64> = idx.iter().map(|&m| grad_weights[m]).collect();
        let grad_logits = softmax_backward(&probs, &gw);
        for (gl, &m) in grad_logits.iter().zip(&idx) {
            let stack_cache = cache.stacks[m].as_ref().expect("active stack cached");
            let (grad_desc, layer_grads) = params.attention[m].backward(stack_cache, &[*gl]);
            attention[m] = layer_grads;
            let d = width / 3;
            for part in 0..3 {
                for c in 0..d {
                    grad_shared[m][part * d + c] += grad_desc[c] / 3.0;
                }
            }
        }
    }
    Ok(MafGrads {
        shared: grad_shared,
        attention,
        w_u,
    })
}

/// Classification head: logits for the two classes.
pub fn classify(
    fused: &[f64],
    params: &MafParams,
) -> Result<(Vec<f64>, StackCache), ModelError> {
    params.classifier.forward(fused)
}
