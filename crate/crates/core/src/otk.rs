//! Optimal-transport kernel embedding onto a trainable reference set.
//!
//! A variable-length sequence `X` (L × d) is compared against a reference
//! `Z` (p × d) through a kernel `κ`; the entropic plan `P` for cost `−κ`
//! with uniform marginals then pools the kernel features:
//! `Φ_z(X) = √p · Pᵀ φ(X)`, always p rows regardless of L.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::numeric::{dot, Matrix, SeededStream};
use crate::ot::{sinkhorn_unrolled, uniform, CostMatrix, Coupling, SinkhornOptions, SinkhornTape};

const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `κ(x, z) = ⟨x, z⟩`, `φ` the identity.
    #[default]
    DotProduct,
    /// `κ(x, z) = exp(−‖x − z‖² / 2σ²)` with a random Fourier feature map.
    Gaussian { bandwidth: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        match *self {
            KernelSpec::DotProduct => Ok(()),
            KernelSpec::Gaussian { bandwidth } if bandwidth > 0.0 && bandwidth.is_finite() => {
                Ok(())
            }
            KernelSpec::Gaussian { bandwidth } => Err(ModelError::Config(format!(
                "gaussian bandwidth must be positive and finite, got {bandwidth}"
            ))),
        }
    }

    /// Width of `φ(x)` for inputs of width `d`.
    pub fn embed_dim(&self, d: usize) -> usize {
        match self {
            KernelSpec::DotProduct => d,
            KernelSpec::Gaussian { .. } => 2 * d,
        }
    }

    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        match *self {
            KernelSpec::DotProduct => dot(x, z),
            KernelSpec::Gaussian { bandwidth } => {
                let d2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
        }
    }

    /// Kernel matrix between the rows of `x` and the rows of `z`.
    pub fn gram(&self, x: &Matrix, z: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), z.rows(), |i, j| self.eval(x.row(i), z.row(j)))
    }
}

/// Explicit feature map `φ` matching a [`KernelSpec`].
///
/// For the Gaussian kernel this is `φ(x) = D^{-1/2} [cos(xΩ), sin(xΩ)]`
/// with `Ω` a d × D matrix of `N(0, σ⁻²)` draws and `D = d`, so that
/// `⟨φ(x), φ(y)⟩ = D⁻¹ Σ_k cos(ω_k·(x − y)) ≈ κ(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub spec: KernelSpec,
    /// `Ω`, present for the Gaussian kernel only.
    pub frequencies: Option<Matrix>,
}

impl FeatureMap {
    pub fn new(spec: KernelSpec, dim: usize, rng: &mut SeededStream) -> Self {
        let frequencies = match spec {
            KernelSpec::DotProduct => None,
            KernelSpec::Gaussian { bandwidth } => {
                Some(rng.gaussian_matrix(dim, dim, 1.0 / bandwidth))
            }
        };
        FeatureMap { spec, frequencies }
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        match &self.frequencies {
            None => x.to_vec(),
            Some(omega) => {
                let theta = omega.vec_matmul(x).expect("feature map width");
                let scale = 1.0 / (theta.len() as f64).sqrt();
                theta
                    .iter()
                    .map(|t| scale * t.cos())
                    .chain(theta.iter().map(|t| scale * t.sin()))
                    .collect()
            }
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let width = self.spec.embed_dim(x.cols());
        let mut out = Matrix::zeros(x.rows(), width);
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&self.apply_row(x.row(i)));
        }
        out
    }

    fn backward(&self, x: &Matrix, grad_phi: &Matrix) -> Matrix {
        match &self.frequencies {
            None => grad_phi.clone(),
            Some(omega) => {
                let d = omega.cols();
                let scale = 1.0 / (d as f64).sqrt();
                let mut grad_theta = Matrix::zeros(x.rows(), d);
                for i in 0..x.rows() {
                    let theta = omega.vec_matmul(x.row(i)).expect("feature map width");
                    let g = grad_phi.row(i);
                    let gt = grad_theta.row_mut(i);
                    for k in 0..d {
                        gt[k] = scale * (-theta[k].sin() * g[k] + theta[k].cos() * g[d + k]);
                    }
                }
                grad_theta.matmul_t(omega).expect("feature map width")
            }
        }
    }
}

/// `φ(x)` for a single row.
pub fn kernel_feature_map(x: &[f64], map: &FeatureMap) -> Vec<f64> {
    map.apply_row(x)
}

/// A trainable OTK layer: linear projection, reference set and kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtkLayer {
    /// d_m × d_uni
    pub projection: Matrix,
    /// L_uni × d_uni
    pub reference: Matrix,
    pub feature_map: FeatureMap,
    /// Unit-normalize input and reference rows before the kernel.
    pub normalize_rows: bool,
    pub sinkhorn: SinkhornOptions,
}

impl OtkLayer {
    /// Gaussian-initialized layer (σ = `init_std`).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d_in: usize,
        l_uni: usize,
        d_uni: usize,
        kernel: KernelSpec,
        normalize_rows: bool,
        sinkhorn: SinkhornOptions,
        init_std: f64,
        rng: &mut SeededStream,
    ) -> Result<Self, ModelError> {
        kernel.validate()?;
        if l_uni == 0 || d_uni == 0 || d_in == 0 {
            return Err(ModelError::Config(format!(
                "otk dims must be positive: d_in={d_in}, l_uni={l_uni}, d_uni={d_uni}"
            )));
        }
        let projection = rng.gaussian_matrix(d_in, d_uni, init_std);
        let reference = rng.gaussian_matrix(l_uni, d_uni, init_std);
        let feature_map = FeatureMap::new(kernel, d_uni, rng);
        Ok(OtkLayer {
            projection,
            reference,
            feature_map,
            normalize_rows,
            sinkhorn,
        })
    }

    pub fn reference_size(&self) -> usize {
        self.reference.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.feature_map.spec.embed_dim(self.reference.cols())
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct OtkCache {
    input: Option<Matrix>,
    projected: Matrix,
    x_norms: Vec<f64>,
    x_hat: Matrix,
    z_norms: Vec<f64>,
    z_hat: Matrix,
    kernel: Matrix,
    phi: Matrix,
    pub coupling: Coupling,
    tape: SinkhornTape,
}

#[derive(Clone, Debug)]
pub struct OtkGrads {
    pub projection: Option<Matrix>,
    pub reference: Matrix,
    pub input: Matrix,
}

fn normalize_rows(x: &Matrix, enabled: bool) -> (Matrix, Vec<f64>) {
    let norms: Vec<f64> = (0..x.rows()).map(|i| dot(x.row(i), x.row(i)).sqrt()).collect();
    if !enabled {
        return (x.clone(), norms);
    }
    let mut out = x.clone();
    for (i, n) in norms.iter().enumerate() {
        let s = 1.0 / (n + NORM_EPS);
        out.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    (out, norms)
}

/// Backward of `x̂ = x / (‖x‖ + δ)`.
fn normalize_rows_backward(x: &Matrix, norms: &[f64], grad: &Matrix, enabled: bool) -> Matrix {
    if !enabled {
        return grad.clone();
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let n = norms[i];
        let denom = n + NORM_EPS;
        let g = grad.row(i);
        let xr = x.row(i);
        let o = out.row_mut(i);
        let proj = if n > 0.0 { dot(xr, g) / (denom * denom * n) } else { 0.0 };
        for c in 0..xr.len() {
            o[c] = g[c] / denom - xr[c] * proj;
        }
    }
    out
}

/// Embeds an already projected sequence (L × d_uni) onto the reference.
pub fn otk_embed(x: &Matrix, layer: &OtkLayer) -> Result<(Matrix, OtkCache), ModelError> {
    embed_inner(None, x.clone(), layer)
}

/// Projects `U_m` (L × d_m) to d_uni and embeds it: the unified frame
/// `Ũ_m` of shape L_uni × d_embed.
pub fn unify(u: &Matrix, layer: &OtkLayer) -> Result<(Matrix, OtkCache), ModelError> {
    if u.cols() != layer.projection.rows() {
        return Err(ModelError::Dimension {
            what: "otk input width".into(),
            expected: layer.projection.rows(),
            actual: u.cols(),
        });
    }
    let projected = u.matmul(&layer.projection)?;
    embed_inner(Some(u.clone()), projected, layer)
}

fn embed_inner(
    input: Option<Matrix>,
    projected: Matrix,
    layer: &OtkLayer,
) -> Result<(Matrix, OtkCache), ModelError> {
    if projected.rows() == 0 {
        return Err(ModelError::Dimension {
            what: "otk sequence length".into(),
            expected: 1,
            actual: 0,
        });
    }
    if projected.cols() != layer.reference.cols() {
        return Err(ModelError::Dimension {
            what: "otk feature width".into(),
            expected: layer.reference.cols(),
            actual: projected.cols(),
        });
    }
    let (x_hat, x_norms) = normalize_rows(&projected, layer.normalize_rows);
    let (z_hat, z_norms) = normalize_rows(&layer.reference, layer.normalize_rows);
    let kernel = layer.feature_map.spec.gram(&x_hat, &z_hat);
    if !kernel.is_finite() {
        return Err(ModelError::NonFiniteKernel);
    }
    let p = z_hat.rows();
    let cost = CostMatrix::new(kernel.scale(-1.0))?;
    let (coupling, tape) =
        sinkhorn_unrolled(&cost, &uniform(x_hat.rows()), &uniform(p), layer.sinkhorn)?;
    let phi = layer.feature_map.apply(&x_hat);
    let mut out = coupling.plan.t_matmul(&phi)?;
    out.scale_in_place((p as f64).sqrt());
    let cache = OtkCache {
        input,
        projected,
        x_norms,
        x_hat,
        z_norms,
        z_hat,
        kernel,
        phi,
        coupling,
        tape,
    };
    Ok((out, cache))
}

/// Pulls `∂L/∂Φ` back to the layer parameters and the layer input.
pub fn otk_backward(
    cache: &OtkCache,
    layer: &OtkLayer,
    grad_out: &Matrix,
) -> Result<OtkGrads, ModelError> {
    let p = cache.z_hat.rows();
    let sqrt_p = (p as f64).sqrt();
    let plan = &cache.coupling.plan;

    let grad_plan = cache.phi.matmul_t(grad_out)?.scale(sqrt_p);
    let grad_phi = plan.matmul(grad_out)?.scale(sqrt_p);
    let grad_cost = cache.tape.backward(&grad_plan);
    let grad_kernel = grad_cost.scale(-1.0);

    let mut grad_x_hat = layer.feature_map.backward(&cache.x_hat, &grad_phi);
    let mut grad_z_hat = Matrix::zeros(p, cache.z_hat.cols());
    match layer.feature_map.spec {
        KernelSpec::DotProduct => {
            grad_x_hat.add_scaled(1.0, &grad_kernel.matmul(&cache.z_hat)?)?;
            grad_z_hat = grad_kernel.t_matmul(&cache.x_hat)?;
        }
        KernelSpec::Gaussian { bandwidth } => {
            let inv = 1.0 / (bandwidth * bandwidth);
            for i in 0..cache.x_hat.rows() {
                for j in 0..p {
                    let w = grad_kernel.get(i, j) * cache.kernel.get(i, j) * inv;
                    if w == 0.0 {
                        continue;
                    }
                    let xi = cache.x_hat.row(i).to_vec();
                    let zj = cache.z_hat.row(j).to_vec();
                    for (c, (xv, zv)) in xi.iter().zip(&zj).enumerate() {
                        let diff = xv - zv;
                        let gx = grad_x_hat.get(i, c) - w * diff;
                        grad_x_hat.set(i, c, gx);
                        let gz = grad_z_hat.get(j, c) + w * diff;
                        grad_z_hat.set(j, c, gz);
                    }
                }
            }
        }
    }
    let grad_x = normalize_rows_backward(
        &cache.projected,
        &cache.x_norms,
        &grad_x_hat,
        layer.normalize_rows,
    );
    let grad_reference = normalize_rows_backward(
        &layer.reference,
        &cache.z_norms,
        &grad_z_hat,
        layer.normalize_rows,
    );
    let (projection, input) = match &cache.input {
        Some(u) => (
            Some(u.t_matmul(&grad_x)?),
            grad_x.matmul_t(&layer.projection)?,
        ),
        None => (None, grad_x),
    };
    Ok(OtkGrads {
        projection,
        reference: grad_reference,
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;

    fn opts() -> SinkhornOptions {
        SinkhornOptions {
            eps: 0.1,
            max_iter: 100,
            tol: 1e-6,
        }
    }

    fn layer(d_in: usize, l_uni: usize, d_uni: usize, kernel: KernelSpec, seed: u64) -> OtkLayer {
        let mut rng = SeededStream::new(seed);
        OtkLayer::new(d_in, l_uni, d_uni, kernel, true, opts(), 0.5, &mut rng).unwrap()
    }

    #[test]
    fn dot_product_feature_map_is_identity() {
        let map = FeatureMap::new(KernelSpec::DotProduct, 2, &mut SeededStream::new(0));
        assert_eq!(kernel_feature_map(&[1.0, 2.0], &map), vec![1.0, 2.0]);
    }

    #[test]
    fn random_features_have_unit_self_similarity() {
        let spec = KernelSpec::Gaussian { bandwidth: 1.0 };
        let mut rng = SeededStream::new(10);
        let map = FeatureMap::new(spec, 16, &mut rng);
        for _ in 0..1000 {
            let mut x: Vec<f64> = (0..16).map(|_| rng.gaussian()).collect();
            let n = dot(&x, &x).sqrt();
            x.iter_mut().for_each(|v| *v /= n);
            let phi = map.apply_row(&x);
            assert!((dot(&phi, &phi) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn random_features_approximate_gaussian_kernel() {
        // D random frequencies give a per-pair standard error of about
        // 0.6/√D at these distances; D = 256 puts the mean absolute error
        // near 0.03.
        let spec = KernelSpec::Gaussian { bandwidth: 1.0 };
        let mut rng = SeededStream::new(12);
        let d = 256;
        let map = FeatureMap::new(spec, d, &mut rng);
        let scale = 1.0 / (d as f64).sqrt();
        let pairs = 500;
        let (mut abs, mut signed) = (0.0, 0.0);
        for _ in 0..pairs {
            let x: Vec<f64> = (0..d).map(|_| rng.gaussian() * scale).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.gaussian() * scale).collect();
            let err = dot(&map.apply_row(&x), &map.apply_row(&y)) - spec.eval(&x, &y);
            abs += err.abs();
            signed += err;
        }
        assert!(abs / (pairs as f64) < 0.05, "mean abs error {}", abs / pairs as f64);
        assert!((signed / pairs as f64).abs() < 0.01);
    }

    #[test]
    fn single_reference_row_gives_mean_row() {
        let mut l = layer(3, 1, 3, KernelSpec::DotProduct, 1);
        l.normalize_rows = false;
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [0.0, -1.0, 4.0], [2.0, 2.0, 2.0], [1.0, 0.0, 0.0]]);
        let (out, _) = otk_embed(&x, &l).unwrap();
        assert_eq!(out.shape(), (1, 3));
        let mean = x.mean_rows();
        for c in 0..3 {
            assert!((out.get(0, c) - mean[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn output_has_reference_rows() {
        let l = layer(64, 100, 64, KernelSpec::DotProduct, 2);
        let mut rng = SeededStream::new(3);
        let x = rng.gaussian_matrix(12, 64, 1.0);
        let (out, _) = otk_embed(&x, &l).unwrap();
        assert_eq!(out.shape(), (100, 64));
    }

    #[test]
    fn unify_paper_shapes() {
        let mut rng = SeededStream::new(5);
        let lang = layer(768, 100, 64, KernelSpec::DotProduct, 6);
        let (out, _) = unify(&rng.gaussian_matrix(20, 768, 1.0), &lang).unwrap();
        assert_eq!(out.shape(), (100, 64));
        let acoustic = layer(81, 100, 64, KernelSpec::DotProduct, 7);
        let (out, _) = unify(&rng.gaussian_matrix(35, 81, 1.0), &acoustic).unwrap();
        assert_eq!(out.shape(), (100, 64));
        assert!(unify(&rng.gaussian_matrix(35, 80, 1.0), &acoustic).is_err());
    }

    #[test]
    fn zero_input_maps_to_zero() {
        let l = layer(5, 7, 4, KernelSpec::DotProduct, 8);
        let (out, cache) = unify(&Matrix::zeros(6, 5), &l).unwrap();
        assert_eq!(out.max_abs(), 0.0);
        assert!(cache.coupling.plan.max_abs_diff(&Matrix::filled(6, 7, 1.0 / 42.0)) < 1e-15);
    }

    #[test]
    fn row_permutation_leaves_embedding_unchanged() {
        let l = layer(6, 5, 4, KernelSpec::DotProduct, 9);
        let mut rng = SeededStream::new(10);
        let x = rng.gaussian_matrix(7, 6, 1.0);
        let (base, _) = unify(&x, &l).unwrap();
        for _ in 0..20 {
            let perm = rng.permutation(7);
            let (out, _) = unify(&x.permute_rows(&perm), &l).unwrap();
            assert!(out.max_abs_diff(&base) < 1e-12);
        }
    }

    #[test]
    fn otk_kernel_identity_holds() {
        let mut l = layer(4, 3, 4, KernelSpec::DotProduct, 11);
        l.normalize_rows = false;
        l.sinkhorn.tol = 1e-12;
        l.sinkhorn.max_iter = 10_000;
        let mut rng = SeededStream::new(12);
        let x = rng.gaussian_matrix(5, 4, 1.0);
        let y = rng.gaussian_matrix(6, 4, 1.0);
        let (ex, cx) = otk_embed(&x, &l).unwrap();
        let (ey, cy) = otk_embed(&y, &l).unwrap();
        let inner: f64 = ex.data().iter().zip(ey.data()).map(|(a, b)| a * b).sum();
        let p = l.reference_size() as f64;
        let pz = cx.coupling.plan.matmul_t(&cy.coupling.plan).unwrap().scale(p);
        let gram = KernelSpec::DotProduct.gram(&x, &y);
        let k: f64 = pz.data().iter().zip(gram.data()).map(|(a, b)| a * b).sum();
        assert!((inner - k).abs() < 1e-8);
    }

    #[test]
    fn gram_matrices_are_psd() {
        let mut rng = SeededStream::new(13);
        for spec in [KernelSpec::DotProduct, KernelSpec::Gaussian { bandwidth: 0.7 }] {
            for _ in 0..20 {
                let n = rng.int_inclusive(1, 10);
                let x = rng.gaussian_matrix(n, 3, 1.0);
                let g = spec.gram(&x, &x);
                let m = nalgebra::DMatrix::from_row_slice(n, n, g.data());
                let min = m.symmetric_eigen().eigenvalues.min();
                assert!(min >= -1e-8, "{spec:?}: {min}");
            }
        }
    }

    fn check_layer_grads(kernel: KernelSpec, normalize: bool, seed: u64) {
        let mut l = layer(5, 3, 4, kernel, seed);
        l.normalize_rows = normalize;
        l.sinkhorn = SinkhornOptions {
            eps: 0.5,
            max_iter: 20,
            tol: 0.0,
        };
        let mut rng = SeededStream::new(seed + 100);
        let u = rng.gaussian_matrix(6, 5, 1.0);
        let weights = rng.gaussian_matrix(3, l.embed_dim(), 1.0);
        let loss = |layer: &OtkLayer| -> f64 {
            let (out, _) = unify(&u, layer).unwrap();
            out.hadamard(&weights).unwrap().sum()
        };
        let (_, cache) = unify(&u, &l).unwrap();
        let grads = otk_backward(&cache, &l, &weights).unwrap();
        let mut params = vec![l.projection.clone(), l.reference.clone()];
        let analytic = vec![grads.projection.unwrap(), grads.reference];
        let base = l.clone();
        let report = grad_check(&mut params, &analytic, 1e-5, 1e-4, |p| {
            let mut layer = base.clone();
            layer.projection = p[0].clone();
            layer.reference = p[1].clone();
            loss(&layer)
        })
        .unwrap();
        assert!(report.pass, "{kernel:?} normalize={normalize}: {report:?}");
    }

    #[test]
    fn gradients_dot_product() {
        check_layer_grads(KernelSpec::DotProduct, true, 20);
        check_layer_grads(KernelSpec::DotProduct, false, 21);
    }

    #[test]
    fn gradients_gaussian() {
        check_layer_grads(KernelSpec::Gaussian { bandwidth: 0.8 }, true, 22);
        check_layer_grads(KernelSpec::Gaussian { bandwidth: 1.5 }, false, 23);
    }
}
