//! Sparse Gaussian-process machinery over inducing points.
//!
//! The vector field carries an independent GP prior per output dimension,
//! all sharing one kernel and one set of inducing sites Z (M x d). Inducing
//! outputs U (M x d) have prior column-wise N(0, K(Z, Z)). Conditioning and
//! sampling follow the decomposition
//! f(x) | U = f_prior(x) + k(x, Z) K(Z, Z)^{-1} (U - f_prior(Z)),
//! where f_prior is a weight-space draw from the kernel's Fourier basis; the
//! correction term interpolates the sample through the inducing outputs while
//! the prior draw supplies between-point variability. Fresh Fourier weights
//! are drawn per sample; the frequency/phase basis is fixed per model so each
//! optimization run sees one consistent function-space approximation.

use crate::autodiff::{RffData, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{
    chol_psd, gram, sample_fourier_basis, se_kernel, CholFactor, FourierBasis, SeKernelParams,
};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Predictive variances may round slightly negative; anything beyond this is
/// treated as a numerical failure instead of being clamped.
const VAR_CLAMP_FLOOR: f64 = -1e-9;

/// Sparse GP model state: inducing sites, kernel, Fourier basis, and the
/// per-dimension observation noise variances (log-stored).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InducingModel {
    pub z: Array2<f64>,
    pub kernel: SeKernelParams,
    pub basis: FourierBasis,
    log_noise: Array1<f64>,
}

impl InducingModel {
    /// Assemble a model; `noise_variances` has one entry per state dimension.
    pub fn new(
        z: Array2<f64>,
        kernel: SeKernelParams,
        basis: FourierBasis,
        noise_variances: &[f64],
    ) -> Result<Self> {
        let d = kernel.dim();
        if z.ncols() != d {
            return Err(Error::dim("InducingModel", format!("{d} columns"), format!("{}", z.ncols())));
        }
        if z.nrows() == 0 {
            return Err(Error::InvalidParameter("need at least one inducing point".into()));
        }
        if basis.dim() != d {
            return Err(Error::dim("InducingModel basis", format!("{d}"), format!("{}", basis.dim())));
        }
        if noise_variances.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "noise variances must be positive, got {noise_variances:?}"
            )));
        }
        Ok(InducingModel {
            z,
            kernel,
            basis,
            log_noise: noise_variances.iter().map(|v| v.ln()).collect(),
        })
    }

    /// Number of inducing points.
    pub fn m(&self) -> usize {
        self.z.nrows()
    }

    /// State dimension.
    pub fn d(&self) -> usize {
        self.z.ncols()
    }

    pub fn noise_variances(&self) -> Array1<f64> {
        self.log_noise.mapv(f64::exp)
    }

    pub fn log_noise(&self) -> &Array1<f64> {
        &self.log_noise
    }

    pub fn set_log_noise(&mut self, log_noise: &[f64]) {
        self.log_noise = Array1::from(log_noise.to_vec());
    }

    /// Gram matrix over the inducing sites (with jitter) and its factor.
    pub fn gram_factor(&self) -> Result<(Array2<f64>, CholFactor)> {
        let k = gram(self.z.view(), self.z.view(), &self.kernel)?;
        let f = chol_psd(k.view(), &self.kernel)?;
        Ok((k, f))
    }

    /// Re-materialize the Fourier basis after hyperparameter updates.
    pub fn refresh_basis(&mut self) {
        let kernel = self.kernel.clone();
        self.basis.materialize(&kernel);
    }
}

/// Build a default model: inducing sites drawn uniformly inside the bounding
/// box of the provided anchor states, fresh Fourier basis, shared noise init.
pub fn init_inducing_model(
    anchors: ArrayView2<f64>,
    m: usize,
    kernel: SeKernelParams,
    n_features: usize,
    noise_init: f64,
    rng: &mut impl Rng,
) -> Result<InducingModel> {
    if anchors.nrows() == 0 {
        return Err(Error::EmptyData("no anchor states for inducing initialization".into()));
    }
    let d = kernel.dim();
    if anchors.ncols() != d {
        return Err(Error::dim("init_inducing_model", format!("{d}"), format!("{}", anchors.ncols())));
    }
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in anchors.rows() {
        for j in 0..d {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
        }
    }
    let z = Array2::from_shape_fn((m, d), |(_, j)| {
        if hi[j] > lo[j] {
            lo[j] + rng.gen::<f64>() * (hi[j] - lo[j])
        } else {
            lo[j]
        }
    });
    let basis = sample_fourier_basis(&kernel, n_features, d, rng)?;
    let noise = vec![noise_init; d];
    InducingModel::new(z, kernel, basis, &noise)
}

/// log N(vec(U); 0, I_d (x) K(Z, Z)): independent columns under the shared
/// inducing Gram (jitter included).
pub fn prior_u_logpdf(model: &InducingModel, u: ArrayView2<f64>) -> Result<f64> {
    let (m, d) = (model.m(), model.d());
    if u.shape() != [m, d] {
        return Err(Error::dim("prior_u_logpdf", format!("{m}x{d}"), format!("{:?}", u.shape())));
    }
    let (_, f) = model.gram_factor()?;
    let log_det = f.log_det();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = -0.5 * d as f64 * (m as f64 * ln_2pi + log_det);
    for j in 0..d {
        let col = u.column(j).to_owned();
        let alpha = f.solve_lower(col.view());
        total -= 0.5 * alpha.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

/// Conditional mean (per dimension) and shared predictive variance of the GP
/// at `x` given inducing outputs `u`. Variances in [-1e-9, 0) clamp to zero;
/// anything lower is a numerical failure.
pub fn conditional_moments(
    model: &InducingModel,
    u: ArrayView2<f64>,
    x: ArrayView1<f64>,
) -> Result<(Array1<f64>, f64)> {
    let (m, d) = (model.m(), model.d());
    if u.shape() != [m, d] {
        return Err(Error::dim("conditional_moments", format!("{m}x{d}"), format!("{:?}", u.shape())));
    }
    let (_, f) = model.gram_factor()?;
    let mut k_x = Array1::zeros(m);
    for i in 0..m {
        k_x[i] = se_kernel(x, model.z.row(i), &model.kernel)?;
    }
    let alpha = f.solve(k_x.view());
    let mut mean = Array1::zeros(d);
    for j in 0..d {
        mean[j] = alpha.iter().zip(u.column(j).iter()).map(|(a, b)| a * b).sum();
    }
    let k_xx = se_kernel(x, x, &model.kernel)?;
    let mut var = k_xx - alpha.iter().zip(k_x.iter()).map(|(a, b)| a * b).sum::<f64>();
    if var < VAR_CLAMP_FLOOR {
        return Err(Error::Numerics(format!(
            "predictive variance {var:.3e} below clamp floor {VAR_CLAMP_FLOOR:.1e}"
        )));
    }
    if var < 0.0 {
        var = 0.0;
    }
    Ok((mean, var))
}

/// One pathwise draw of the vector field conditioned on inducing outputs:
/// fresh Fourier weights plus the cached interpolation correction.
#[derive(Clone, Debug)]
pub struct PathSample {
    /// Inducing outputs this sample is conditioned on (M x d).
    pub u: Array2<f64>,
    /// Fresh standard-normal Fourier weights (B x d).
    pub weights: Array2<f64>,
    /// K(Z, Z)^{-1} (U - f_prior(Z)), cached for evaluation (M x d).
    pub correction: Array2<f64>,
}

/// Draw a pathwise sample: fresh weights for the prior draw, correction
/// solved against the inducing Gram.
pub fn matheron_sample(
    model: &InducingModel,
    u: ArrayView2<f64>,
    rng: &mut impl Rng,
) -> Result<PathSample> {
    let (m, d) = (model.m(), model.d());
    if u.shape() != [m, d] {
        return Err(Error::dim("matheron_sample", format!("{m}x{d}"), format!("{:?}", u.shape())));
    }
    let b = model.basis.n_features();
    let weights = Array2::from_shape_fn((b, d), |_| StandardNormal.sample(rng));
    let (_, f) = model.gram_factor()?;
    let mut correction = Array2::zeros((m, d));
    for i in 0..m {
        let prior_i = model.basis.eval_with_weights(weights.view(), model.z.row(i));
        for j in 0..d {
            correction[[i, j]] = u[[i, j]] - prior_i[j];
        }
    }
    for j in 0..d {
        let rhs = correction.column(j).to_owned();
        let sol = f.solve(rhs.view());
        correction.column_mut(j).assign(&sol);
    }
    Ok(PathSample {
        u: u.to_owned(),
        weights,
        correction,
    })
}

/// Evaluate a pathwise sample at `x` (before any prior flow warping).
pub fn path_eval(model: &InducingModel, sample: &PathSample, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    let (m, d) = (model.m(), model.d());
    if x.len() != d {
        return Err(Error::dim("path_eval", format!("{d}"), format!("{}", x.len())));
    }
    let mut out = model.basis.eval_with_weights(sample.weights.view(), x);
    for i in 0..m {
        let k = se_kernel(x, model.z.row(i), &model.kernel)?;
        for j in 0..d {
            out[j] += k * sample.correction[[i, j]];
        }
    }
    Ok(out)
}

// ======================= taped twins =======================

pub(crate) mod taped {
    use super::*;
    use crate::kernels::taped as ktaped;
    use crate::kernels::taped::KernelVars;

    /// Per-graph GP nodes: kernel hyperparameters, inducing sites, the
    /// factored inducing Gram, and lengthscale-scaled sites for Fourier nodes.
    pub struct GpGraph {
        pub kv: KernelVars,
        pub amp: Var,
        /// Inducing sites, row-major M x d.
        pub z: Vec<Var>,
        /// z_ij * inv_l_j, row-major M x d.
        pub z_scaled: Vec<Var>,
        /// Packed lower Cholesky of K(Z, Z) + jitter.
        pub chol: Vec<Var>,
        pub m: usize,
        pub d: usize,
    }

    /// Record the shared GP structure once per graph.
    pub fn gp_graph(tape: &mut Tape, model: &InducingModel) -> Result<GpGraph> {
        let (m, d) = (model.m(), model.d());
        let kv = ktaped::kernel_vars(tape, &model.kernel);
        let amp = ktaped::amplitude(tape, &kv, model.basis.n_features());
        let z: Vec<Var> = model.z.iter().map(|&v| tape.input(v)).collect();
        let mut z_scaled = Vec::with_capacity(m * d);
        for i in 0..m {
            for j in 0..d {
                z_scaled.push(tape.mul(z[i * d + j], kv.inv_l[j]));
            }
        }
        let gram_nodes = ktaped::gram_sym(tape, &z, &kv, m, d, model.kernel.jitter());
        let (chol, extra_jitter) = ktaped::chol(tape, &gram_nodes, m, &model.kernel)?;
        if extra_jitter > 0.0 {
            log::debug!("gram factorization needed extra jitter {extra_jitter:.3e}");
        }
        Ok(GpGraph {
            kv,
            amp,
            z,
            z_scaled,
            chol,
            m,
            d,
        })
    }

    /// Per-sample pathwise nodes: the Fourier payload (fresh weights) and the
    /// interpolation correction, one column of Vars per output dimension.
    pub struct PathVars {
        pub payload: u32,
        pub correction: Vec<Vec<Var>>,
    }

    /// Record a pathwise conditional draw given inducing-output nodes `u`
    /// (row-major M x d) and fresh weights.
    pub fn path_vars(
        tape: &mut Tape,
        model: &InducingModel,
        g: &GpGraph,
        u: &[Var],
        weights: Array2<f64>,
    ) -> PathVars {
        let (m, d) = (g.m, g.d);
        debug_assert_eq!(u.len(), m * d);
        let payload = tape.rff_data(RffData {
            eps: model.basis.unit_frequencies.clone(),
            phases: model.basis.phases.clone(),
            weights,
        });
        // Residuals U - f_prior(Z), then two triangular solves per dimension.
        let mut correction = Vec::with_capacity(d);
        for j in 0..d {
            let mut rhs = Vec::with_capacity(m);
            for i in 0..m {
                let prior = tape.rff_dot(&g.z_scaled[i * d..(i + 1) * d], g.amp, payload, j as u32);
                rhs.push(tape.sub(u[i * d + j], prior));
            }
            let y = ktaped::solve_lower(tape, &g.chol, &rhs);
            let col = ktaped::solve_lower_transpose(tape, &g.chol, &y);
            correction.push(col);
        }
        PathVars { payload, correction }
    }

    /// Evaluate the pathwise draw at state `x` (d Vars), producing d outputs.
    /// This is the hot path: two fused nodes per output dimension.
    pub fn path_eval(tape: &mut Tape, g: &GpGraph, pv: &PathVars, x: &[Var]) -> Vec<Var> {
        let d = g.d;
        debug_assert_eq!(x.len(), d);
        let mut x_scaled = Vec::with_capacity(d);
        for j in 0..d {
            x_scaled.push(tape.mul(x[j], g.kv.inv_l[j]));
        }
        let mut out = Vec::with_capacity(d);
        for j in 0..d {
            let prior = tape.rff_dot(&x_scaled, g.amp, pv.payload, j as u32);
            let corr = tape.sq_exp_dot(x, &g.z, &g.kv.inv_l, g.kv.s2, &pv.correction[j]);
            out.push(tape.add(prior, corr));
        }
        out
    }

    /// log N(vec(U); 0, I (x) K): taped twin of [`super::prior_u_logpdf`],
    /// sharing the graph's Cholesky.
    pub fn prior_u_logpdf(tape: &mut Tape, g: &GpGraph, u: &[Var]) -> Var {
        let (m, d) = (g.m, g.d);
        // log det K = 2 sum ln L_ii.
        let diag: Vec<Var> = (0..m).map(|i| g.chol[i * (i + 1) / 2 + i]).collect();
        let lns: Vec<Var> = diag.iter().map(|&v| tape.ln(v)).collect();
        let half_logdet = tape.sum(&lns);
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let mut total = tape.mul_const(half_logdet, -(d as f64));
        total = tape.add_const(total, -0.5 * d as f64 * m as f64 * ln_2pi);
        for j in 0..d {
            let col: Vec<Var> = (0..m).map(|i| u[i * d + j]).collect();
            let alpha = ktaped::solve_lower(tape, &g.chol, &col);
            let quad = tape.sum_sq(&alpha);
            let half = tape.mul_const(quad, -0.5);
            total = tape.add(total, half);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{arr1, arr2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Model with well-separated sites so K(Z, Z) is effectively diagonal.
    fn diagonal_model(scale: f64, m: usize) -> InducingModel {
        let mut kernel = SeKernelParams::new(&[1.0], scale).unwrap();
        kernel.set_jitter_relative(0.0).unwrap();
        let z = Array2::from_shape_fn((m, 1), |(i, _)| 1000.0 * i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let basis = sample_fourier_basis(&kernel, 8, 1, &mut rng).unwrap();
        InducingModel::new(z, kernel, basis, &[0.1]).unwrap()
    }

    #[test]
    fn prior_logpdf_standard_normal_case() {
        // K = I_2, U = 0: log N(0; 0, I_2) = -ln(2 pi).
        let model = diagonal_model(1.0, 2);
        let u = arr2(&[[0.0], [0.0]]);
        let lp = prior_u_logpdf(&model, u.view()).unwrap();
        assert_relative_eq!(lp, -(2.0 * std::f64::consts::PI).ln(), max_relative = 1e-12);
        assert_relative_eq!(lp, -1.8378770664093453, max_relative = 1e-12);
    }

    #[test]
    fn prior_logpdf_scaled_case() {
        // M = 1, K = [[4]], U = [2]: -1/2 (ln(8 pi) + 1).
        let model = diagonal_model(4.0, 1);
        let u = arr2(&[[2.0]]);
        let lp = prior_u_logpdf(&model, u.view()).unwrap();
        let expect = -0.5 * ((8.0 * std::f64::consts::PI).ln() + 1.0);
        assert_relative_eq!(lp, expect, max_relative = 1e-12);
        assert_relative_eq!(lp, -2.1120857137646178, max_relative = 1e-8);
    }

    #[test]
    fn conditional_moments_interpolate_inducing_outputs() {
        let mut kernel = SeKernelParams::new(&[0.9, 1.3], 1.5).unwrap();
        kernel.set_jitter_relative(1e-10).unwrap();
        let z = arr2(&[[0.0, 0.0], [1.0, -0.5], [-0.7, 0.8]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let basis = sample_fourier_basis(&kernel, 8, 2, &mut rng).unwrap();
        let model = InducingModel::new(z.clone(), kernel, basis, &[0.1, 0.1]).unwrap();
        let u = arr2(&[[0.5, -1.0], [2.0, 0.3], [-0.8, 1.1]]);
        for i in 0..3 {
            let (mean, var) = conditional_moments(&model, u.view(), z.row(i)).unwrap();
            for j in 0..2 {
                assert_relative_eq!(mean[j], u[[i, j]], max_relative = 1e-6, epsilon = 1e-6);
            }
            assert!(var.abs() <= 1e-6, "variance at an inducing site should vanish, got {var}");
        }
    }

    #[test]
    fn conditional_variance_far_from_sites_reaches_prior() {
        let model = diagonal_model(2.5, 3);
        let u = arr2(&[[0.1], [0.2], [-0.1]]);
        let (_, var) = conditional_moments(&model, u.view(), arr1(&[500.0]).view()).unwrap();
        assert_relative_eq!(var, 2.5, max_relative = 1e-8);
    }

    #[test]
    fn matheron_sample_interpolates() {
        let mut kernel = SeKernelParams::new(&[1.1], 1.2).unwrap();
        kernel.set_jitter_relative(1e-12).unwrap();
        let z = arr2(&[[0.0], [0.8], [2.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let basis = sample_fourier_basis(&kernel, 64, 1, &mut rng).unwrap();
        let model = InducingModel::new(z.clone(), kernel, basis, &[0.1]).unwrap();
        let u = arr2(&[[0.4], [-0.9], [1.3]]);
        let sample = matheron_sample(&model, u.view(), &mut rng).unwrap();
        for i in 0..3 {
            let v = path_eval(&model, &sample, z.row(i)).unwrap();
            assert_relative_eq!(v[0], u[[i, 0]], max_relative = 1e-6, epsilon = 1e-6);
        }
    }

    #[test]
    fn matheron_moments_match_conditional_moments() {
        // Marginalizing the basis per draw makes the sampler's mean and
        // variance exactly the conditional moments; SEs from empirical
        // moments, 3-sigma statistical oracle.
        let mut kernel = SeKernelParams::new(&[1.0], 1.3).unwrap();
        kernel.set_jitter_relative(1e-12).unwrap();
        let z = arr2(&[[-1.0], [0.3], [1.4]]);
        let u = arr2(&[[0.7], [-0.4], [0.9]]);
        let x_stars = [arr1(&[0.0]), arr1(&[0.9]), arr1(&[2.2])];
        let n = 40_000;

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let basis0 = sample_fourier_basis(&kernel, 64, 1, &mut rng).unwrap();
        let model0 = InducingModel::new(z.clone(), kernel.clone(), basis0, &[0.1]).unwrap();

        for x in &x_stars {
            let (mean_ref, var_ref) = conditional_moments(&model0, u.view(), x.view()).unwrap();
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                let basis = sample_fourier_basis(&kernel, 64, 1, &mut rng).unwrap();
                let model = InducingModel::new(z.clone(), kernel.clone(), basis, &[0.1]).unwrap();
                let s = matheron_sample(&model, u.view(), &mut rng).unwrap();
                vals.push(path_eval(&model, &s, x.view()).unwrap()[0]);
            }
            let nf = n as f64;
            let mean: f64 = vals.iter().sum::<f64>() / nf;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
            let m4: f64 = vals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / nf;
            let se_mean = (var / nf).sqrt();
            let se_var = ((m4 - var * var).max(0.0) / nf).sqrt();
            assert!(
                (mean - mean_ref[0]).abs() <= 3.0 * se_mean,
                "mean {mean} vs reference {} (3 SE = {})",
                mean_ref[0],
                3.0 * se_mean
            );
            assert!(
                (var - var_ref).abs() <= 3.0 * se_var,
                "variance {var} vs reference {var_ref} (3 SE = {})",
                3.0 * se_var
            );
        }
    }

    #[test]
    fn prior_recovery_without_correction() {
        // With the correction removed, samples are plain weight-space prior
        // draws whose covariance approximates the kernel under a fixed basis.
        let kernel = SeKernelParams::new(&[1.0], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let basis = sample_fourier_basis(&kernel, 2048, 1, &mut rng).unwrap();
        let (xa, xb) = (arr1(&[0.2]), arr1(&[1.0]));
        let n = 20_000;
        let mut prods = 0.0;
        for _ in 0..n {
            let w = Array2::from_shape_fn((2048, 1), |_| StandardNormal.sample(&mut rng));
            let fa = basis.eval_with_weights(w.view(), xa.view())[0];
            let fb = basis.eval_with_weights(w.view(), xb.view())[0];
            prods += fa * fb;
        }
        let cov = prods / n as f64;
        let k = se_kernel(xa.view(), xb.view(), &kernel).unwrap();
        assert!((cov - k).abs() < 0.05, "covariance {cov} vs kernel {k}");
    }

    #[test]
    fn taped_path_eval_matches_value_level() {
        let mut kernel = SeKernelParams::new(&[0.8, 1.2], 1.4).unwrap();
        kernel.set_jitter_relative(1e-8).unwrap();
        let z = arr2(&[[0.0, 0.1], [0.9, -0.4], [-0.5, 0.7], [1.5, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let basis = sample_fourier_basis(&kernel, 32, 2, &mut rng).unwrap();
        let model = InducingModel::new(z, kernel, basis, &[0.1, 0.1]).unwrap();
        let u = Array2::from_shape_fn((4, 2), |(i, j)| ((i + j) as f64 * 0.37).sin());
        let sample = matheron_sample(&model, u.view(), &mut rng).unwrap();

        let mut tape = Tape::new();
        let g = taped::gp_graph(&mut tape, &model).unwrap();
        let uv: Vec<Var> = u.iter().map(|&v| tape.input(v)).collect();
        let pv = taped::path_vars(&mut tape, &model, &g, &uv, sample.weights.clone());
        let x = arr1(&[0.3, -0.2]);
        let xv: Vec<Var> = x.iter().map(|&v| tape.input(v)).collect();
        let out = taped::path_eval(&mut tape, &g, &pv, &xv);
        let value = path_eval(&model, &sample, x.view()).unwrap();
        for j in 0..2 {
            assert_relative_eq!(tape.value(out[j]), value[j], max_relative = 1e-10, epsilon = 1e-12);
        }

        // And the taped prior log-density against the value-level one.
        let lp = taped::prior_u_logpdf(&mut tape, &g, &uv);
        let lp_value = prior_u_logpdf(&model, u.view()).unwrap();
        assert_relative_eq!(tape.value(lp), lp_value, max_relative = 1e-10);
    }

    #[test]
    fn taped_path_gradient_matches_finite_differences() {
        // Gradient of sum(path_eval(x)) with respect to an inducing output,
        // holding weights fixed.
        let mut kernel = SeKernelParams::new(&[1.0], 1.0).unwrap();
        kernel.set_jitter_relative(1e-8).unwrap();
        let z = arr2(&[[0.0], [1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis = sample_fourier_basis(&kernel, 16, 1, &mut rng).unwrap();
        let model = InducingModel::new(z, kernel, basis, &[0.1]).unwrap();
        let weights = Array2::from_shape_fn((16, 1), |_| StandardNormal.sample(&mut rng));
        let x = arr1(&[0.4]);

        let eval = |u00: f64| {
            let u = arr2(&[[u00], [0.5]]);
            let (_, f) = model.gram_factor().unwrap();
            let mut corr = Array2::zeros((2, 1));
            for i in 0..2 {
                let p = model.basis.eval_with_weights(weights.view(), model.z.row(i));
                corr[[i, 0]] = u[[i, 0]] - p[0];
            }
            let sol = f.solve(corr.column(0).to_owned().view());
            let mut corr2 = corr.clone();
            corr2.column_mut(0).assign(&sol);
            let s = PathSample { u, weights: weights.clone(), correction: corr2 };
            path_eval(&model, &s, x.view()).unwrap()[0]
        };

        let mut tape = Tape::new();
        let g = taped::gp_graph(&mut tape, &model).unwrap();
        let u0 = 0.8;
        let uv = vec![tape.input(u0), tape.input(0.5)];
        let pv = taped::path_vars(&mut tape, &model, &g, &uv, weights.clone());
        let xv = vec![tape.input(x[0])];
        let out = taped::path_eval(&mut tape, &g, &pv, &xv);
        tape.backward(out[0]);
        let h = 1e-6;
        let fd = (eval(u0 + h) - eval(u0 - h)) / (2.0 * h);
        assert_relative_eq!(tape.grad(uv[0]), fd, max_relative = 1e-6, epsilon = 1e-9);
    }
}
