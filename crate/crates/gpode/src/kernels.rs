//! Squared-exponential kernel with ARD lengthscales, Gram/Cholesky utilities,
//! and random Fourier features for weight-space prior draws.
//!
//! Hyperparameters are stored in log space so optimizers can move freely;
//! accessors exponentiate. The kernel is
//! k(x, x') = s2 * exp(-1/2 * sum_j (x_j - x'_j)^2 / l_j^2),
//! and a Fourier basis approximates draws from it as
//! f(x) ~= amp * sum_b w_b cos(omega_b . x + phi_b) with omega_b ~ N(0, diag(1/l^2)),
//! phi_b ~ U[0, 2pi), w_b ~ N(0, 1), amp = sqrt(2 s2 / B).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Default diagonal regularizer, relative to the signal variance.
pub const DEFAULT_JITTER_REL: f64 = 1e-6;
/// Largest jitter the Cholesky escalation will try, relative to the signal variance.
pub const MAX_JITTER_REL: f64 = 1e-4;

// ======================= parameters =======================

/// ARD squared-exponential kernel hyperparameters, stored in log space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeKernelParams {
    log_lengthscales: Array1<f64>,
    log_signal_variance: f64,
    /// Diagonal regularizer relative to the signal variance; >= 0.
    jitter_rel: f64,
}

impl SeKernelParams {
    /// Build from natural-space values; all must be strictly positive.
    pub fn new(lengthscales: &[f64], signal_variance: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::InvalidParameter("lengthscales must be non-empty".into()));
        }
        if lengthscales.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lengthscales must be positive and finite, got {lengthscales:?}"
            )));
        }
        if !(signal_variance > 0.0) || !signal_variance.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "signal variance must be positive and finite, got {signal_variance}"
            )));
        }
        Ok(SeKernelParams {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_signal_variance: signal_variance.ln(),
            jitter_rel: DEFAULT_JITTER_REL,
        })
    }

    /// Input dimension.
    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> Array1<f64> {
        self.log_lengthscales.mapv(f64::exp)
    }

    pub fn inv_lengthscales(&self) -> Array1<f64> {
        self.log_lengthscales.mapv(|l| (-l).exp())
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    /// Absolute jitter added to symmetric Gram diagonals.
    pub fn jitter(&self) -> f64 {
        self.jitter_rel * self.signal_variance()
    }

    /// Set the relative jitter (>= 0; 0 disables regularization, useful in tests).
    pub fn set_jitter_relative(&mut self, rel: f64) -> Result<()> {
        if !(rel >= 0.0) || !rel.is_finite() {
            return Err(Error::InvalidParameter(format!("jitter must be >= 0, got {rel}")));
        }
        self.jitter_rel = rel;
        Ok(())
    }

    pub fn jitter_relative(&self) -> f64 {
        self.jitter_rel
    }

    pub fn log_lengthscales(&self) -> &Array1<f64> {
        &self.log_lengthscales
    }

    pub fn log_signal_variance(&self) -> f64 {
        self.log_signal_variance
    }

    /// Overwrite the log-space values (used by the optimizer's unflatten).
    pub fn set_logs(&mut self, log_lengthscales: &[f64], log_signal_variance: f64) {
        self.log_lengthscales = Array1::from(log_lengthscales.to_vec());
        self.log_signal_variance = log_signal_variance;
    }
}

// ======================= kernel and Gram =======================

/// Kernel value between two points.
pub fn se_kernel(x: ArrayView1<f64>, x2: ArrayView1<f64>, params: &SeKernelParams) -> Result<f64> {
    let d = params.dim();
    if x.len() != d || x2.len() != d {
        return Err(Error::dim(
            "se_kernel",
            format!("{d}"),
            format!("{} and {}", x.len(), x2.len()),
        ));
    }
    let inv_l = params.inv_lengthscales();
    let mut q = 0.0;
    for j in 0..d {
        let t = (x[j] - x2[j]) * inv_l[j];
        q += t * t;
    }
    Ok(params.signal_variance() * (-0.5 * q).exp())
}

/// Cross-Gram matrix K(X, Z). When `x` and `z` are the same matrix the result
/// is built symmetric and `params.jitter()` is added to the diagonal.
pub fn gram(x: ArrayView2<f64>, z: ArrayView2<f64>, params: &SeKernelParams) -> Result<Array2<f64>> {
    let d = params.dim();
    if x.ncols() != d || z.ncols() != d {
        return Err(Error::dim(
            "gram",
            format!("{d} columns"),
            format!("{} and {}", x.ncols(), z.ncols()),
        ));
    }
    let symmetric = x.shape() == z.shape() && x == z;
    let (n, m) = (x.nrows(), z.nrows());
    let mut k = Array2::zeros((n, m));
    if symmetric {
        for i in 0..n {
            for j in 0..=i {
                let v = se_kernel(x.row(i), z.row(j), params)?;
                k[[i, j]] = v;
                k[[j, i]] = v;
            }
        }
        let jitter = params.jitter();
        for i in 0..n {
            k[[i, i]] += jitter;
        }
    } else {
        for i in 0..n {
            for j in 0..m {
                k[[i, j]] = se_kernel(x.row(i), z.row(j), params)?;
            }
        }
    }
    Ok(k)
}

/// Lower-triangular Cholesky factor together with the extra jitter that had to
/// be added on top of the input matrix to make the factorization succeed.
#[derive(Clone, Debug)]
pub struct CholFactor {
    pub l: Array2<f64>,
    /// Extra diagonal mass added during escalation; 0 when the raw matrix factored.
    pub jitter_added: f64,
}

impl CholFactor {
    pub fn n(&self) -> usize {
        self.l.nrows()
    }

    /// Solve L y = b.
    pub fn solve_lower(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.n();
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let mut acc = b[i];
            for k in 0..i {
                acc -= self.l[[i, k]] * y[k];
            }
            y[i] = acc / self.l[[i, i]];
        }
        y
    }

    /// Solve L^T x = b.
    pub fn solve_lower_transpose(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.n();
        let mut x = Array1::zeros(n);
        for i in (0..n).rev() {
            let mut acc = b[i];
            for k in i + 1..n {
                acc -= self.l[[k, i]] * x[k];
            }
            x[i] = acc / self.l[[i, i]];
        }
        x
    }

    /// Solve (L L^T) x = b.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let y = self.solve_lower(b);
        self.solve_lower_transpose(y.view())
    }

    /// log det(L L^T) = 2 sum_i ln L_ii.
    pub fn log_det(&self) -> f64 {
        (0..self.n()).map(|i| self.l[[i, i]].ln()).sum::<f64>() * 2.0
    }
}

/// Plain Cholesky; `None` when a pivot is non-positive or non-finite.
fn cholesky_raw(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a[[i, j]];
            for k in 0..j {
                acc -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(acc > 0.0) || !acc.is_finite() {
                    return None;
                }
                l[[i, i]] = acc.sqrt();
            } else {
                l[[i, j]] = acc / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Decide how much extra diagonal mass the matrix needs to factor, walking
/// the ladder params.jitter() * 10^k up to `MAX_JITTER_REL` * signal variance.
/// Returns the chosen extra jitter (0 when the raw matrix factors).
fn jitter_ladder(a: &Array2<f64>, params: &SeKernelParams) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(Error::dim(
            "chol_psd",
            "square matrix",
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    if cholesky_raw(a).is_some() {
        return Ok(0.0);
    }
    let cap = MAX_JITTER_REL * params.signal_variance();
    let mut jitter = params.jitter();
    while jitter > 0.0 && jitter <= cap * (1.0 + 1e-12) {
        let mut aj = a.clone();
        for i in 0..aj.nrows() {
            aj[[i, i]] += jitter;
        }
        if cholesky_raw(&aj).is_some() {
            return Ok(jitter);
        }
        jitter *= 10.0;
    }
    Err(Error::CholeskyFailed {
        size: a.nrows(),
        jitter,
    })
}

/// Cholesky factorization with escalating jitter. The input is factored as
/// given first; on failure, params.jitter() * 10^k is added to the diagonal
/// until the factorization succeeds or the relative cap is reached.
pub fn chol_psd(a: ArrayView2<f64>, params: &SeKernelParams) -> Result<CholFactor> {
    let a = a.to_owned();
    let jitter_added = jitter_ladder(&a, params)?;
    let mut aj = a;
    if jitter_added > 0.0 {
        for i in 0..aj.nrows() {
            aj[[i, i]] += jitter_added;
        }
    }
    let l = cholesky_raw(&aj).expect("ladder already validated this jitter level");
    Ok(CholFactor { l, jitter_added })
}

// ======================= random Fourier features =======================

/// Random Fourier basis for weight-space draws from the kernel's prior.
///
/// `unit_frequencies` holds the raw standard-normal draws; `frequencies`
/// divides them by the current lengthscales. Keeping the raw draws lets the
/// basis be re-materialized when kernel hyperparameters move without changing
/// the underlying randomness.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FourierBasis {
    pub unit_frequencies: Array2<f64>,
    pub phases: Array1<f64>,
    /// Standard-normal weights, one column per output dimension.
    pub weights: Array2<f64>,
    pub frequencies: Array2<f64>,
    pub amplitude: f64,
}

impl FourierBasis {
    /// Number of Fourier features.
    pub fn n_features(&self) -> usize {
        self.unit_frequencies.nrows()
    }

    /// Input dimension.
    pub fn dim(&self) -> usize {
        self.unit_frequencies.ncols()
    }

    /// Output dimension of the carried weights.
    pub fn d_out(&self) -> usize {
        self.weights.ncols()
    }

    /// Recompute `frequencies` and `amplitude` for the given hyperparameters.
    pub fn materialize(&mut self, params: &SeKernelParams) {
        let inv_l = params.inv_lengthscales();
        let mut f = self.unit_frequencies.clone();
        for mut row in f.rows_mut() {
            for (v, il) in row.iter_mut().zip(inv_l.iter()) {
                *v *= il;
            }
        }
        self.frequencies = f;
        self.amplitude = (2.0 * params.signal_variance() / self.n_features() as f64).sqrt();
    }

    /// Feature vector amp * cos(freq . x + phase), length B.
    pub fn features(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let b = self.n_features();
        let mut out = Array1::zeros(b);
        for bi in 0..b {
            let mut a = self.phases[bi];
            for j in 0..self.dim() {
                a += self.frequencies[[bi, j]] * x[j];
            }
            out[bi] = self.amplitude * a.cos();
        }
        out
    }

    /// Evaluate the weight-space draw defined by `weights` (B x d_out) at `x`.
    pub fn eval_with_weights(&self, weights: ArrayView2<f64>, x: ArrayView1<f64>) -> Array1<f64> {
        let feat = self.features(x);
        let mut out = Array1::zeros(weights.ncols());
        for c in 0..weights.ncols() {
            let mut acc = 0.0;
            for bi in 0..feat.len() {
                acc += weights[[bi, c]] * feat[bi];
            }
            out[c] = acc;
        }
        out
    }
}

/// Draw a Fourier basis: frequencies from the kernel's spectral density
/// (standard normals scaled by inverse lengthscales), phases uniform on
/// [0, 2pi), and one standard-normal weight column per output dimension.
pub fn sample_fourier_basis(
    params: &SeKernelParams,
    n_features: usize,
    d_out: usize,
    rng: &mut impl Rng,
) -> Result<FourierBasis> {
    if n_features == 0 || d_out == 0 {
        return Err(Error::InvalidParameter(format!(
            "fourier basis needs n_features > 0 and d_out > 0, got {n_features}, {d_out}"
        )));
    }
    let d = params.dim();
    let unit_frequencies =
        Array2::from_shape_fn((n_features, d), |_| StandardNormal.sample(rng));
    let phases = Array1::from_shape_fn(n_features, |_| rng.gen::<f64>() * std::f64::consts::TAU);
    let weights = Array2::from_shape_fn((n_features, d_out), |_| StandardNormal.sample(rng));
    let mut basis = FourierBasis {
        unit_frequencies,
        phases,
        weights,
        frequencies: Array2::zeros((n_features, d)),
        amplitude: 0.0,
    };
    basis.materialize(params);
    Ok(basis)
}

/// Evaluate the basis's own weight draw at `x` (one value per output dimension).
pub fn rff_prior_eval(basis: &FourierBasis, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    if x.len() != basis.dim() {
        return Err(Error::dim(
            "rff_prior_eval",
            format!("{}", basis.dim()),
            format!("{}", x.len()),
        ));
    }
    Ok(basis.eval_with_weights(basis.weights.view(), x))
}

// ======================= taped twins =======================

/// Differentiable counterparts of the kernel operations, recorded on a tape.
pub(crate) mod taped {
    use super::*;

    /// Kernel hyperparameter nodes shared by one recorded graph.
    pub struct KernelVars {
        pub log_l: Vec<Var>,
        pub log_s2: Var,
        /// exp(-log_l), one per input dimension.
        pub inv_l: Vec<Var>,
        /// exp(log_s2).
        pub s2: Var,
    }

    /// Register the kernel hyperparameters as inputs and derive the nodes the
    /// fused kernel ops consume.
    pub fn kernel_vars(tape: &mut Tape, params: &SeKernelParams) -> KernelVars {
        let log_l: Vec<Var> = params
            .log_lengthscales()
            .iter()
            .map(|&v| tape.input(v))
            .collect();
        let log_s2 = tape.input(params.log_signal_variance());
        let inv_l = log_l
            .iter()
            .map(|&v| {
                let n = tape.neg(v);
                tape.exp(n)
            })
            .collect();
        let s2 = tape.exp(log_s2);
        KernelVars {
            log_l,
            log_s2,
            inv_l,
            s2,
        }
    }

    /// Fourier amplitude node sqrt(2 s2 / B).
    pub fn amplitude(tape: &mut Tape, kv: &KernelVars, n_features: usize) -> Var {
        let scaled = tape.mul_const(kv.s2, 2.0 / n_features as f64);
        tape.sqrt(scaled)
    }

    /// Symmetric Gram over the M points in `z` (row-major M x d), with constant
    /// `jitter` added to the diagonal. Returns the full M x M row-major matrix;
    /// the (i, j) and (j, i) entries share one tape node.
    pub fn gram_sym(
        tape: &mut Tape,
        z: &[Var],
        kv: &KernelVars,
        m: usize,
        d: usize,
        jitter: f64,
    ) -> Vec<Var> {
        assert_eq!(z.len(), m * d, "gram_sym: z block shape mismatch");
        let mut k = vec![Var::default(); m * m];
        for i in 0..m {
            for j in 0..=i {
                let v = if i == j {
                    tape.add_const(kv.s2, jitter)
                } else {
                    let node = tape.sq_exp(&z[i * d..(i + 1) * d], &z[j * d..(j + 1) * d], &kv.inv_l, kv.s2);
                    node
                };
                k[i * m + j] = v;
                k[j * m + i] = v;
            }
        }
        k
    }

    /// Cholesky of the symmetric matrix held in `a` (n x n row-major Vars),
    /// recorded on the tape. The jitter escalation is decided on values first,
    /// then a single factorization is recorded at the chosen level. Returns
    /// the packed lower triangle (row-major: index i*(i+1)/2 + j).
    pub fn chol(
        tape: &mut Tape,
        a: &[Var],
        n: usize,
        params: &SeKernelParams,
    ) -> Result<(Vec<Var>, f64)> {
        let values = Array2::from_shape_fn((n, n), |(i, j)| tape.value(a[i * n + j]));
        let extra = super::jitter_ladder(&values, params)?;
        let mut l: Vec<Var> = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                let mut acc = a[i * n + j];
                if i == j && extra > 0.0 {
                    acc = tape.add_const(acc, extra);
                }
                if j > 0 {
                    let row_i: Vec<Var> = (0..j).map(|k| l[i * (i + 1) / 2 + k]).collect();
                    let row_j: Vec<Var> = (0..j).map(|k| l[j * (j + 1) / 2 + k]).collect();
                    let s = tape.dot(&row_i, &row_j);
                    acc = tape.sub(acc, s);
                }
                let entry = if i == j {
                    tape.sqrt(acc)
                } else {
                    tape.div(acc, l[j * (j + 1) / 2 + j])
                };
                l.push(entry);
            }
        }
        Ok((l, extra))
    }

    /// Solve L y = b for packed lower-triangular `l`.
    pub fn solve_lower(tape: &mut Tape, l: &[Var], b: &[Var]) -> Vec<Var> {
        let n = b.len();
        let mut y: Vec<Var> = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = b[i];
            if i > 0 {
                let row: Vec<Var> = (0..i).map(|k| l[i * (i + 1) / 2 + k]).collect();
                let s = tape.dot(&row, &y[0..i].to_vec());
                acc = tape.sub(acc, s);
            }
            y.push(tape.div(acc, l[i * (i + 1) / 2 + i]));
        }
        y
    }

    /// Solve L^T x = b for packed lower-triangular `l`.
    pub fn solve_lower_transpose(tape: &mut Tape, l: &[Var], b: &[Var]) -> Vec<Var> {
        let n = b.len();
        let mut x: Vec<Var> = vec![Var::default(); n];
        for i in (0..n).rev() {
            let mut acc = b[i];
            if i + 1 < n {
                let col: Vec<Var> = (i + 1..n).map(|k| l[k * (k + 1) / 2 + i]).collect();
                let xs: Vec<Var> = (i + 1..n).map(|k| x[k]).collect();
                let s = tape.dot(&col, &xs);
                acc = tape.sub(acc, s);
            }
            x[i] = tape.div(acc, l[i * (i + 1) / 2 + i]);
        }
        x
    }
}
