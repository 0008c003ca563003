//! Variational inference: the double-flow posterior, Monte-Carlo ELBO with
//! its component breakdown, exact gradients of the realized estimate, and the
//! training loop.
//!
//! The posterior over inducing outputs is a planar-flow pushforward of a
//! learned diagonal Gaussian: U = flow(m + s * V), V ~ N(0, I). With zero
//! flow depth this is exactly the mean-field Gaussian baseline. The initial
//! state (or, under multiple shooting, every segment's initial state) has its
//! own diagonal Gaussian factor.
//!
//! The ELBO is estimated per step as
//!   total = recon - kl_u - kl_x0 - kl_shooting
//! where recon averages the masked Gaussian log-likelihood of the integrated
//! trajectories, kl_u is the Monte-Carlo KL of the flow posterior against the
//! GP prior on U (same draws as the reconstruction), kl_x0 is the analytic
//! KL of the first initial-state factor against N(0, I), and kl_shooting
//! collects the remaining segment entropies and boundary continuity
//! potentials (zero without shooting, possibly negative; the name is
//! bookkeeping). Gradients are reverse-mode through the entire estimate:
//! kernel solves, both flow stacks, the pathwise conditional, and the
//! unrolled integrator. All Gaussian draws are reparameterized.

use crate::autodiff::{Tape, Var};
use crate::data::ObservationSet;
use crate::dynamics::{rk4_integrate, ShootingPlan, TimeGrid, Trajectory};
use crate::error::{Error, Result};
use crate::flows::{stack_forward, FlowStack};
use crate::sparse_gp::{matheron_sample, prior_u_logpdf, InducingModel};
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Retries granted to a Monte-Carlo sample whose trajectory diverges before
/// the error is surfaced.
pub const MAX_SAMPLE_RETRIES: usize = 2;
/// Consecutive divergent optimization steps tolerated before training fails.
pub const MAX_DIVERGENT_STEPS: usize = 3;

// ======================= variational state =======================

/// All variational factors: the flow posterior over inducing outputs, the
/// initial-state factor, and optional multiple-shooting factors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariationalState {
    /// Inducing count M and state dimension d the factors are shaped for.
    pub m: usize,
    pub d: usize,
    /// Base mean over flattened inducing outputs, length M*d. The flat
    /// layout groups by GP output dimension: entry j*M + i is output j of
    /// inducing point i.
    pub u_mean: Array1<f64>,
    /// Log of the base diagonal scale, length M*d.
    pub u_log_scale: Array1<f64>,
    /// Planar stack applied on top of the affine base, dimension M*d.
    pub u_flow: FlowStack,
    /// Initial-state factor q(x(0)): mean and diagonal log variance.
    pub x0_mean: Array1<f64>,
    pub x0_log_var: Array1<f64>,
    /// Multiple-shooting segmentation with per-segment factors. When set,
    /// row 0 of the plan plays the initial-state role and the plain
    /// x0 factor above is inert (flattened but unused).
    pub shooting: Option<ShootingPlan>,
}

impl VariationalState {
    /// Mean-field initialization: zero base mean with scale 0.1, the given
    /// planar depth, and x(0) centered on `x0_guess` with variance 0.01.
    pub fn init(
        m: usize,
        d: usize,
        posterior_depth: usize,
        x0_guess: Option<ArrayView1<f64>>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let md = m * d;
        let x0_mean = match x0_guess {
            Some(g) => {
                if g.len() != d {
                    return Err(Error::dim("VariationalState::init", format!("{d}"), format!("{}", g.len())));
                }
                g.to_owned()
            }
            None => Array1::zeros(d),
        };
        Ok(VariationalState {
            m,
            d,
            u_mean: Array1::zeros(md),
            u_log_scale: Array1::from_elem(md, (0.1f64).ln()),
            u_flow: FlowStack::init(md, posterior_depth, rng)?,
            x0_mean,
            x0_log_var: Array1::from_elem(d, (0.01f64).ln()),
            shooting: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let md = self.m * self.d;
        if self.u_mean.len() != md
            || self.u_log_scale.len() != md
            || self.u_flow.dim() != md
            || self.x0_mean.len() != self.d
            || self.x0_log_var.len() != self.d
        {
            return Err(Error::dim(
                "VariationalState",
                format!("factors over M*d = {md}, state dimension {}", self.d),
                format!(
                    "u_mean {}, u_log_scale {}, flow dim {}, x0 {}/{}",
                    self.u_mean.len(),
                    self.u_log_scale.len(),
                    self.u_flow.dim(),
                    self.x0_mean.len(),
                    self.x0_log_var.len()
                ),
            ));
        }
        if let Some(plan) = &self.shooting {
            if plan.means.ncols() != self.d || plan.log_vars.shape() != plan.means.shape() {
                return Err(Error::dim(
                    "VariationalState",
                    format!("shooting factors over dimension {}", self.d),
                    format!("{:?}", plan.means.shape()),
                ));
            }
        }
        Ok(())
    }

    /// The factor that seeds integration at the first grid point: shooting
    /// row 0 when segmentation is active, the plain x(0) factor otherwise.
    pub fn initial_factor(&self) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
        match &self.shooting {
            Some(plan) => (plan.means.row(0), plan.log_vars.row(0)),
            None => (self.x0_mean.view(), self.x0_log_var.view()),
        }
    }
}

// ======================= full parameter set =======================

/// Everything the optimizer moves, as one structured value with a canonical
/// flat layout. The Fourier basis, jitter policy, shooting boundaries, and
/// continuity variance are deliberately not parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParameters {
    pub model: InducingModel,
    /// Warp applied to the GP vector field, dimension d.
    pub prior_flow: FlowStack,
    pub variational: VariationalState,
}

impl ModelParameters {
    pub fn new(model: InducingModel, prior_flow: FlowStack, variational: VariationalState) -> Result<Self> {
        if prior_flow.dim() != model.d() || variational.m != model.m() || variational.d != model.d() {
            return Err(Error::dim(
                "ModelParameters",
                format!("flow and factors over M = {}, d = {}", model.m(), model.d()),
                format!(
                    "prior flow dim {}, variational {}x{}",
                    prior_flow.dim(),
                    variational.m,
                    variational.d
                ),
            ));
        }
        variational.validate()?;
        Ok(ModelParameters { model, prior_flow, variational })
    }

    pub fn n_params(&self) -> usize {
        self.flatten().len()
    }

    /// Canonical flat layout. Must mirror the input registration order of
    /// the ELBO graph exactly:
    /// kernel log lengthscales, kernel log signal variance, Z (row-major),
    /// log noise, prior flow layers (u, w, b each), posterior base mean,
    /// posterior base log scale, posterior flow layers, x0 mean, x0 log
    /// variance, shooting means (row-major), shooting log variances.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.model.kernel.log_lengthscales().iter());
        out.push(self.model.kernel.log_signal_variance());
        out.extend(self.model.z.iter());
        out.extend(self.model.log_noise().iter());
        for layer in self.prior_flow.layers() {
            out.extend(layer.u.iter());
            out.extend(layer.w.iter());
            out.push(layer.b);
        }
        out.extend(self.variational.u_mean.iter());
        out.extend(self.variational.u_log_scale.iter());
        for layer in self.variational.u_flow.layers() {
            out.extend(layer.u.iter());
            out.extend(layer.w.iter());
            out.push(layer.b);
        }
        out.extend(self.variational.x0_mean.iter());
        out.extend(self.variational.x0_log_var.iter());
        if let Some(plan) = &self.variational.shooting {
            out.extend(plan.means.iter());
            out.extend(plan.log_vars.iter());
        }
        out
    }

    /// Write a flat vector (in [`flatten`](Self::flatten) layout) back into
    /// the structured parameters.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.n_params();
        if flat.len() != expected {
            return Err(Error::dim("set_flat", format!("{expected}"), format!("{}", flat.len())));
        }
        let mut pos = 0usize;
        let mut take = |n: usize| {
            let s = &flat[pos..pos + n];
            pos += n;
            s
        };
        let d = self.model.d();
        let log_l = take(d).to_vec();
        let log_s2 = take(1)[0];
        self.model.kernel.set_logs(&log_l, log_s2);
        let z_flat = take(self.model.m() * d);
        for (dst, &src) in self.model.z.iter_mut().zip(z_flat) {
            *dst = src;
        }
        let log_noise = take(d).to_vec();
        self.model.set_log_noise(&log_noise);
        let fill = |dst: &mut Array1<f64>, src: &[f64]| {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s;
            }
        };
        for layer in self.prior_flow.layers_mut() {
            let dim = layer.u.len();
            fill(&mut layer.u, take(dim));
            fill(&mut layer.w, take(dim));
            layer.b = take(1)[0];
        }
        let md = self.variational.m * self.variational.d;
        for (dst, &src) in self.variational.u_mean.iter_mut().zip(take(md)) {
            *dst = src;
        }
        for (dst, &src) in self.variational.u_log_scale.iter_mut().zip(take(md)) {
            *dst = src;
        }
        for layer in self.variational.u_flow.layers_mut() {
            let dim = layer.u.len();
            fill(&mut layer.u, take(dim));
            fill(&mut layer.w, take(dim));
            layer.b = take(1)[0];
        }
        for (dst, &src) in self.variational.x0_mean.iter_mut().zip(take(d)) {
            *dst = src;
        }
        for (dst, &src) in self.variational.x0_log_var.iter_mut().zip(take(d)) {
            *dst = src;
        }
        if let Some(plan) = &mut self.variational.shooting {
            let sd = plan.means.len();
            for (dst, &src) in plan.means.iter_mut().zip(take(sd)) {
                *dst = src;
            }
            for (dst, &src) in plan.log_vars.iter_mut().zip(take(sd)) {
                *dst = src;
            }
        }
        debug_assert_eq!(pos, expected);
        Ok(())
    }
}

// ======================= estimates =======================

/// One Monte-Carlo ELBO evaluation with its component breakdown.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub total: f64,
    pub recon: f64,
    pub kl_u: f64,
    pub kl_x0: f64,
    pub kl_shooting: f64,
    pub n_mc_samples: usize,
}

impl ElboEstimate {
    fn assemble(recon: f64, kl_u: f64, kl_x0: f64, kl_shooting: f64, n_mc_samples: usize) -> Self {
        ElboEstimate {
            total: recon - kl_u - kl_x0 - kl_shooting,
            recon,
            kl_u,
            kl_x0,
            kl_shooting,
            n_mc_samples,
        }
    }
}

// ======================= value-level operations =======================

/// KL(N(mean, diag(exp(log_var))) || N(0, I)), summed over dimensions.
pub fn gaussian_kl_to_std_normal(mean: ArrayView1<f64>, log_var: ArrayView1<f64>) -> f64 {
    mean.iter()
        .zip(log_var.iter())
        .map(|(&mu, &lv)| 0.5 * (lv.exp() + mu * mu - 1.0 - lv))
        .sum()
}

/// Analytic KL of the active initial-state factor against N(0, I).
pub fn kl_x0(vs: &VariationalState) -> f64 {
    let (mean, log_var) = vs.initial_factor();
    gaussian_kl_to_std_normal(mean, log_var)
}

fn ln_standard_normal(v: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    -0.5 * v.len() as f64 * ln_2pi - 0.5 * v.iter().map(|x| x * x).sum::<f64>()
}

/// Draw U from the flow posterior with its exact log density:
/// U = flow(m + s * V), log q(U) = log pi(V) - sum log s - log|det flow'|.
/// Returns U as an M x d matrix (the flat vector is grouped by output
/// dimension) and log q.
pub fn sample_posterior_u(vs: &VariationalState, rng: &mut impl Rng) -> Result<(Array2<f64>, f64)> {
    vs.validate()?;
    let (m, d) = (vs.m, vs.d);
    let md = m * d;
    let v: Vec<f64> = (0..md).map(|_| rng.sample(StandardNormal)).collect();
    let base = Array1::from_iter(
        (0..md).map(|k| vs.u_mean[k] + vs.u_log_scale[k].exp() * v[k]),
    );
    let eval = stack_forward(&vs.u_flow, base.view())?;
    let log_q = ln_standard_normal(&v) - vs.u_log_scale.sum() - eval.log_det;
    let mut u = Array2::zeros((m, d));
    for j in 0..d {
        for i in 0..m {
            u[[i, j]] = eval.y[j * m + i];
        }
    }
    Ok((u, log_q))
}

/// Unbiased Monte-Carlo estimate of KL(q(U) || p(U)) with its standard
/// error: mean over fresh draws of log q(U) - log p(U).
pub fn kl_u_mc(
    vs: &VariationalState,
    model: &InducingModel,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("kl_u_mc needs at least one sample".into()));
    }
    let mut diffs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (u, log_q) = sample_posterior_u(vs, rng)?;
        let log_p = prior_u_logpdf(model, u.view())?;
        diffs.push(log_q - log_p);
    }
    let n = n_samples as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let std_error = if n_samples > 1 {
        let var = diffs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok((mean, std_error))
}

/// Average over an ensemble of the masked diagonal-Gaussian log-likelihood
/// of the observations. Prediction times must equal the observation times.
pub fn reconstruction_term(
    predictions: &[Trajectory],
    obs: &ObservationSet,
    noise_variances: ArrayView1<f64>,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyData("reconstruction over an empty ensemble".into()));
    }
    let d = obs.d();
    if noise_variances.len() != d || noise_variances.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "need {d} positive noise variances, got {noise_variances:?}"
        )));
    }
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for pred in predictions {
        if pred.grid.times() != obs.grid.times() || pred.states.ncols() != d {
            return Err(Error::dim(
                "reconstruction_term",
                format!("{} prediction rows over dimension {d} at the observation times", obs.n()),
                format!("{:?}", pred.states.shape()),
            ));
        }
        for i in 0..obs.n() {
            for j in 0..d {
                if !obs.mask[[i, j]] {
                    continue;
                }
                let r = noise_variances[j];
                let diff = obs.observations[[i, j]] - pred.states[[i, j]];
                total += -0.5 * (ln_2pi + r.ln()) - 0.5 * diff * diff / r;
            }
        }
    }
    Ok(total / predictions.len() as f64)
}

/// Posterior predictive draws over a grid.
#[derive(Clone, Debug)]
pub struct PredictiveEnsemble {
    pub trajectories: Vec<Trajectory>,
    /// Samples dropped because their trajectory diverged.
    pub n_divergent: usize,
}

impl PredictiveEnsemble {
    /// Pointwise ensemble mean, if any trajectory survived.
    pub fn mean(&self) -> Option<Array2<f64>> {
        let first = self.trajectories.first()?;
        let mut acc = Array2::zeros(first.states.raw_dim());
        for t in &self.trajectories {
            acc = acc + &t.states;
        }
        Some(acc / self.trajectories.len() as f64)
    }
}

/// Draw `n_mc` independent (U, path, x(0)) samples and integrate each over
/// the grid. Divergent samples are dropped and counted, not resampled.
pub fn predict(
    params: &ModelParameters,
    grid: &TimeGrid,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<PredictiveEnsemble> {
    let vs = &params.variational;
    let d = vs.d;
    let mut trajectories = Vec::with_capacity(n_mc);
    let mut n_divergent = 0usize;
    for _ in 0..n_mc {
        let (u, _) = sample_posterior_u(vs, rng)?;
        let sample = matheron_sample(&params.model, u.view(), rng)?;
        let (mean, log_var) = vs.initial_factor();
        let x0 = Array1::from_iter((0..d).map(|j| {
            let eps: f64 = rng.sample(StandardNormal);
            mean[j] + (0.5 * log_var[j]).exp() * eps
        }));
        let result = rk4_integrate(
            |x| crate::dynamics::vector_field_eval(&sample, &params.model, &params.prior_flow, x),
            x0.view(),
            grid,
        );
        match result {
            Ok(traj) => trajectories.push(traj),
            Err(Error::Divergence { .. }) => n_divergent += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(PredictiveEnsemble { trajectories, n_divergent })
}

// ======================= the recorded ELBO graph =======================

/// Switches for building the ELBO graph.
#[derive(Clone, Copy, Debug, Default)]
pub struct GraphOptions {
    /// Skip the flow application code entirely instead of running depth-zero
    /// stacks through it. Requires both stacks to be depth zero; exists so
    /// the flowless baseline can be checked bit-for-bit against the full
    /// code path.
    pub bypass_flows: bool,
}

mod graph {
    use super::*;
    use crate::dynamics::taped as dyn_taped;
    use crate::flows::taped as flow_taped;
    use crate::sparse_gp::taped as gp_taped;

    pub struct ElboGraph {
        pub total: Var,
        pub recon: Var,
        pub kl_u: Var,
        pub kl_x0: Var,
        pub kl_shooting: Var,
        /// Parameter input nodes in the canonical flat layout.
        pub inputs: Vec<Var>,
        pub n_mc: usize,
    }

    /// Shared nodes every Monte-Carlo sample reuses.
    struct SampleCtx<'a> {
        g: &'a gp_taped::GpGraph,
        prior_sv: &'a flow_taped::StackVars,
        post_sv: &'a flow_taped::StackVars,
        u_mean: &'a [Var],
        u_scales: &'a [Var],
        sum_u_log_scale: Var,
        /// exp(-log R_j) per output dimension.
        inv_noise: &'a [Var],
        /// -0.5 log R_j per output dimension.
        half_neg_log_noise: &'a [Var],
        /// Initial-state factors: one (mean, scale) row without shooting,
        /// S rows with it. Scales are exp(0.5 log_var) nodes.
        init_means: &'a [Vec<Var>],
        init_scales: &'a [Vec<Var>],
        plan: Option<&'a ShootingPlan>,
        model: &'a InducingModel,
        obs: &'a ObservationSet,
        bypass: bool,
        md: usize,
        d: usize,
    }

    /// Record the full Monte-Carlo ELBO estimate. Draw order per sample:
    /// posterior V (M*d), Fourier weights (B*d), then the initial-state
    /// draws (d per active factor, row-major under shooting); a divergent
    /// sample is truncated from the tape and fully redrawn, at most
    /// [`MAX_SAMPLE_RETRIES`] times.
    pub fn build(
        tape: &mut Tape,
        params: &ModelParameters,
        data: &ObservationSet,
        n_mc: usize,
        rng: &mut impl Rng,
        opts: &GraphOptions,
    ) -> Result<ElboGraph> {
        let model = &params.model;
        let vs = &params.variational;
        let (m, d) = (model.m(), model.d());
        let md = m * d;
        if data.d() != d {
            return Err(Error::dim("elbo", format!("observations over dimension {d}"), format!("{}", data.d())));
        }
        if n_mc == 0 {
            return Err(Error::InvalidParameter("elbo needs at least one Monte-Carlo sample".into()));
        }
        vs.validate()?;
        if opts.bypass_flows && (params.prior_flow.depth() > 0 || vs.u_flow.depth() > 0) {
            return Err(Error::InvalidParameter(
                "flow bypass requires both stacks at depth zero".into(),
            ));
        }
        if let Some(plan) = &vs.shooting {
            if *plan.boundaries.last().unwrap() != data.grid.len() - 1 {
                return Err(Error::InvalidParameter(
                    "shooting plan does not cover the observation grid".into(),
                ));
            }
        }

        // Parameter inputs, in the canonical flat order.
        let g = gp_taped::gp_graph(tape, model)?;
        let log_noise: Vec<Var> = model.log_noise().iter().map(|&v| tape.input(v)).collect();
        let prior_sv = flow_taped::stack_vars(tape, &params.prior_flow)?;
        let u_mean: Vec<Var> = vs.u_mean.iter().map(|&v| tape.input(v)).collect();
        let u_log_scale: Vec<Var> = vs.u_log_scale.iter().map(|&v| tape.input(v)).collect();
        let post_sv = flow_taped::stack_vars(tape, &vs.u_flow)?;
        let x0_mean: Vec<Var> = vs.x0_mean.iter().map(|&v| tape.input(v)).collect();
        let x0_log_var: Vec<Var> = vs.x0_log_var.iter().map(|&v| tape.input(v)).collect();
        let shooting_inputs: Option<(Vec<Var>, Vec<Var>)> = vs.shooting.as_ref().map(|plan| {
            let means = plan.means.iter().map(|&v| tape.input(v)).collect();
            let log_vars = plan.log_vars.iter().map(|&v| tape.input(v)).collect();
            (means, log_vars)
        });

        let mut inputs = Vec::new();
        inputs.extend_from_slice(&g.kv.log_l);
        inputs.push(g.kv.log_s2);
        inputs.extend_from_slice(&g.z);
        inputs.extend_from_slice(&log_noise);
        for layer in &prior_sv.layers {
            inputs.extend_from_slice(&layer.u_raw);
            inputs.extend_from_slice(&layer.w);
            inputs.push(layer.b);
        }
        inputs.extend_from_slice(&u_mean);
        inputs.extend_from_slice(&u_log_scale);
        for layer in &post_sv.layers {
            inputs.extend_from_slice(&layer.u_raw);
            inputs.extend_from_slice(&layer.w);
            inputs.push(layer.b);
        }
        inputs.extend_from_slice(&x0_mean);
        inputs.extend_from_slice(&x0_log_var);
        if let Some((means, log_vars)) = &shooting_inputs {
            inputs.extend_from_slice(means);
            inputs.extend_from_slice(log_vars);
        }

        // Hoisted derived nodes shared across samples.
        let u_scales: Vec<Var> = u_log_scale.iter().map(|&v| tape.exp(v)).collect();
        let sum_u_log_scale = tape.sum(&u_log_scale);
        let inv_noise: Vec<Var> = log_noise
            .iter()
            .map(|&v| {
                let n = tape.neg(v);
                tape.exp(n)
            })
            .collect();
        let half_neg_log_noise: Vec<Var> = log_noise.iter().map(|&v| tape.mul_const(v, -0.5)).collect();

        // Initial-state factor rows: the shooting plan's rows, or the plain
        // x0 factor. Scales are exp(0.5 log_var).
        let half_var_scale = |tape: &mut Tape, lv: Var| {
            let half = tape.mul_const(lv, 0.5);
            tape.exp(half)
        };
        let (init_means, init_log_vars): (Vec<Vec<Var>>, Vec<Vec<Var>>) = match &shooting_inputs {
            Some((means, log_vars)) => {
                let s = vs.shooting.as_ref().unwrap().n_segments();
                (
                    (0..s).map(|j| means[j * d..(j + 1) * d].to_vec()).collect(),
                    (0..s).map(|j| log_vars[j * d..(j + 1) * d].to_vec()).collect(),
                )
            }
            None => (vec![x0_mean.clone()], vec![x0_log_var.clone()]),
        };
        let init_scales: Vec<Vec<Var>> = init_log_vars
            .iter()
            .map(|row| row.iter().map(|&lv| half_var_scale(tape, lv)).collect())
            .collect();

        // Analytic terms: KL of the first factor against N(0, I), and the
        // entropies of the remaining shooting factors.
        let kl_x0 = gaussian_kl_node(tape, &init_means[0], &init_log_vars[0]);
        let entropy_tail: Option<Var> = if init_log_vars.len() > 1 {
            let tail: Vec<Var> = init_log_vars[1..].iter().flatten().copied().collect();
            let s = tape.sum(&tail);
            let half = tape.mul_const(s, 0.5);
            let ln_2pi_e = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
            Some(tape.add_const(half, 0.5 * ln_2pi_e * tail.len() as f64))
        } else {
            None
        };

        let ctx = SampleCtx {
            g: &g,
            prior_sv: &prior_sv,
            post_sv: &post_sv,
            u_mean: &u_mean,
            u_scales: &u_scales,
            sum_u_log_scale,
            inv_noise: &inv_noise,
            half_neg_log_noise: &half_neg_log_noise,
            init_means: &init_means,
            init_scales: &init_scales,
            plan: vs.shooting.as_ref(),
            model,
            obs: data,
            bypass: opts.bypass_flows,
            md,
            d,
        };

        let mut recon_terms = Vec::with_capacity(n_mc);
        let mut klu_terms = Vec::with_capacity(n_mc);
        let mut cont_terms = Vec::with_capacity(n_mc);
        for _ in 0..n_mc {
            let mark = tape.mark();
            let mut attempts = 0usize;
            let (recon_s, klu_s, cont_s) = loop {
                match record_sample(tape, &ctx, rng) {
                    Ok(triple) => break triple,
                    Err(e @ Error::Divergence { .. }) => {
                        if attempts >= MAX_SAMPLE_RETRIES {
                            return Err(e);
                        }
                        attempts += 1;
                        tape.truncate(mark);
                    }
                    Err(e) => return Err(e),
                }
            };
            recon_terms.push(recon_s);
            klu_terms.push(klu_s);
            if let Some(c) = cont_s {
                cont_terms.push(c);
            }
        }

        let inv_n = 1.0 / n_mc as f64;
        let recon_sum = tape.sum(&recon_terms);
        let recon = tape.mul_const(recon_sum, inv_n);
        let klu_sum = tape.sum(&klu_terms);
        let kl_u = tape.mul_const(klu_sum, inv_n);
        let kl_shooting = match entropy_tail {
            Some(h) => {
                let neg_h = tape.neg(h);
                let cont_sum = tape.sum(&cont_terms);
                let cont_mean = tape.mul_const(cont_sum, inv_n);
                tape.sub(neg_h, cont_mean)
            }
            None => tape.constant(0.0),
        };
        let t1 = tape.sub(recon, kl_u);
        let t2 = tape.sub(t1, kl_x0);
        let total = tape.sub(t2, kl_shooting);
        Ok(ElboGraph {
            total,
            recon,
            kl_u,
            kl_x0,
            kl_shooting,
            inputs,
            n_mc,
        })
    }

    /// sum_j 0.5 (exp(lv_j) + mu_j^2 - 1 - lv_j).
    pub(super) fn gaussian_kl_node(tape: &mut Tape, mean: &[Var], log_var: &[Var]) -> Var {
        let mut terms = Vec::with_capacity(mean.len());
        for (&mu, &lv) in mean.iter().zip(log_var) {
            let e = tape.exp(lv);
            let m2 = tape.mul(mu, mu);
            let a = tape.add(e, m2);
            let b = tape.sub(a, lv);
            terms.push(tape.add_const(b, -1.0));
        }
        let s = tape.sum(&terms);
        tape.mul_const(s, 0.5)
    }

    /// One reparameterized draw per active factor row.
    fn draw_inits(tape: &mut Tape, ctx: &SampleCtx, rng: &mut impl Rng) -> Vec<Vec<Var>> {
        ctx.init_means
            .iter()
            .zip(ctx.init_scales)
            .map(|(means, scales)| {
                means
                    .iter()
                    .zip(scales)
                    .map(|(&mu, &sc)| {
                        let eps: f64 = rng.sample(StandardNormal);
                        let c = tape.constant(eps);
                        let p = tape.mul(sc, c);
                        tape.add(mu, p)
                    })
                    .collect()
            })
            .collect()
    }

    /// Masked Gaussian log-likelihood of the observations against prediction
    /// rows (one Vec<Var> of length d per grid point).
    fn score_rows(tape: &mut Tape, ctx: &SampleCtx, rows: &[Vec<Var>]) -> Var {
        let obs = ctx.obs;
        let mut terms = Vec::new();
        let mut n_entries = 0usize;
        for i in 0..obs.n() {
            for j in 0..ctx.d {
                if !obs.mask[[i, j]] {
                    continue;
                }
                let diff = tape.add_const(rows[i][j], -obs.observations[[i, j]]);
                let sq = tape.mul(diff, diff);
                let scaled = tape.mul(sq, ctx.inv_noise[j]);
                terms.push(tape.mul_const(scaled, -0.5));
                terms.push(ctx.half_neg_log_noise[j]);
                n_entries += 1;
            }
        }
        let s = tape.sum(&terms);
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        tape.add_const(s, -0.5 * ln_2pi * n_entries as f64)
    }

    /// Record one Monte-Carlo sample: posterior draw, pathwise conditional,
    /// integration, reconstruction, and (under shooting) continuity terms.
    fn record_sample(
        tape: &mut Tape,
        ctx: &SampleCtx,
        rng: &mut impl Rng,
    ) -> Result<(Var, Var, Option<Var>)> {
        let (md, d) = (ctx.md, ctx.d);
        let m = md / d;

        // Posterior draw U = flow(mean + scale * V).
        let v: Vec<f64> = (0..md).map(|_| rng.sample(StandardNormal)).collect();
        let base: Vec<Var> = (0..md)
            .map(|k| {
                let c = tape.constant(v[k]);
                let p = tape.mul(ctx.u_scales[k], c);
                tape.add(ctx.u_mean[k], p)
            })
            .collect();
        let (u_flat, log_det) = if ctx.bypass {
            (base, None)
        } else {
            flow_taped::stack_forward(tape, ctx.post_sv, &base)
        };
        let log_det_total = match log_det {
            Some(ld) => tape.add(ctx.sum_u_log_scale, ld),
            None => ctx.sum_u_log_scale,
        };
        let neg_ld = tape.neg(log_det_total);
        let log_q = tape.add_const(neg_ld, ln_standard_normal(&v));

        // Flat posterior output is grouped by GP output dimension; the GP
        // side wants row-major M x d.
        let mut u_rm = vec![Var::default(); md];
        for j in 0..d {
            for i in 0..m {
                u_rm[i * d + j] = u_flat[j * m + i];
            }
        }
        let log_p = gp_taped::prior_u_logpdf(tape, ctx.g, &u_rm);
        let klu = tape.sub(log_q, log_p);

        // Pathwise conditional with fresh Fourier weights.
        let b = ctx.model.basis.n_features();
        let weights = Array2::from_shape_fn((b, d), |_| rng.sample(StandardNormal));
        let pv = gp_taped::path_vars(tape, ctx.model, ctx.g, &u_rm, weights);
        let mut field = |t: &mut Tape, x: &[Var]| {
            let f = gp_taped::path_eval(t, ctx.g, &pv, x);
            if ctx.bypass {
                f
            } else {
                flow_taped::stack_forward_y(t, ctx.prior_sv, &f)
            }
        };

        let inits = draw_inits(tape, ctx, rng);
        match ctx.plan {
            None => {
                let states = dyn_taped::integrate(tape, &mut field, &inits[0], &ctx.obs.grid, None)?;
                let recon = score_rows(tape, ctx, &states);
                Ok((recon, klu, None))
            }
            Some(plan) => {
                let s = plan.n_segments();
                let mut rows: Vec<Vec<Var>> = vec![Vec::new(); ctx.obs.n()];
                let mut endpoints: Vec<Vec<Var>> = Vec::with_capacity(s);
                for j in 0..s {
                    let (start, end) = plan.segment_bounds(j);
                    let sub = ctx.obs.grid.slice(start, end)?;
                    let states = dyn_taped::integrate(tape, &mut field, &inits[j], &sub, Some(j))?;
                    if j == 0 {
                        rows[0] = states[0].clone();
                    }
                    for (local, state) in states.iter().enumerate().skip(1) {
                        rows[start + local] = state.clone();
                    }
                    endpoints.push(states.last().unwrap().clone());
                }
                let recon = score_rows(tape, ctx, &rows);
                // Boundary continuity: ln N(s_{j+1}; end_j, sigma_c^2 I).
                let mut cont_parts = Vec::with_capacity((s - 1) * d);
                let coeff = -0.5 / plan.continuity_variance;
                for j in 0..s - 1 {
                    for k in 0..d {
                        let diff = tape.sub(inits[j + 1][k], endpoints[j][k]);
                        let sq = tape.mul(diff, diff);
                        cont_parts.push(tape.mul_const(sq, coeff));
                    }
                }
                let cont = if cont_parts.is_empty() {
                    tape.constant(0.0)
                } else {
                    let sum = tape.sum(&cont_parts);
                    let ln_norm =
                        -0.5 * (2.0 * std::f64::consts::PI * plan.continuity_variance).ln();
                    tape.add_const(sum, ln_norm * ((s - 1) * d) as f64)
                };
                Ok((recon, klu, Some(cont)))
            }
        }
    }
}

// ======================= ELBO and gradients =======================

/// Monte-Carlo ELBO estimate. Deterministic given the RNG state; the same
/// draws feed the reconstruction and the KL estimate.
pub fn elbo(
    params: &ModelParameters,
    data: &ObservationSet,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<ElboEstimate> {
    elbo_with_options(params, data, n_mc, rng, &GraphOptions::default())
}

pub fn elbo_with_options(
    params: &ModelParameters,
    data: &ObservationSet,
    n_mc: usize,
    rng: &mut impl Rng,
    opts: &GraphOptions,
) -> Result<ElboEstimate> {
    let mut tape = Tape::new();
    let g = graph::build(&mut tape, params, data, n_mc, rng, opts)?;
    Ok(ElboEstimate::assemble(
        tape.value(g.recon),
        tape.value(g.kl_u),
        tape.value(g.kl_x0),
        tape.value(g.kl_shooting),
        g.n_mc,
    ))
}

/// Exact reverse-mode gradient of the realized ELBO estimate, in the flat
/// parameter layout, together with the estimate itself.
pub fn grad_elbo(
    params: &ModelParameters,
    data: &ObservationSet,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, ElboEstimate)> {
    grad_elbo_with_options(params, data, n_mc, rng, &GraphOptions::default())
}

pub fn grad_elbo_with_options(
    params: &ModelParameters,
    data: &ObservationSet,
    n_mc: usize,
    rng: &mut impl Rng,
    opts: &GraphOptions,
) -> Result<(Vec<f64>, ElboEstimate)> {
    let mut tape = Tape::new();
    let g = graph::build(&mut tape, params, data, n_mc, rng, opts)?;
    let estimate = ElboEstimate::assemble(
        tape.value(g.recon),
        tape.value(g.kl_u),
        tape.value(g.kl_x0),
        tape.value(g.kl_shooting),
        g.n_mc,
    );
    tape.backward(g.total);
    let grad = g.inputs.iter().map(|&v| tape.grad(v)).collect();
    Ok((grad, estimate))
}

// ======================= training =======================

/// Early-stopping policy: evaluate the ELBO on a validation set every
/// `eval_every` steps and stop after `patience` evaluations without
/// improvement, restoring the best parameters seen.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub eval_every: usize,
    pub patience: usize,
    pub n_mc: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Base step size; decayed by 0.3 at 60% and again at 85% of the run.
    pub step_size: f64,
    /// Monte-Carlo samples per gradient step.
    pub n_mc: usize,
    pub seed: u64,
    /// Global gradient-norm clip applied before the moment updates.
    pub clip_norm: f64,
    /// Record real elapsed seconds in the history. Off by default so that
    /// same-seed runs produce byte-identical artifacts; the wall_time column
    /// then holds 0.000.
    pub record_walltime: bool,
    pub early_stop: Option<EarlyStopConfig>,
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            step_size: 1e-2,
            n_mc: 5,
            seed,
            clip_norm: 10.0,
            record_walltime: false,
            early_stop: None,
        }
    }
}

/// One completed optimization step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub estimate: ElboEstimate,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Elapsed seconds since training started, or 0 when timing is off.
    pub wall_time: f64,
}

fn learning_rate(config: &TrainConfig, step: usize) -> f64 {
    let frac = step as f64 / config.steps.max(1) as f64;
    let mut lr = config.step_size;
    if frac >= 0.6 {
        lr *= 0.3;
    }
    if frac >= 0.85 {
        lr *= 0.3;
    }
    lr
}

/// Stochastic ascent on the ELBO with adaptive per-parameter steps
/// (decaying-moment scheme, beta 0.9/0.999) and global-norm clipping.
/// Every step draws from its own RNG stream of `config.seed`, so runs are
/// reproducible and steps are independent. A step whose estimate diverges
/// (after per-sample retries) skips the update; [`MAX_DIVERGENT_STEPS`]
/// consecutive such steps abort training. History records completed steps.
pub fn train(
    params: &ModelParameters,
    data: &ObservationSet,
    validation: Option<&ObservationSet>,
    config: &TrainConfig,
) -> Result<(ModelParameters, Vec<TrainRecord>)> {
    if config.step_size <= 0.0 || config.n_mc == 0 || config.clip_norm <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "invalid training configuration: step_size {}, n_mc {}, clip_norm {}",
            config.step_size, config.n_mc, config.clip_norm
        )));
    }
    if config.early_stop.is_some() && validation.is_none() {
        return Err(Error::InvalidParameter(
            "early stopping requires a validation set".into(),
        ));
    }
    let mut current = params.clone();
    let mut theta = current.flatten();
    let n = theta.len();
    let (mut mom1, mut mom2) = (vec![0.0f64; n], vec![0.0f64; n]);
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut history = Vec::with_capacity(config.steps);
    let start = Instant::now();
    let mut consecutive_divergent = 0usize;
    let mut adam_t = 0usize;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut evals_since_best = 0usize;

    for step in 0..config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step as u64 + 1);
        let (mut grad, estimate) = match grad_elbo(&current, data, config.n_mc, &mut rng) {
            Ok(pair) => pair,
            Err(e @ Error::Divergence { .. }) => {
                consecutive_divergent += 1;
                if consecutive_divergent >= MAX_DIVERGENT_STEPS {
                    return Err(Error::TrainingFailure {
                        step,
                        details: format!(
                            "{MAX_DIVERGENT_STEPS} consecutive divergent steps; last failure: {e}"
                        ),
                    });
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        consecutive_divergent = 0;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                details: format!("non-finite gradient norm {grad_norm}"),
            });
        }
        if grad_norm > config.clip_norm {
            let scale = config.clip_norm / grad_norm;
            for g in &mut grad {
                *g *= scale;
            }
        }
        adam_t += 1;
        let lr = learning_rate(config, step);
        let (c1, c2) = (1.0 - beta1.powi(adam_t as i32), 1.0 - beta2.powi(adam_t as i32));
        for i in 0..n {
            mom1[i] = beta1 * mom1[i] + (1.0 - beta1) * grad[i];
            mom2[i] = beta2 * mom2[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = mom1[i] / c1;
            let v_hat = mom2[i] / c2;
            theta[i] += lr * m_hat / (v_hat.sqrt() + eps);
        }
        current.set_flat(&theta)?;
        history.push(TrainRecord {
            step,
            estimate,
            grad_norm,
            wall_time: if config.record_walltime {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });

        if let (Some(es), Some(vdata)) = (&config.early_stop, validation) {
            if es.eval_every > 0 && (step + 1) % es.eval_every == 0 {
                let mut vrng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
                vrng.set_stream(step as u64 + 1);
                let vest = elbo(&current, vdata, es.n_mc, &mut vrng)?;
                if best.as_ref().map_or(true, |(b, _)| vest.total > *b) {
                    best = Some((vest.total, theta.clone()));
                    evals_since_best = 0;
                } else {
                    evals_since_best += 1;
                    if evals_since_best >= es.patience {
                        break;
                    }
                }
            }
        }
    }
    if let Some((_, best_theta)) = best {
        current.set_flat(&best_theta)?;
    }
    Ok((current, history))
}

/// Write a training history as CSV with a fixed numeric format, so that
/// same-seed runs (with timing off) produce byte-identical files.
pub fn write_history_csv(history: &[TrainRecord], path: impl AsRef<std::path::Path>) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("step,total,recon,kl_u,kl_x0,kl_shooting,grad_norm,wall_time\n");
    for r in history {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.3}",
            r.step,
            r.estimate.total,
            r.estimate.recon,
            r.estimate.kl_u,
            r.estimate.kl_x0,
            r.estimate.kl_shooting,
            r.grad_norm,
            r.wall_time
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}
