//! Named end-to-end reproduction protocols behind a registry.
//!
//! Each experiment simulates its dataset, trains a small family of flow-depth
//! variants across several seeds, evaluates the trained models, and returns an
//! [`ExperimentReport`] whose JSON rendering is byte-stable (fixed key order,
//! floats at 17 significant digits). Protocol constants live here; the knobs a
//! caller may scale down for smoke runs are collected in [`RunOptions`].

use std::collections::BTreeMap;

use crate::data::{
    mask_region, orthonormal_embedding, pca_fit, pca_invert, pca_project, simulate,
    DynamicalSystem, FitzHughNagumo, ObservationSet, PcaMap, VanDerPol, TRUTH_SUBSTEPS,
};
use crate::dynamics::{
    make_shooting_plan, rk4_integrate, TimeGrid, SUBSTEPS_LATENT, SUBSTEPS_SIMULATED,
};
use crate::error::{Error, Result};
use crate::flows::FlowStack;
use crate::inference::{predict, train, ModelParameters, TrainConfig, VariationalState};
use crate::kernels::{sample_fourier_basis, SeKernelParams};
use crate::metrics::{self, CoverageMode, MetricsReport, REPORT_SCHEMA_VERSION};
use crate::sparse_gp::InducingModel;
use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

/// Inducing points shared by every protocol.
const INDUCING: usize = 16;
/// Fourier features backing the weight-space prior draws.
const FOURIER_FEATURES: usize = 256;
/// Monte-Carlo samples per training step.
const TRAIN_N_MC: usize = 4;
/// Predictive ensemble size at evaluation time.
const EVAL_N_MC: usize = 50;
const COVERAGE_LEVEL: f64 = 0.95;
const STEP_SIZE: f64 = 1e-2;

/// RNG streams, disjoint from the per-step training streams (1..=steps):
/// stream 0 generates the dataset, these two initialize and evaluate.
const INIT_STREAM: u64 = u64::MAX - 1;
const EVAL_STREAM: u64 = u64::MAX;

// ======================= registry =======================

/// A named, self-contained protocol: simulate, train every variant over
/// every seed, evaluate, summarize.
pub trait Experiment {
    /// Registry key.
    fn name(&self) -> &'static str;
    /// One-line summary of what the protocol does.
    fn description(&self) -> &'static str;
    fn run(&self, opts: &RunOptions) -> Result<ExperimentReport>;
}

/// Names accepted by [`experiment_by_name`].
pub const KNOWN_EXPERIMENTS: &[&str] = &["vdp", "fhn", "latent-demo"];

pub fn experiment_by_name(name: &str) -> Result<Box<dyn Experiment>> {
    match name {
        "vdp" => Ok(Box::new(VdpForecast)),
        "fhn" => Ok(Box::new(FhnMaskedRegion)),
        "latent-demo" => Ok(Box::new(LatentEmbeddingDemo)),
        _ => Err(Error::UnknownName {
            kind: "experiment",
            name: name.to_string(),
            known: KNOWN_EXPERIMENTS.join(", "),
        }),
    }
}

/// Scaling knobs for a protocol run. The default reproduces the full
/// desk-scale protocol; tests shrink the expensive counts.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seeds: Vec<u64>,
    /// Override every variant's training step count.
    pub steps: Option<usize>,
    /// Override the Monte-Carlo sample count per training step.
    pub n_mc: Option<usize>,
    /// Override the predictive ensemble size used for evaluation.
    pub n_mc_eval: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { seeds: vec![1, 2, 3], steps: None, n_mc: None, n_mc_eval: None }
    }
}

// ======================= report =======================

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: MetricsReport,
}

/// One flow-depth configuration summarized across seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub prior_depth: usize,
    pub posterior_depth: usize,
    pub median_mse: f64,
    pub median_mnll: f64,
    pub median_coverage: f64,
    pub per_seed: Vec<SeedOutcome>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
}

impl ExperimentReport {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::InvalidParameter(format!(
                "experiment report schema {}, this build writes {EXPERIMENT_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.experiment.is_empty() || self.variants.is_empty() {
            return Err(Error::EmptyData("experiment report has no variants".into()));
        }
        for v in &self.variants {
            if v.per_seed.len() != self.seeds.len() {
                return Err(Error::dim(
                    "ExperimentReport",
                    format!("{} seed outcomes in {}", self.seeds.len(), v.variant),
                    format!("{}", v.per_seed.len()),
                ));
            }
            if ![v.median_mse, v.median_mnll, v.median_coverage].iter().all(|x| x.is_finite()) {
                return Err(Error::Numerics(format!("non-finite medians in {}", v.variant)));
            }
            for o in &v.per_seed {
                o.metrics.validate()?;
            }
        }
        Ok(())
    }

    /// Render as JSON with a fixed key order and 17 significant digits, so
    /// that identical reports serialize to identical bytes.
    pub fn to_json(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let variants: Vec<String> = self
            .variants
            .iter()
            .map(|v| {
                let per_seed: Vec<String> = v
                    .per_seed
                    .iter()
                    .map(|o| format!("{{\"seed\":{},\"metrics\":{}}}", o.seed, o.metrics.to_json()))
                    .collect();
                format!(
                    "{{\"variant\":\"{}\",\"prior_depth\":{},\"posterior_depth\":{},\
                     \"median_mse\":{:.16e},\"median_mnll\":{:.16e},\"median_coverage\":{:.16e},\
                     \"per_seed\":[{}]}}",
                    v.variant,
                    v.prior_depth,
                    v.posterior_depth,
                    v.median_mse,
                    v.median_mnll,
                    v.median_coverage,
                    per_seed.join(",")
                )
            })
            .collect();
        format!(
            "{{\"schema_version\":{},\"experiment\":\"{}\",\"seeds\":[{}],\"variants\":[{}]}}",
            self.schema_version,
            self.experiment,
            seeds.join(","),
            variants.join(",")
        )
    }
}

fn median(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn summarize(prior_depth: usize, posterior_depth: usize, per_seed: Vec<SeedOutcome>) -> VariantSummary {
    let collect = |f: fn(&MetricsReport) -> f64| -> Vec<f64> {
        per_seed.iter().map(|o| f(&o.metrics)).collect()
    };
    VariantSummary {
        variant: format!("prior{prior_depth}-post{posterior_depth}"),
        prior_depth,
        posterior_depth,
        median_mse: median(&collect(|m| m.mse)),
        median_mnll: median(&collect(|m| m.mnll)),
        median_coverage: median(&collect(|m| m.coverage)),
        per_seed,
    }
}

// ======================= shared plumbing =======================

/// Data-driven model shape shared by the protocols and the CLI front end.
#[derive(Clone, Debug)]
pub struct ModelSetup {
    pub inducing: usize,
    pub fourier_features: usize,
    pub prior_depth: usize,
    pub posterior_depth: usize,
    /// Starting observation-noise variance, applied to every dimension.
    pub noise_var: f64,
    pub shooting_segments: Option<usize>,
}

/// Everything that distinguishes one trained variant within a protocol.
struct TrainSpec {
    setup: ModelSetup,
    steps: usize,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Deterministic model initialization from the visible observations:
/// inducing inputs on evenly spaced visible rows, lengthscales from the
/// per-dimension spread, signal variance from finite-difference velocities.
fn init_model(
    train: &ObservationSet,
    setup: &ModelSetup,
    rng: &mut impl Rng,
) -> Result<InducingModel> {
    let d = train.d();
    let inducing = setup.inducing;
    if inducing < 2 {
        return Err(Error::InvalidParameter(format!(
            "initialization needs at least 2 inducing points, got {inducing}"
        )));
    }
    let visible: Vec<usize> = (0..train.n())
        .filter(|&i| train.mask.row(i).iter().any(|&m| m))
        .collect();
    if visible.len() < inducing {
        return Err(Error::InvalidParameter(format!(
            "{} visible rows cannot seed {inducing} inducing points",
            visible.len()
        )));
    }
    let mut z = Array2::zeros((inducing, d));
    for i in 0..inducing {
        let pick = visible[i * (visible.len() - 1) / (inducing - 1)];
        z.row_mut(i).assign(&train.observations.row(pick));
    }
    let mut lengthscales = vec![0.0f64; d];
    for (j, l) in lengthscales.iter_mut().enumerate() {
        let col: Vec<f64> = visible.iter().map(|&i| train.observations[[i, j]]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / col.len() as f64;
        *l = var.sqrt().max(0.3);
    }
    let times = train.grid.times();
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for pair in visible.windows(2) {
        let dt = times[pair[1]] - times[pair[0]];
        for j in 0..d {
            let v = (train.observations[[pair[1], j]] - train.observations[[pair[0], j]]) / dt;
            sq_sum += v * v;
            count += 1;
        }
    }
    let signal = if count == 0 { 1.0 } else { (sq_sum / count as f64).clamp(0.25, 25.0) };
    let kernel = SeKernelParams::new(&lengthscales, signal)?;
    let basis = sample_fourier_basis(&kernel, setup.fourier_features, d, rng)?;
    InducingModel::new(z, kernel, basis, &vec![setup.noise_var; d])
}

/// Build a ready-to-train parameter set from the data: heuristic kernel and
/// inducing-point placement, flows at the requested depths, the first
/// visible row as the initial-state guess, and an observation-seeded
/// shooting plan when segmentation is requested.
pub fn initialize_from_observations(
    train: &ObservationSet,
    setup: &ModelSetup,
    seed: u64,
) -> Result<ModelParameters> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let model = init_model(train, setup, &mut rng)?;
    let first_visible = (0..train.n())
        .find(|&i| train.mask.row(i).iter().any(|&m| m))
        .ok_or_else(|| Error::EmptyData("no visible observation rows".into()))?;
    let x0_guess = train.observations.row(first_visible).to_owned();
    let mut vs = VariationalState::init(
        model.m(),
        model.d(),
        setup.posterior_depth,
        Some(x0_guess.view()),
        &mut rng,
    )?;
    if let Some(segments) = setup.shooting_segments {
        let mut plan = make_shooting_plan(&train.grid, segments, model.d())?;
        plan.init_from_observations(
            train.grid.times(),
            train.observations.view(),
            train.mask.view(),
            &train.grid,
        )?;
        vs.shooting = Some(plan);
    }
    let prior_flow = FlowStack::init(model.d(), setup.prior_depth, &mut rng)?;
    ModelParameters::new(model, prior_flow, vs)
}

fn train_variant(
    train_set: &ObservationSet,
    spec: &TrainSpec,
    seed: u64,
    opts: &RunOptions,
) -> Result<ModelParameters> {
    let params = initialize_from_observations(train_set, &spec.setup, seed)?;
    let mut config = TrainConfig::new(opts.steps.unwrap_or(spec.steps), seed);
    config.step_size = STEP_SIZE;
    config.n_mc = opts.n_mc.unwrap_or(TRAIN_N_MC);
    let (trained, history) = train(&params, train_set, None, &config)?;
    if let Some(last) = history.last() {
        log::info!(
            "prior depth {} posterior depth {} seed {seed}: ELBO {:.3} after {} steps",
            spec.setup.prior_depth,
            spec.setup.posterior_depth,
            last.estimate.total,
            history.len()
        );
    }
    Ok(trained)
}

/// Score a trained model on the grid rows starting at `row_start`: MSE and
/// coverage against the noise-free truth, MNLL against the noisy targets,
/// with the learned noise variances in the predictive mixture.
#[allow(clippy::too_many_arguments)]
fn evaluate_rows(
    trained: &ModelParameters,
    grid: &TimeGrid,
    row_start: usize,
    truth: ArrayView2<f64>,
    noisy: ArrayView2<f64>,
    mask: &Array2<bool>,
    n_mc_eval: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    let ens = predict(trained, grid, n_mc_eval, &mut rng)?;
    if ens.trajectories.is_empty() {
        return Err(Error::Numerics("every predictive sample diverged".into()));
    }
    let rows = row_start..row_start + truth.nrows();
    let views: Vec<ArrayView2<f64>> = ens
        .trajectories
        .iter()
        .map(|t| t.states.slice(s![rows.clone(), ..]))
        .collect();
    let mean_full = ens.mean().expect("non-empty ensemble");
    let pred_mean = mean_full.slice(s![rows, ..]);
    let noise = trained.model.noise_variances();
    let report = MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mse: metrics::mse(pred_mean, truth, mask)?,
        mnll: metrics::mnll(&views, noisy, noise.view(), mask)?,
        coverage: 0.0,
        n_divergent: ens.n_divergent,
        mse_per_dim: metrics::mse_per_dim(pred_mean, truth, mask)?,
        mnll_per_dim: metrics::mnll_per_dim(&views, noisy, noise.view(), mask)?,
        coverage_per_dim: Vec::new(),
    };
    let (coverage, coverage_per_dim) = metrics::coverage_detailed(
        &views,
        truth,
        noise.view(),
        COVERAGE_LEVEL,
        CoverageMode::Quantile,
        mask,
        &mut rng,
    )?;
    let report = MetricsReport { coverage, coverage_per_dim, ..report };
    report.validate()?;
    Ok(report)
}

// ======================= forecasting protocol =======================

/// Van der Pol forecasting: train on the first half of the window, score the
/// forecast over the second half, comparing prior-flow and double-flow
/// variants against the mean-field baseline.
pub struct VdpForecast;

const VDP_NOISE_VAR: f64 = 0.05;
const VDP_N_TRAIN: usize = 50;
const VDP_T_TRAIN_END: f64 = 7.0;
const VDP_N_TEST: usize = 50;
const VDP_T_TEST_END: f64 = 14.0;
const VDP_STEPS: usize = 1500;
const VDP_VARIANTS: &[(usize, usize)] = &[(1, 0), (0, 0), (1, 1)];

/// Training times plus the forecast times they extend into.
fn split_times(n_train: usize, t_train_end: f64, n_test: usize, t_test_end: f64) -> (Vec<f64>, Vec<f64>) {
    let train = linspace(0.0, t_train_end, n_train);
    let mut full = train.clone();
    let span = t_test_end - t_train_end;
    for i in 1..=n_test {
        full.push(t_train_end + span * i as f64 / n_test as f64);
    }
    (train, full)
}

impl Experiment for VdpForecast {
    fn name(&self) -> &'static str {
        "vdp"
    }

    fn description(&self) -> &'static str {
        "Van der Pol forecasting: train on [0, 7], score the forecast over (7, 14]"
    }

    fn run(&self, opts: &RunOptions) -> Result<ExperimentReport> {
        let system = VanDerPol;
        let x0 = system.default_x0();
        let (train_times, full_times) =
            split_times(VDP_N_TRAIN, VDP_T_TRAIN_END, VDP_N_TEST, VDP_T_TEST_END);
        let n_mc_eval = opts.n_mc_eval.unwrap_or(EVAL_N_MC);

        let mut per_variant: Vec<Vec<SeedOutcome>> = vec![Vec::new(); VDP_VARIANTS.len()];
        for &seed in &opts.seeds {
            let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
            let sim_grid = TimeGrid::new(full_times.clone(), 1)?;
            let (truth, obs) = simulate(&system, x0.view(), &sim_grid, VDP_NOISE_VAR, &mut data_rng)?;

            let train_grid = TimeGrid::new(train_times.clone(), SUBSTEPS_SIMULATED)?;
            let mut metadata = obs.metadata.clone();
            metadata.insert("seed".to_string(), seed.to_string());
            metadata.insert("split".to_string(), "train".to_string());
            let train_set = ObservationSet::new(
                train_grid,
                obs.observations.slice(s![..VDP_N_TRAIN, ..]).to_owned(),
                Array2::from_elem((VDP_N_TRAIN, system.dim()), true),
                metadata,
            )?;
            let truth_test = truth.states.slice(s![VDP_N_TRAIN.., ..]);
            let noisy_test = obs.observations.slice(s![VDP_N_TRAIN.., ..]);
            let eval_mask = Array2::from_elem((VDP_N_TEST, system.dim()), true);
            let predict_grid = TimeGrid::new(full_times.clone(), SUBSTEPS_SIMULATED)?;

            for (vi, &(prior_depth, posterior_depth)) in VDP_VARIANTS.iter().enumerate() {
                let spec = TrainSpec {
                    setup: ModelSetup {
                        inducing: INDUCING,
                        fourier_features: FOURIER_FEATURES,
                        prior_depth,
                        posterior_depth,
                        noise_var: VDP_NOISE_VAR,
                        shooting_segments: None,
                    },
                    steps: VDP_STEPS,
                };
                let trained = train_variant(&train_set, &spec, seed, opts)?;
                let report = evaluate_rows(
                    &trained,
                    &predict_grid,
                    VDP_N_TRAIN,
                    truth_test,
                    noisy_test,
                    &eval_mask,
                    n_mc_eval,
                    seed,
                )?;
                log::info!(
                    "vdp prior{prior_depth}-post{posterior_depth} seed {seed}: mse {:.4} mnll {:.4} coverage {:.3}",
                    report.mse,
                    report.mnll,
                    report.coverage
                );
                per_variant[vi].push(SeedOutcome { seed, metrics: report });
            }
        }

        let variants = VDP_VARIANTS
            .iter()
            .zip(per_variant)
            .map(|(&(p, q), outcomes)| summarize(p, q, outcomes))
            .collect();
        Ok(ExperimentReport {
            schema_version: EXPERIMENT_SCHEMA_VERSION,
            experiment: self.name().to_string(),
            seeds: opts.seeds.clone(),
            variants,
        })
    }
}

// ======================= hidden-region protocol =======================

/// FitzHugh-Nagumo with every observation in one state quadrant hidden:
/// scores reconstruction accuracy inside the hidden region.
pub struct FhnMaskedRegion;

const FHN_NOISE_VAR: f64 = 0.025;
const FHN_N_TRAIN: usize = 25;
const FHN_T_END: f64 = 5.0;
const FHN_STEPS: usize = 1500;
const FHN_VARIANTS: &[(usize, usize)] = &[(1, 0), (0, 0)];

impl Experiment for FhnMaskedRegion {
    fn name(&self) -> &'static str {
        "fhn"
    }

    fn description(&self) -> &'static str {
        "FitzHugh-Nagumo with the x1 > 0, x2 < 0 quadrant hidden: score the hidden rows"
    }

    fn run(&self, opts: &RunOptions) -> Result<ExperimentReport> {
        let system = FitzHughNagumo;
        let x0 = system.default_x0();
        let times = linspace(0.0, FHN_T_END, FHN_N_TRAIN);
        let n_mc_eval = opts.n_mc_eval.unwrap_or(EVAL_N_MC);

        let mut per_variant: Vec<Vec<SeedOutcome>> = vec![Vec::new(); FHN_VARIANTS.len()];
        for &seed in &opts.seeds {
            let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
            let sim_grid = TimeGrid::new(times.clone(), 1)?;
            let (truth, obs) = simulate(&system, x0.view(), &sim_grid, FHN_NOISE_VAR, &mut data_rng)?;
            let masked = mask_region(&obs, |row| row[0] > 0.0 && row[1] < 0.0)?;

            let train_grid = TimeGrid::new(times.clone(), SUBSTEPS_SIMULATED)?;
            let mut metadata = masked.metadata.clone();
            metadata.insert("seed".to_string(), seed.to_string());
            let train_set = ObservationSet::new(
                train_grid,
                masked.observations.clone(),
                masked.mask.clone(),
                metadata,
            )?;
            // Score exactly the entries the mask hid.
            let eval_mask = masked.mask.mapv(|visible| !visible);
            if !eval_mask.iter().any(|&m| m) {
                return Err(Error::EmptyData(format!(
                    "seed {seed}: no observations fell in the hidden quadrant"
                )));
            }

            for (vi, &(prior_depth, posterior_depth)) in FHN_VARIANTS.iter().enumerate() {
                let spec = TrainSpec {
                    setup: ModelSetup {
                        inducing: INDUCING,
                        fourier_features: FOURIER_FEATURES,
                        prior_depth,
                        posterior_depth,
                        noise_var: FHN_NOISE_VAR,
                        shooting_segments: None,
                    },
                    steps: FHN_STEPS,
                };
                let trained = train_variant(&train_set, &spec, seed, opts)?;
                let report = evaluate_rows(
                    &trained,
                    &train_set.grid,
                    0,
                    truth.states.view(),
                    obs.observations.view(),
                    &eval_mask,
                    n_mc_eval,
                    seed,
                )?;
                log::info!(
                    "fhn prior{prior_depth}-post{posterior_depth} seed {seed}: mse {:.4} mnll {:.4} coverage {:.3}",
                    report.mse,
                    report.mnll,
                    report.coverage
                );
                per_variant[vi].push(SeedOutcome { seed, metrics: report });
            }
        }

        let variants = FHN_VARIANTS
            .iter()
            .zip(per_variant)
            .map(|(&(p, q), outcomes)| summarize(p, q, outcomes))
            .collect();
        Ok(ExperimentReport {
            schema_version: EXPERIMENT_SCHEMA_VERSION,
            experiment: self.name().to_string(),
            seeds: opts.seeds.clone(),
            variants,
        })
    }
}

// ======================= latent-space protocol =======================

/// A Van der Pol trajectory embedded into 10 dimensions by a random linear
/// isometry, reduced to a 3-dimensional principal-component space, and
/// modeled there with multiple shooting. Scores live in data space: each
/// latent predictive Gaussian is pushed through the linear map and widened
/// by the truncation residual estimated on the training split.
pub struct LatentEmbeddingDemo;

const LATENT_D_OBS: usize = 10;
const LATENT_K: usize = 3;
const LATENT_NOISE_VAR: f64 = 0.01;
const LATENT_SHOOTING: usize = 5;
const LATENT_STEPS: usize = 1200;
const LATENT_VARIANTS: &[(usize, usize)] = &[(1, 1), (0, 0)];

impl Experiment for LatentEmbeddingDemo {
    fn name(&self) -> &'static str {
        "latent-demo"
    }

    fn description(&self) -> &'static str {
        "Van der Pol embedded in 10 dimensions, trained in a 3-dimensional principal-component space with multiple shooting, scored in data space"
    }

    fn run(&self, opts: &RunOptions) -> Result<ExperimentReport> {
        let system = VanDerPol;
        let x0 = system.default_x0();
        let (train_times, full_times) =
            split_times(VDP_N_TRAIN, VDP_T_TRAIN_END, VDP_N_TEST, VDP_T_TEST_END);
        let n_mc_eval = opts.n_mc_eval.unwrap_or(EVAL_N_MC);

        let mut per_variant: Vec<Vec<SeedOutcome>> = vec![Vec::new(); LATENT_VARIANTS.len()];
        for &seed in &opts.seeds {
            let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
            let truth_grid = TimeGrid::new(full_times.clone(), TRUTH_SUBSTEPS)?;
            let truth = rk4_integrate(|x| Ok(system.field(x)), x0.view(), &truth_grid)?;
            let w = orthonormal_embedding(LATENT_D_OBS, system.dim(), &mut data_rng)?;
            let y_true = truth.states.dot(&w.t());
            let mut y_obs = y_true.clone();
            let sigma = LATENT_NOISE_VAR.sqrt();
            for v in y_obs.iter_mut() {
                let z: f64 = data_rng.sample(rand_distr::StandardNormal);
                *v += sigma * z;
            }

            let y_train = y_obs.slice(s![..VDP_N_TRAIN, ..]);
            let map = pca_fit(y_train, LATENT_K)?;
            let latent_train = pca_project(&map, y_train);
            let recon = pca_invert(&map, latent_train.view());
            // Per-dimension truncation residual of the fitted map.
            let mut residual = Array1::zeros(LATENT_D_OBS);
            for j in 0..LATENT_D_OBS {
                let mut acc = 0.0;
                for i in 0..VDP_N_TRAIN {
                    let diff = y_train[[i, j]] - recon[[i, j]];
                    acc += diff * diff;
                }
                residual[j] = acc / VDP_N_TRAIN as f64;
            }

            let latent_grid = TimeGrid::new(train_times.clone(), SUBSTEPS_LATENT)?;
            let mut metadata = BTreeMap::new();
            metadata.insert("system".to_string(), format!("{} embedded", system.name()));
            metadata.insert("seed".to_string(), seed.to_string());
            metadata.insert("latent_dim".to_string(), LATENT_K.to_string());
            let train_set = ObservationSet::new(
                latent_grid,
                latent_train,
                Array2::from_elem((VDP_N_TRAIN, LATENT_K), true),
                metadata,
            )?;
            let predict_grid = TimeGrid::new(full_times.clone(), SUBSTEPS_LATENT)?;
            let truth_test = y_true.slice(s![VDP_N_TRAIN.., ..]);
            let noisy_test = y_obs.slice(s![VDP_N_TRAIN.., ..]);
            let eval_mask = Array2::from_elem((VDP_N_TEST, LATENT_D_OBS), true);

            for (vi, &(prior_depth, posterior_depth)) in LATENT_VARIANTS.iter().enumerate() {
                let spec = TrainSpec {
                    setup: ModelSetup {
                        inducing: INDUCING,
                        fourier_features: FOURIER_FEATURES,
                        prior_depth,
                        posterior_depth,
                        noise_var: LATENT_NOISE_VAR,
                        shooting_segments: Some(LATENT_SHOOTING),
                    },
                    steps: LATENT_STEPS,
                };
                let trained = train_variant(&train_set, &spec, seed, opts)?;
                let report = evaluate_pushforward(
                    &trained,
                    &predict_grid,
                    &map,
                    &residual,
                    VDP_N_TRAIN,
                    truth_test,
                    noisy_test,
                    &eval_mask,
                    n_mc_eval,
                    seed,
                )?;
                log::info!(
                    "latent-demo prior{prior_depth}-post{posterior_depth} seed {seed}: mse {:.4} mnll {:.4} coverage {:.3}",
                    report.mse,
                    report.mnll,
                    report.coverage
                );
                per_variant[vi].push(SeedOutcome { seed, metrics: report });
            }
        }

        let variants = LATENT_VARIANTS
            .iter()
            .zip(per_variant)
            .map(|(&(p, q), outcomes)| summarize(p, q, outcomes))
            .collect();
        Ok(ExperimentReport {
            schema_version: EXPERIMENT_SCHEMA_VERSION,
            experiment: self.name().to_string(),
            seeds: opts.seeds.clone(),
            variants,
        })
    }
}

/// Like [`evaluate_rows`], but the latent ensemble is lifted back to data
/// space first. The predictive noise per output dimension combines the
/// learned latent noise pushed through the component rows with the PCA
/// truncation residual.
#[allow(clippy::too_many_arguments)]
fn evaluate_pushforward(
    trained: &ModelParameters,
    grid: &TimeGrid,
    map: &PcaMap,
    residual: &Array1<f64>,
    row_start: usize,
    truth: ArrayView2<f64>,
    noisy: ArrayView2<f64>,
    mask: &Array2<bool>,
    n_mc_eval: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    let ens = predict(trained, grid, n_mc_eval, &mut rng)?;
    if ens.trajectories.is_empty() {
        return Err(Error::Numerics("every predictive sample diverged".into()));
    }
    let rows = row_start..row_start + truth.nrows();
    let pushed: Vec<Array2<f64>> = ens
        .trajectories
        .iter()
        .map(|t| pca_invert(map, t.states.view()))
        .collect();
    let views: Vec<ArrayView2<f64>> = pushed.iter().map(|a| a.slice(s![rows.clone(), ..])).collect();
    let latent_mean = ens.mean().expect("non-empty ensemble");
    let mean_pushed = pca_invert(map, latent_mean.view());
    let pred_mean = mean_pushed.slice(s![rows, ..]);

    let r_latent = trained.model.noise_variances();
    let mut noise = residual.clone();
    for j in 0..map.d_obs() {
        for k in 0..map.k() {
            noise[j] += map.components[[k, j]] * map.components[[k, j]] * r_latent[k];
        }
    }

    let report = MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mse: metrics::mse(pred_mean, truth, mask)?,
        mnll: metrics::mnll(&views, noisy, noise.view(), mask)?,
        coverage: 0.0,
        n_divergent: ens.n_divergent,
        mse_per_dim: metrics::mse_per_dim(pred_mean, truth, mask)?,
        mnll_per_dim: metrics::mnll_per_dim(&views, noisy, noise.view(), mask)?,
        coverage_per_dim: Vec::new(),
    };
    let (coverage, coverage_per_dim) = metrics::coverage_detailed(
        &views,
        truth,
        noise.view(),
        COVERAGE_LEVEL,
        CoverageMode::Quantile,
        mask,
        &mut rng,
    )?;
    let report = MetricsReport { coverage, coverage_per_dim, ..report };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_metrics(scale: f64) -> MetricsReport {
        MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            mse: 0.5 * scale,
            mnll: 1.0 * scale,
            coverage: 0.75,
            n_divergent: 0,
            mse_per_dim: vec![0.5 * scale],
            mnll_per_dim: vec![1.0 * scale],
            coverage_per_dim: vec![0.75],
        }
    }

    #[test]
    fn registry_resolves_every_known_name() {
        for &name in KNOWN_EXPERIMENTS {
            let exp = experiment_by_name(name).unwrap();
            assert_eq!(exp.name(), name);
            assert!(!exp.description().is_empty());
        }
        match experiment_by_name("osc") {
            Err(Error::UnknownName { known, .. }) => assert!(known.contains("latent-demo")),
            other => panic!("expected unknown-name error, got {:?}", other.map(|e| e.name())),
        }
    }

    #[test]
    fn median_handles_odd_and_even_lengths() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[5.0]), 5.0);
    }

    #[test]
    fn report_json_is_byte_stable_and_parses_back() {
        let report = ExperimentReport {
            schema_version: EXPERIMENT_SCHEMA_VERSION,
            experiment: "toy".to_string(),
            seeds: vec![7],
            variants: vec![summarize(1, 0, vec![SeedOutcome { seed: 7, metrics: toy_metrics(1.0) }])],
        };
        report.validate().unwrap();
        let json = report.to_json();
        let expected = "{\"schema_version\":1,\"experiment\":\"toy\",\"seeds\":[7],\"variants\":[\
                        {\"variant\":\"prior1-post0\",\"prior_depth\":1,\"posterior_depth\":0,\
                        \"median_mse\":5.0000000000000000e-1,\"median_mnll\":1.0000000000000000e0,\
                        \"median_coverage\":7.5000000000000000e-1,\"per_seed\":[{\"seed\":7,\
                        \"metrics\":{\"schema_version\":1,\"mse\":5.0000000000000000e-1,\
                        \"mnll\":1.0000000000000000e0,\"coverage\":7.5000000000000000e-1,\
                        \"n_divergent\":0,\"mse_per_dim\":[5.0000000000000000e-1],\
                        \"mnll_per_dim\":[1.0000000000000000e0],\"coverage_per_dim\":[7.5000000000000000e-1]}}]}]}";
        assert_eq!(json, expected);

        let parsed: ExperimentReport = serde_json::from_str(&json).unwrap();
        parsed.validate().unwrap();
        assert_eq!(parsed.experiment, "toy");
        assert_eq!(parsed.variants[0].per_seed[0].seed, 7);
        assert_eq!(parsed.variants[0].median_mnll, 1.0);
        assert!(report.variant("prior1-post0").is_some());
        assert!(report.variant("prior9-post9").is_none());
    }

    #[test]
    fn medians_summarize_across_seeds() {
        let outcomes = vec![
            SeedOutcome { seed: 1, metrics: toy_metrics(1.0) },
            SeedOutcome { seed: 2, metrics: toy_metrics(3.0) },
            SeedOutcome { seed: 3, metrics: toy_metrics(2.0) },
        ];
        let v = summarize(0, 0, outcomes);
        assert_eq!(v.variant, "prior0-post0");
        assert_eq!(v.median_mse, 1.0);
        assert_eq!(v.median_mnll, 2.0);
        assert_eq!(v.per_seed.len(), 3);
    }

    #[test]
    fn vdp_smoke_run_is_deterministic() {
        let opts = RunOptions {
            seeds: vec![7],
            steps: Some(12),
            n_mc: Some(2),
            n_mc_eval: Some(24),
        };
        let exp = experiment_by_name("vdp").unwrap();
        let a = exp.run(&opts).unwrap();
        a.validate().unwrap();
        assert_eq!(a.variants.len(), 3);
        for v in &a.variants {
            assert_eq!(v.per_seed.len(), 1);
            assert_eq!(v.per_seed[0].metrics.mse_per_dim.len(), 2);
            assert!(v.median_mse.is_finite() && v.median_mnll.is_finite());
        }
        let b = exp.run(&opts).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn fhn_smoke_scores_the_hidden_quadrant() {
        let opts = RunOptions {
            seeds: vec![3],
            steps: Some(10),
            n_mc: Some(2),
            n_mc_eval: Some(24),
        };
        let report = experiment_by_name("fhn").unwrap().run(&opts).unwrap();
        report.validate().unwrap();
        assert_eq!(report.variants.len(), 2);
        assert!(report.variant("prior1-post0").is_some());
        assert!(report.variant("prior0-post0").is_some());
    }

    #[test]
    fn latent_smoke_scores_in_data_space() {
        let opts = RunOptions {
            seeds: vec![5],
            steps: Some(10),
            n_mc: Some(2),
            n_mc_eval: Some(24),
        };
        let report = experiment_by_name("latent-demo").unwrap().run(&opts).unwrap();
        report.validate().unwrap();
        let double = report.variant("prior1-post1").unwrap();
        assert_eq!(double.per_seed[0].metrics.mse_per_dim.len(), LATENT_D_OBS);
        assert_eq!(double.per_seed[0].metrics.coverage_per_dim.len(), LATENT_D_OBS);
    }
}
