//! Vector-field assembly, fixed-step RK4 integration, and multiple-shooting
//! segmentation.
//!
//! The modeled dynamics are dx/dt = G(f(x)): a pathwise GP draw f pushed
//! through the prior flow stack G. Integration is classical Runge-Kutta 4
//! with every inter-observation interval subdivided into a fixed number of
//! equal substeps; gradients during training flow through the unrolled steps
//! (discretize-then-optimize), so the integrator has no hidden adaptivity.
//!
//! Long trajectories can be split into shooting segments, each integrated
//! from its own variational initial state; interior boundaries contribute
//! Gaussian continuity potentials N(s_{j+1}; Phi(s_j), sigma_c^2 I).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flows::{stack_forward, FlowStack};
use crate::sparse_gp::{path_eval, InducingModel, PathSample};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

/// State norm beyond which integration is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;
/// Default substeps per observation interval for simulated systems.
pub const SUBSTEPS_SIMULATED: usize = 5;
/// Default substeps per observation interval for latent-space runs.
pub const SUBSTEPS_LATENT: usize = 3;
/// Fixed continuity standard deviation sigma_c for shooting boundaries.
pub const CONTINUITY_STD: f64 = 1e-2;

/// Strictly increasing observation times plus integrator refinement.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    substeps: usize,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>, substeps: usize) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "time grid needs at least 2 points, got {}",
                times.len()
            )));
        }
        if substeps == 0 {
            return Err(Error::InvalidParameter("substeps_per_interval must be positive".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter("times must be finite and strictly increasing".into()));
        }
        Ok(TimeGrid { times, substeps })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Sub-grid over the inclusive index range [start, end].
    pub fn slice(&self, start: usize, end: usize) -> Result<TimeGrid> {
        if start >= end || end >= self.times.len() {
            return Err(Error::InvalidParameter(format!(
                "invalid grid slice [{start}, {end}] of {} points",
                self.times.len()
            )));
        }
        TimeGrid::new(self.times[start..=end].to_vec(), self.substeps)
    }
}

/// States aligned with a time grid, one row per grid point.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Array2<f64>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, states: Array2<f64>) -> Result<Self> {
        if states.nrows() != grid.len() {
            return Err(Error::dim(
                "Trajectory",
                format!("{} rows", grid.len()),
                format!("{}", states.nrows()),
            ));
        }
        Ok(Trajectory { grid, states })
    }
}

/// The modeled vector field at `x`: pathwise GP value pushed through the
/// prior flow. A depth-zero flow returns the GP value untouched.
pub fn vector_field_eval(
    sample: &PathSample,
    model: &InducingModel,
    prior_flow: &FlowStack,
    x: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let f = path_eval(model, sample, x)?;
    if prior_flow.is_identity() {
        return Ok(f);
    }
    Ok(stack_forward(prior_flow, f.view())?.y)
}

fn check_state(x: &Array1<f64>, time: f64, segment: Option<usize>) -> Result<()> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(Error::Divergence { time, norm, segment });
    }
    Ok(())
}

/// Classical RK4 over the grid: every interval [t_n, t_{n+1}] is subdivided
/// into `grid.substeps()` equal steps. Returns states at the grid times.
pub fn rk4_integrate<F>(mut field: F, x0: ArrayView1<f64>, grid: &TimeGrid) -> Result<Trajectory>
where
    F: FnMut(ArrayView1<f64>) -> Result<Array1<f64>>,
{
    rk4_with_segment(&mut field, x0, grid, None)
}

fn rk4_with_segment<F>(
    field: &mut F,
    x0: ArrayView1<f64>,
    grid: &TimeGrid,
    segment: Option<usize>,
) -> Result<Trajectory>
where
    F: FnMut(ArrayView1<f64>) -> Result<Array1<f64>>,
{
    let d = x0.len();
    let n = grid.len();
    let mut states = Array2::zeros((n, d));
    let mut x = x0.to_owned();
    check_state(&x, grid.times()[0], segment)?;
    states.row_mut(0).assign(&x);
    for i in 0..n - 1 {
        let (t0, t1) = (grid.times()[i], grid.times()[i + 1]);
        let h = (t1 - t0) / grid.substeps() as f64;
        for s in 0..grid.substeps() {
            let k1 = field(x.view())?;
            let x2 = &x + &(&k1 * (h / 2.0));
            let k2 = field(x2.view())?;
            let x3 = &x + &(&k2 * (h / 2.0));
            let k3 = field(x3.view())?;
            let x4 = &x + &(&k3 * h);
            let k4 = field(x4.view())?;
            let incr = (&k1 + &(&(&k2 + &k3) * 2.0) + &k4) * (h / 6.0);
            x = &x + &incr;
            check_state(&x, t0 + h * (s + 1) as f64, segment)?;
        }
        states.row_mut(i + 1).assign(&x);
    }
    Trajectory::new(grid.clone(), states)
}

/// Multiple-shooting segmentation of a time grid with per-segment
/// variational initial-state factors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShootingPlan {
    /// Boundary indices into the grid: length S+1, first 0, last N-1.
    pub boundaries: Vec<usize>,
    /// Variational means, one row per segment (S x d).
    pub means: Array2<f64>,
    /// Variational log variances, one row per segment (S x d).
    pub log_vars: Array2<f64>,
    /// sigma_c^2 of the boundary continuity potentials.
    pub continuity_variance: f64,
}

impl ShootingPlan {
    pub fn n_segments(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Inclusive index range [start, end] of segment j.
    pub fn segment_bounds(&self, j: usize) -> (usize, usize) {
        (self.boundaries[j], self.boundaries[j + 1])
    }

    /// Set each segment's mean to the nearest observed value per dimension
    /// (nearest in time among rows where that dimension is unmasked).
    pub fn init_from_observations(
        &mut self,
        times: &[f64],
        values: ArrayView2<f64>,
        mask: ArrayView2<bool>,
        grid: &TimeGrid,
    ) -> Result<()> {
        let d = self.means.ncols();
        if values.ncols() != d || mask.shape() != values.shape() || values.nrows() != times.len() {
            return Err(Error::dim(
                "init_from_observations",
                format!("{} x {d} values/mask aligned with times", times.len()),
                format!("{:?}", values.shape()),
            ));
        }
        for j in 0..self.n_segments() {
            let t_b = grid.times()[self.boundaries[j]];
            for col in 0..d {
                let mut best: Option<(f64, f64)> = None;
                for (row, &t) in times.iter().enumerate() {
                    if !mask[[row, col]] {
                        continue;
                    }
                    let dist = (t - t_b).abs();
                    if best.map_or(true, |(bd, _)| dist < bd) {
                        best = Some((dist, values[[row, col]]));
                    }
                }
                if let Some((_, v)) = best {
                    self.means[[j, col]] = v;
                }
            }
        }
        Ok(())
    }
}

/// Partition the grid's N-1 observation intervals into S near-equal contiguous
/// segments (earlier segments take the remainder). Variational states start
/// at zero mean with variance 0.1^2; continuity variance is sigma_c^2.
pub fn make_shooting_plan(grid: &TimeGrid, s: usize, d: usize) -> Result<ShootingPlan> {
    let n_intervals = grid.len() - 1;
    if s == 0 || s > n_intervals {
        return Err(Error::InvalidParameter(format!(
            "segment count {s} out of range for {n_intervals} observation intervals"
        )));
    }
    let base = n_intervals / s;
    let rem = n_intervals % s;
    let mut boundaries = Vec::with_capacity(s + 1);
    boundaries.push(0usize);
    for j in 0..s {
        let size = base + usize::from(j < rem);
        boundaries.push(boundaries[j] + size);
    }
    debug_assert_eq!(*boundaries.last().unwrap(), n_intervals);
    Ok(ShootingPlan {
        boundaries,
        means: Array2::zeros((s, d)),
        log_vars: Array2::from_elem((s, d), (0.1f64 * 0.1).ln()),
        continuity_variance: CONTINUITY_STD * CONTINUITY_STD,
    })
}

/// Integrate every shooting segment independently from the provided initial
/// states (S x d). Returns the per-segment trajectories and, per interior
/// boundary j, the continuity pair (endpoint of segment j, init of segment j+1).
pub fn integrate_shooting<F>(
    mut field: F,
    plan: &ShootingPlan,
    segment_inits: ArrayView2<f64>,
    grid: &TimeGrid,
) -> Result<(Vec<Trajectory>, Vec<(Array1<f64>, Array1<f64>)>)>
where
    F: FnMut(ArrayView1<f64>) -> Result<Array1<f64>>,
{
    let s = plan.n_segments();
    if segment_inits.nrows() != s {
        return Err(Error::dim(
            "integrate_shooting",
            format!("{s} segment inits"),
            format!("{}", segment_inits.nrows()),
        ));
    }
    if *plan.boundaries.last().unwrap() != grid.len() - 1 {
        return Err(Error::InvalidParameter(
            "shooting plan does not cover the grid".into(),
        ));
    }
    let mut pieces = Vec::with_capacity(s);
    for j in 0..s {
        let (start, end) = plan.segment_bounds(j);
        let sub = grid.slice(start, end)?;
        let traj = rk4_with_segment(&mut field, segment_inits.row(j), &sub, Some(j))?;
        pieces.push(traj);
    }
    let mut pairs = Vec::with_capacity(s.saturating_sub(1));
    for j in 0..s - 1 {
        let endpoint = pieces[j].states.row(pieces[j].states.nrows() - 1).to_owned();
        pairs.push((endpoint, segment_inits.row(j + 1).to_owned()));
    }
    Ok((pieces, pairs))
}

// ======================= taped twins =======================

pub(crate) mod taped {
    use super::*;

    /// One RK4 substep of size `h` under a taped field.
    pub fn rk4_step<F>(tape: &mut Tape, field: &mut F, x: &[Var], h: f64) -> Vec<Var>
    where
        F: FnMut(&mut Tape, &[Var]) -> Vec<Var>,
    {
        let d = x.len();
        let k1 = field(tape, x);
        let x2: Vec<Var> = (0..d)
            .map(|j| {
                let s = tape.mul_const(k1[j], h / 2.0);
                tape.add(x[j], s)
            })
            .collect();
        let k2 = field(tape, &x2);
        let x3: Vec<Var> = (0..d)
            .map(|j| {
                let s = tape.mul_const(k2[j], h / 2.0);
                tape.add(x[j], s)
            })
            .collect();
        let k3 = field(tape, &x3);
        let x4: Vec<Var> = (0..d)
            .map(|j| {
                let s = tape.mul_const(k3[j], h);
                tape.add(x[j], s)
            })
            .collect();
        let k4 = field(tape, &x4);
        (0..d)
            .map(|j| {
                let mid = tape.add(k2[j], k3[j]);
                let mid2 = tape.mul_const(mid, 2.0);
                let ends = tape.add(k1[j], k4[j]);
                let total = tape.add(mid2, ends);
                let incr = tape.mul_const(total, h / 6.0);
                tape.add(x[j], incr)
            })
            .collect()
    }

    /// Taped RK4 over the grid; returns the states at grid times (including
    /// the initial state). Divergence is checked on values after every substep.
    pub fn integrate<F>(
        tape: &mut Tape,
        field: &mut F,
        x0: &[Var],
        grid: &TimeGrid,
        segment: Option<usize>,
    ) -> Result<Vec<Vec<Var>>>
    where
        F: FnMut(&mut Tape, &[Var]) -> Vec<Var>,
    {
        let n = grid.len();
        let mut states = Vec::with_capacity(n);
        let mut x = x0.to_vec();
        check(tape, &x, grid.times()[0], segment)?;
        states.push(x.clone());
        for i in 0..n - 1 {
            let (t0, t1) = (grid.times()[i], grid.times()[i + 1]);
            let h = (t1 - t0) / grid.substeps() as f64;
            for s in 0..grid.substeps() {
                x = rk4_step(tape, field, &x, h);
                check(tape, &x, t0 + h * (s + 1) as f64, segment)?;
            }
            states.push(x.clone());
        }
        Ok(states)
    }

    fn check(tape: &Tape, x: &[Var], time: f64, segment: Option<usize>) -> Result<()> {
        let norm = x
            .iter()
            .map(|v| tape.value(*v) * tape.value(*v))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(Error::Divergence { time, norm, segment });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{sample_fourier_basis, SeKernelParams};
    use crate::sparse_gp::matheron_sample;
    use approx::assert_relative_eq;
    use ndarray::{arr1, arr2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(t0: f64, t1: f64, n: usize, substeps: usize) -> TimeGrid {
        let times = (0..n)
            .map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64)
            .collect();
        TimeGrid::new(times, substeps).unwrap()
    }

    #[test]
    fn grid_rejects_non_monotone_times() {
        assert!(TimeGrid::new(vec![0.0, 1.0, 1.0], 2).is_err());
        assert!(TimeGrid::new(vec![0.0, -1.0], 2).is_err());
        assert!(TimeGrid::new(vec![0.0], 2).is_err());
        assert!(TimeGrid::new(vec![0.0, 1.0], 0).is_err());
    }

    #[test]
    fn zero_field_is_constant() {
        let g = grid(0.0, 3.0, 7, 4);
        let traj = rk4_integrate(|x| Ok(Array1::zeros(x.len())), arr1(&[1.5, -0.5]).view(), &g).unwrap();
        for i in 0..7 {
            assert_eq!(traj.states[[i, 0]], 1.5);
            assert_eq!(traj.states[[i, 1]], -0.5);
        }
    }

    #[test]
    fn linear_decay_hits_closed_form() {
        // dx/dt = -x, x(0) = 1, 100 substeps on [0, 1]: x(1) = e^{-1} within 1e-9.
        let g = grid(0.0, 1.0, 2, 100);
        let traj = rk4_integrate(|x| Ok(-&x.to_owned()), arr1(&[1.0]).view(), &g).unwrap();
        assert!((traj.states[[1, 0]] - (-1.0f64).exp()).abs() < 1e-9);
        assert_relative_eq!(traj.states[[1, 0]], 0.3678794, max_relative = 1e-6);
    }

    #[test]
    fn halving_steps_scales_error_by_sixteen() {
        let endpoint = |substeps: usize| {
            let g = grid(0.0, 1.0, 2, substeps);
            rk4_integrate(|x| Ok(-&x.to_owned()), arr1(&[1.0]).view(), &g)
                .unwrap()
                .states[[1, 0]]
        };
        let exact = (-1.0f64).exp();
        let e1 = (endpoint(4) - exact).abs();
        let e2 = (endpoint(8) - exact).abs();
        let ratio = e1 / e2;
        assert!(
            (ratio - 16.0).abs() <= 0.2 * 16.0,
            "error ratio {ratio}, expected about 16"
        );
    }

    #[test]
    fn divergence_reports_time_of_failure() {
        // dx/dt = x^2 blows up in finite time from x(0) = 1 at t = 1.
        let g = grid(0.0, 2.0, 5, 50);
        let err = rk4_integrate(
            |x| Ok(arr1(&[x[0] * x[0]])),
            arr1(&[1.0]).view(),
            &g,
        );
        match err {
            Err(Error::Divergence { time, norm, segment }) => {
                assert!(time > 0.9 && time < 1.1, "blow-up time {time}");
                assert!(!norm.is_finite() || norm > DIVERGENCE_NORM);
                assert!(segment.is_none());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn refined_grid_subsamples_to_direct_integration() {
        // Same underlying step sequence: refining the grid 2x while halving
        // substeps yields identical states at the shared times.
        let field = |x: ArrayView1<f64>| {
            Ok(arr1(&[x[1], -x[0] + 0.5 * x[1] * (1.0 - x[0] * x[0])]))
        };
        let coarse = grid(0.0, 2.0, 5, 4);
        let fine = grid(0.0, 2.0, 9, 2);
        let x0 = arr1(&[-1.5, 2.5]);
        let tc = rk4_integrate(field, x0.view(), &coarse).unwrap();
        let tf = rk4_integrate(field, x0.view(), &fine).unwrap();
        for i in 0..5 {
            for j in 0..2 {
                assert_relative_eq!(tc.states[[i, j]], tf.states[[2 * i, j]], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn shooting_partition_arithmetic() {
        // 10 observation intervals, 3 segments: sizes {4, 3, 3}, earlier larger.
        let g = grid(0.0, 1.0, 11, 2);
        let plan = make_shooting_plan(&g, 3, 2).unwrap();
        assert_eq!(plan.boundaries, vec![0, 4, 7, 10]);
        // 9 intervals split evenly.
        let g2 = grid(0.0, 1.0, 10, 2);
        let plan2 = make_shooting_plan(&g2, 3, 2).unwrap();
        assert_eq!(plan2.boundaries, vec![0, 3, 6, 9]);
        // Single segment covers the grid.
        let plan3 = make_shooting_plan(&g2, 1, 2).unwrap();
        assert_eq!(plan3.boundaries, vec![0, 9]);
        // Out-of-range segment counts are rejected.
        assert!(make_shooting_plan(&g2, 0, 2).is_err());
        assert!(make_shooting_plan(&g2, 10, 2).is_err());
        assert_eq!(plan.continuity_variance, 1e-4);
        assert_eq!(plan.log_vars[[0, 0]], (0.01f64).ln());
    }

    #[test]
    fn shooting_inits_take_nearest_observations() {
        let g = grid(0.0, 4.0, 5, 2);
        let mut plan = make_shooting_plan(&g, 2, 1).unwrap();
        let times = [0.1, 1.9, 3.8];
        let values = arr2(&[[10.0], [20.0], [30.0]]);
        let mask = arr2(&[[true], [true], [true]]);
        plan.init_from_observations(&times, values.view(), mask.view(), &g)
            .unwrap();
        // Boundaries at indices {0, 2}: times {0.0, 2.0}; nearest obs 0.1 and 1.9.
        assert_eq!(plan.means[[0, 0]], 10.0);
        assert_eq!(plan.means[[1, 0]], 20.0);
        // Masked rows are skipped.
        let mask2 = arr2(&[[true], [false], [true]]);
        plan.init_from_observations(&times, values.view(), mask2.view(), &g)
            .unwrap();
        assert_eq!(plan.means[[1, 0]], 30.0);
    }

    #[test]
    fn shooting_with_exact_endpoints_matches_single_shot() {
        let field = |x: ArrayView1<f64>| {
            Ok(arr1(&[x[1], -x[0] + 0.5 * x[1] * (1.0 - x[0] * x[0])]))
        };
        let g = grid(0.0, 3.0, 13, 6);
        let x0 = arr1(&[-1.5, 2.5]);
        let reference = rk4_integrate(field, x0.view(), &g).unwrap();
        let plan = make_shooting_plan(&g, 3, 2).unwrap();
        let mut inits = Array2::zeros((3, 2));
        for j in 0..3 {
            inits.row_mut(j).assign(&reference.states.row(plan.boundaries[j]));
        }
        let (pieces, pairs) = integrate_shooting(field, &plan, inits.view(), &g).unwrap();
        assert_eq!(pieces.len(), 3);
        assert_eq!(pairs.len(), 2);
        for (endpoint, next_init) in &pairs {
            for j in 0..2 {
                assert_relative_eq!(endpoint[j], next_init[j], epsilon = 1e-9);
            }
        }
        // Piecewise states agree with the single-shot reference.
        for (seg, piece) in pieces.iter().enumerate() {
            let (start, end) = plan.segment_bounds(seg);
            for (local, global) in (start..=end).enumerate() {
                for j in 0..2 {
                    assert_relative_eq!(
                        piece.states[[local, j]],
                        reference.states[[global, j]],
                        epsilon = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn single_segment_equals_rk4_with_empty_pairs() {
        let field = |x: ArrayView1<f64>| Ok(-&x.to_owned());
        let g = grid(0.0, 1.0, 5, 3);
        let plan = make_shooting_plan(&g, 1, 1).unwrap();
        let inits = arr2(&[[1.0]]);
        let (pieces, pairs) = integrate_shooting(field, &plan, inits.view(), &g).unwrap();
        assert!(pairs.is_empty());
        let reference = rk4_integrate(field, arr1(&[1.0]).view(), &g).unwrap();
        assert_eq!(pieces.len(), 1);
        for i in 0..5 {
            assert_eq!(pieces[0].states[[i, 0]], reference.states[[i, 0]]);
        }
    }

    #[test]
    fn field_eval_composes_path_and_flow() {
        let mut kernel = SeKernelParams::new(&[1.0, 1.0], 1.0).unwrap();
        kernel.set_jitter_relative(1e-8).unwrap();
        let z = arr2(&[[0.0, 0.0], [1.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let basis = sample_fourier_basis(&kernel, 16, 2, &mut rng).unwrap();
        let model = InducingModel::new(z, kernel, basis, &[0.1, 0.1]).unwrap();
        let u = arr2(&[[0.5, -0.3], [0.2, 0.8]]);
        let sample = matheron_sample(&model, u.view(), &mut rng).unwrap();
        let flow = FlowStack::init(2, 2, &mut rng).unwrap();
        let x = arr1(&[0.4, 0.6]);

        let direct = vector_field_eval(&sample, &model, &flow, x.view()).unwrap();
        let manual = stack_forward(&flow, path_eval(&model, &sample, x.view()).unwrap().view())
            .unwrap()
            .y;
        for j in 0..2 {
            assert_eq!(direct[j], manual[j]);
        }

        // Depth zero leaves the path value untouched (same bits).
        let identity = FlowStack::identity(2);
        let plain = vector_field_eval(&sample, &model, &identity, x.view()).unwrap();
        let path = path_eval(&model, &sample, x.view()).unwrap();
        for j in 0..2 {
            assert_eq!(plain[j], path[j]);
        }
    }

    #[test]
    fn taped_rk4_matches_value_level() {
        // Field y' = (y2, -y1) rotates; taped and value integrations agree.
        let g = grid(0.0, 1.5, 4, 5);
        let x0 = arr1(&[1.0, 0.0]);
        let value = rk4_integrate(
            |x| Ok(arr1(&[x[1], -x[0]])),
            x0.view(),
            &g,
        )
        .unwrap();

        let mut tape = Tape::new();
        let x0v: Vec<Var> = x0.iter().map(|&v| tape.input(v)).collect();
        let mut field = |t: &mut Tape, x: &[Var]| vec![x[1], t.neg(x[0])];
        let states = taped::integrate(&mut tape, &mut field, &x0v, &g, None).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                assert_relative_eq!(
                    tape.value(states[i][j]),
                    value.states[[i, j]],
                    max_relative = 1e-13
                );
            }
        }
    }

    #[test]
    fn taped_rk4_gradient_matches_finite_differences() {
        // Sensitivity of the endpoint to the initial condition for dx/dt = -x:
        // x(T) = x0 e^{-T}, so dx(T)/dx0 = e^{-T} (up to integrator error).
        let g = grid(0.0, 1.0, 2, 20);
        let mut tape = Tape::new();
        let x0 = tape.input(1.0);
        let mut field = |t: &mut Tape, x: &[Var]| vec![t.neg(x[0])];
        let states = taped::integrate(&mut tape, &mut field, &[x0], &g, None).unwrap();
        tape.backward(states[1][0]);
        assert_relative_eq!(tape.grad(x0), (-1.0f64).exp(), max_relative = 1e-6);
    }
}
