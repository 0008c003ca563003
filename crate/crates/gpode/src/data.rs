//! Synthetic benchmark systems, observation noise, grids, masking, a PCA
//! latent pipeline, and CSV ingestion.
//!
//! Dynamical systems are registered by name behind [`DynamicalSystem`] so
//! experiment configs can select them at runtime. Ground truth is integrated
//! on a finer substep count than model integration uses, to keep evaluation
//! from sharing the model's discretization error.

use crate::dynamics::{rk4_integrate, TimeGrid, Trajectory};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

/// Substeps per observation interval when integrating ground truth.
pub const TRUTH_SUBSTEPS: usize = 20;

/// Noisy, possibly partially observed measurements on a time grid.
#[derive(Clone, Debug)]
pub struct ObservationSet {
    pub grid: TimeGrid,
    /// Measured values, one row per grid point (N x d).
    pub observations: Array2<f64>,
    /// True where the corresponding entry was observed.
    pub mask: Array2<bool>,
    /// Provenance: system name, noise variance, seed, masking counts.
    pub metadata: BTreeMap<String, String>,
}

impl ObservationSet {
    pub fn new(
        grid: TimeGrid,
        observations: Array2<f64>,
        mask: Array2<bool>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        if observations.nrows() != grid.len() || mask.shape() != observations.shape() {
            return Err(Error::dim(
                "ObservationSet",
                format!("{} rows, values and mask aligned", grid.len()),
                format!("{:?} values, {:?} mask", observations.shape(), mask.shape()),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyData("observation set has no observed entries".into()));
        }
        Ok(ObservationSet { grid, observations, mask, metadata })
    }

    pub fn n(&self) -> usize {
        self.observations.nrows()
    }

    pub fn d(&self) -> usize {
        self.observations.ncols()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

// ======================= dynamical systems =======================

/// A named autonomous ODE system usable as a data generator.
pub trait DynamicalSystem {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn field(&self, x: ArrayView1<f64>) -> Array1<f64>;
    /// Initial state used by the standard benchmark protocol.
    fn default_x0(&self) -> Array1<f64>;
}

/// Van der Pol oscillator with damping coefficient 0.5.
pub fn vdp_field(x: ArrayView1<f64>) -> Array1<f64> {
    debug_assert_eq!(x.len(), 2);
    let (x1, x2) = (x[0], x[1]);
    ndarray::arr1(&[x2, -x1 + 0.5 * x2 * (1.0 - x1 * x1)])
}

/// FitzHugh-Nagumo oscillator.
pub fn fhn_field(x: ArrayView1<f64>) -> Array1<f64> {
    debug_assert_eq!(x.len(), 2);
    let (x1, x2) = (x[0], x[1]);
    ndarray::arr1(&[
        3.0 * (x1 - x1 * x1 * x1 / 3.0 + x2),
        (0.2 - 3.0 * x1 - 0.2 * x2) / 3.0,
    ])
}

/// Van der Pol benchmark system.
pub struct VanDerPol;

impl DynamicalSystem for VanDerPol {
    fn name(&self) -> &'static str {
        "vdp"
    }

    fn dim(&self) -> usize {
        2
    }

    fn field(&self, x: ArrayView1<f64>) -> Array1<f64> {
        vdp_field(x)
    }

    fn default_x0(&self) -> Array1<f64> {
        ndarray::arr1(&[-1.5, 2.5])
    }
}

/// FitzHugh-Nagumo benchmark system.
pub struct FitzHughNagumo;

impl DynamicalSystem for FitzHughNagumo {
    fn name(&self) -> &'static str {
        "fhn"
    }

    fn dim(&self) -> usize {
        2
    }

    fn field(&self, x: ArrayView1<f64>) -> Array1<f64> {
        fhn_field(x)
    }

    fn default_x0(&self) -> Array1<f64> {
        ndarray::arr1(&[-1.0, 1.0])
    }
}

/// Names accepted by [`system_by_name`].
pub const KNOWN_SYSTEMS: &[&str] = &["vdp", "fhn"];

/// Look up a benchmark system by its registered name.
pub fn system_by_name(name: &str) -> Result<Box<dyn DynamicalSystem>> {
    match name {
        "vdp" => Ok(Box::new(VanDerPol)),
        "fhn" => Ok(Box::new(FitzHughNagumo)),
        _ => Err(Error::UnknownName {
            kind: "system",
            name: name.to_string(),
            known: KNOWN_SYSTEMS.join(", "),
        }),
    }
}

// ======================= simulation =======================

/// Integrate the true system on a fine grid and corrupt it with isotropic
/// Gaussian noise. The truth trajectory carries [`TRUTH_SUBSTEPS`] substeps;
/// the observation set keeps the caller's grid untouched.
pub fn simulate(
    system: &dyn DynamicalSystem,
    x0: ArrayView1<f64>,
    grid: &TimeGrid,
    noise_var: f64,
    rng: &mut impl Rng,
) -> Result<(Trajectory, ObservationSet)> {
    if x0.len() != system.dim() {
        return Err(Error::dim("simulate", format!("{}", system.dim()), format!("{}", x0.len())));
    }
    if !(noise_var >= 0.0) || !noise_var.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise variance must be finite and non-negative, got {noise_var}"
        )));
    }
    let truth_grid = TimeGrid::new(grid.times().to_vec(), TRUTH_SUBSTEPS)?;
    let truth = rk4_integrate(|x| Ok(system.field(x)), x0, &truth_grid)?;

    let sigma = noise_var.sqrt();
    let mut observations = truth.states.clone();
    for v in observations.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += sigma * z;
    }
    let mask = Array2::from_elem(observations.raw_dim(), true);
    let mut metadata = BTreeMap::new();
    metadata.insert("system".to_string(), system.name().to_string());
    metadata.insert("noise_var".to_string(), format!("{noise_var}"));
    let obs = ObservationSet::new(grid.clone(), observations, mask, metadata)?;
    Ok((truth, obs))
}

// ======================= grids =======================

/// Spacing protocol for observation times.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridKind {
    Regular,
    IrregularUniform,
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(GridKind::Regular),
            "irregular-uniform" => Ok(GridKind::IrregularUniform),
            _ => Err(Error::UnknownName {
                kind: "grid kind",
                name: s.to_string(),
                known: "regular, irregular-uniform".to_string(),
            }),
        }
    }
}

/// Build an observation grid: equispaced, or sorted uniform draws with both
/// endpoints pinned.
pub fn make_grid(
    kind: GridKind,
    n: usize,
    t_start: f64,
    t_end: f64,
    substeps: usize,
    rng: &mut impl Rng,
) -> Result<TimeGrid> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("grid needs at least 2 points, got {n}")));
    }
    if !(t_end > t_start) {
        return Err(Error::InvalidParameter(format!(
            "grid interval [{t_start}, {t_end}] is empty"
        )));
    }
    let times = match kind {
        GridKind::Regular => {
            let mut times: Vec<f64> = (0..n)
                .map(|i| t_start + (t_end - t_start) * i as f64 / (n - 1) as f64)
                .collect();
            times[n - 1] = t_end;
            times
        }
        GridKind::IrregularUniform => loop {
            let mut times = Vec::with_capacity(n);
            times.push(t_start);
            for _ in 0..n - 2 {
                times.push(rng.gen_range(t_start..t_end));
            }
            times.push(t_end);
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // Coincident draws are vanishingly rare; redraw rather than error.
            if times.windows(2).all(|w| w[1] > w[0]) {
                break times;
            }
        },
    };
    TimeGrid::new(times, substeps)
}

// ======================= masking =======================

/// Hide every observation row whose value vector satisfies the predicate.
/// Values are kept (only the mask changes); the number of newly hidden rows
/// is recorded under the `masked_rows` metadata key.
pub fn mask_region<P>(obs: &ObservationSet, predicate: P) -> Result<ObservationSet>
where
    P: Fn(ArrayView1<f64>) -> bool,
{
    let mut masked = obs.clone();
    let mut hidden_rows = 0usize;
    for i in 0..obs.n() {
        if predicate(obs.observations.row(i)) {
            let previously_visible = masked.mask.row(i).iter().any(|&m| m);
            masked.mask.row_mut(i).fill(false);
            if previously_visible {
                hidden_rows += 1;
            }
        }
    }
    if !masked.mask.iter().any(|&m| m) {
        return Err(Error::EmptyData("masking removed every observation".into()));
    }
    masked
        .metadata
        .insert("masked_rows".to_string(), hidden_rows.to_string());
    Ok(masked)
}

// ======================= PCA =======================

/// Linear map onto the top principal components of a training matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcaMap {
    /// Column means of the training data (length d_obs).
    pub mean: Array1<f64>,
    /// Orthonormal component rows (k x d_obs).
    pub components: Array2<f64>,
}

impl PcaMap {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn d_obs(&self) -> usize {
        self.components.ncols()
    }
}

/// Fit a k-component PCA map: components are the top right singular vectors
/// of the centered data, computed from the covariance by Jacobi rotation.
pub fn pca_fit(data: ArrayView2<f64>, k: usize) -> Result<PcaMap> {
    let (n, d) = (data.nrows(), data.ncols());
    if k == 0 || k > d.min(n) {
        return Err(Error::InvalidParameter(format!(
            "latent dimension {k} out of range for {n} x {d} data"
        )));
    }
    let mean = data.mean_axis(ndarray::Axis(0)).expect("n >= 1");
    let centered = &data - &mean.view().insert_axis(ndarray::Axis(0));
    let scatter = centered.t().dot(&centered);
    let (values, vectors) = jacobi_eigh(&scatter)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    let mut components = Array2::zeros((k, d));
    for (row, &idx) in order.iter().take(k).enumerate() {
        components.row_mut(row).assign(&vectors.column(idx));
    }
    Ok(PcaMap { mean, components })
}

/// Project rows into latent coordinates: (x - mean) . components^T.
pub fn pca_project(map: &PcaMap, data: ArrayView2<f64>) -> Array2<f64> {
    let centered = &data - &map.mean.view().insert_axis(ndarray::Axis(0));
    centered.dot(&map.components.t())
}

/// Lift latent rows back to observation space: z . components + mean.
pub fn pca_invert(map: &PcaMap, latent: ArrayView2<f64>) -> Array2<f64> {
    latent.dot(&map.components) + &map.mean.view().insert_axis(ndarray::Axis(0))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvector columns), unordered.
fn jacobi_eigh(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let d = a.nrows();
    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(d);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| (p + 1..d).map(move |q| (p, q)))
            .map(|(p, q)| m[[p, q]] * m[[p, q]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-14 * scale {
            let values = Array1::from_iter((0..d).map(|i| m[[i, i]]));
            return Ok((values, v));
        }
        for p in 0..d - 1 {
            for q in p + 1..d {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let (mip, miq) = (m[[i, p]], m[[i, q]]);
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for j in 0..d {
                    let (mpj, mqj) = (m[[p, j]], m[[q, j]]);
                    m[[p, j]] = c * mpj - s * mqj;
                    m[[q, j]] = s * mpj + c * mqj;
                }
                for i in 0..d {
                    let (vip, viq) = (v[[i, p]], v[[i, q]]);
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    Err(Error::Numerics("Jacobi eigendecomposition did not converge".into()))
}

/// Random linear isometry from a low-dimensional space into a higher one:
/// d_high x d_low with orthonormal columns, built by Gram-Schmidt on
/// standard normal draws.
pub fn orthonormal_embedding(
    d_high: usize,
    d_low: usize,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    if d_low == 0 || d_low > d_high {
        return Err(Error::InvalidParameter(format!(
            "embedding dimensions {d_high} x {d_low} are not a lift"
        )));
    }
    let mut w: Array2<f64> = Array2::zeros((d_high, d_low));
    let mut col = 0;
    while col < d_low {
        let mut candidate = Array1::from_iter((0..d_high).map(|_| rng.sample::<f64, _>(StandardNormal)));
        for j in 0..col {
            let proj = candidate.dot(&w.column(j));
            candidate = candidate - proj * &w.column(j).to_owned();
        }
        let norm = candidate.dot(&candidate).sqrt();
        if norm < 1e-8 {
            continue;
        }
        w.column_mut(col).assign(&(candidate / norm));
        col += 1;
    }
    Ok(w)
}

// ======================= CSV =======================

/// Metadata key reserved for the grid's substep count.
const SUBSTEPS_KEY: &str = "substeps";

/// Write an observation set as CSV: `# key=value` metadata lines, a
/// `t,y1..yd[,m1..md]` header, and values at 17 significant digits. Mask
/// columns appear only when some entry is hidden.
pub fn save_csv(obs: &ObservationSet, path: impl AsRef<Path>) -> Result<()> {
    let d = obs.d();
    let any_masked = obs.mask.iter().any(|&m| !m);
    let mut out = String::new();
    for (key, value) in &obs.metadata {
        if key != SUBSTEPS_KEY {
            writeln!(out, "# {key}={value}").expect("string write");
        }
    }
    writeln!(out, "# {SUBSTEPS_KEY}={}", obs.grid.substeps()).expect("string write");
    out.push('t');
    for j in 1..=d {
        write!(out, ",y{j}").expect("string write");
    }
    if any_masked {
        for j in 1..=d {
            write!(out, ",m{j}").expect("string write");
        }
    }
    out.push('\n');
    for i in 0..obs.n() {
        write!(out, "{:.16e}", obs.grid.times()[i]).expect("string write");
        for j in 0..d {
            write!(out, ",{:.16e}", obs.observations[[i, j]]).expect("string write");
        }
        if any_masked {
            for j in 0..d {
                write!(out, ",{}", u8::from(obs.mask[[i, j]])).expect("string write");
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn csv_err(line: u64, msg: impl Into<String>) -> Error {
    Error::CsvParse { line: line as usize, msg: msg.into() }
}

/// Read an observation set saved by [`save_csv`] or hand-written in the same
/// format. Empty value cells are read as masked (stored as 0).
pub fn load_csv(path: impl AsRef<Path>) -> Result<ObservationSet> {
    let raw = std::fs::read_to_string(&path)?;
    let mut metadata = BTreeMap::new();
    for line in raw.lines() {
        let Some(rest) = line.strip_prefix('#') else { continue };
        if let Some((key, value)) = rest.split_once('=') {
            metadata.insert(key.trim().to_string(), value.trim().to_string());
        }
    }
    let substeps = match metadata.remove(SUBSTEPS_KEY) {
        Some(s) => s
            .parse::<usize>()
            .map_err(|_| csv_err(0, format!("invalid {SUBSTEPS_KEY} value: {s}")))?,
        None => crate::dynamics::SUBSTEPS_SIMULATED,
    };

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .has_headers(true)
        .from_reader(raw.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .clone();
    let fields: Vec<&str> = headers.iter().collect();
    if fields.first() != Some(&"t") {
        return Err(csv_err(1, format!("header must start with 't', got {fields:?}")));
    }
    let mut d = 0usize;
    while d + 1 < fields.len() && fields[d + 1] == format!("y{}", d + 1) {
        d += 1;
    }
    if d == 0 {
        return Err(csv_err(1, "header has no y1..yd value columns".to_string()));
    }
    let has_mask = fields.len() > 1 + d;
    let expected_mask: Vec<String> = (1..=d).map(|j| format!("m{j}")).collect();
    if has_mask && fields[1 + d..] != expected_mask[..] {
        return Err(csv_err(1, format!("columns after y{d} must be m1..m{d}, got {fields:?}")));
    }

    let mut times = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse = |field: &str, what: &str| -> Result<f64> {
            field
                .parse::<f64>()
                .map_err(|_| csv_err(line, format!("invalid {what}: {field:?}")))
        };
        let t = parse(&record[0], "time")?;
        if let Some(&prev) = times.last() {
            if !(t > prev) {
                return Err(csv_err(line, format!("time {t} does not increase past {prev}")));
            }
        }
        times.push(t);
        for j in 0..d {
            let cell = &record[1 + j];
            let observed_flag = if has_mask {
                match &record[1 + d + j] {
                    "1" => true,
                    "0" => false,
                    other => return Err(csv_err(line, format!("mask cell must be 0 or 1, got {other:?}"))),
                }
            } else {
                true
            };
            if cell.is_empty() {
                values.push(0.0);
                mask.push(false);
            } else {
                values.push(parse(cell, "value")?);
                mask.push(observed_flag);
            }
        }
    }

    let n = times.len();
    let grid = TimeGrid::new(times, substeps)?;
    let observations = Array2::from_shape_vec((n, d), values).expect("rectangular by construction");
    let mask = Array2::from_shape_vec((n, d), mask).expect("rectangular by construction");
    ObservationSet::new(grid, observations, mask, metadata)
}
