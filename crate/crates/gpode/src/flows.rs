//! Planar normalizing flows: invertible maps g(x) = x + u_hat * tanh(w.x + b)
//! with a closed-form log Jacobian determinant.
//!
//! The raw coefficient u is re-parameterized before use as
//! u_hat = u + (m(w.u) - w.u) * w / ||w||^2, with m(a) = -1 + ln(1 + e^a),
//! which forces w.u_hat = m(w.u) > -1 and makes the layer a bijection.
//! The log-determinant is ln|1 + u_hat . psi(x)| with
//! psi(x) = (1 - tanh^2(w.x + b)) * w.
//!
//! One [`FlowStack`] type serves both roles in the model: the prior stack
//! warping vector-field outputs and the posterior stack warping inducing
//! outputs. A depth-zero stack is the identity map with zero log-determinant.

use crate::autodiff::{softplus, Tape, Var};
use crate::error::{Error, Result};
use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Smallest ||w||^2 the constraint will divide by.
const DEGENERATE_NORM_SQ: f64 = 1e-24;
/// Hard cap on bisection iterations per layer inversion.
const MAX_BISECT_ITERS: usize = 200;

/// One planar layer, stored with the raw (unconstrained) coefficient `u`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanarLayer {
    pub u: Array1<f64>,
    pub w: Array1<f64>,
    pub b: f64,
}

impl PlanarLayer {
    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

/// Ordered stack of planar layers over a fixed dimension.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowStack {
    dim: usize,
    layers: Vec<PlanarLayer>,
}

impl FlowStack {
    /// Identity flow (zero layers).
    pub fn identity(dim: usize) -> Self {
        FlowStack { dim, layers: Vec::new() }
    }

    /// `depth` layers initialized at the identity: w ~ N(0, 0.1^2 I), b = 0,
    /// and u = ln(e-1) w/||w||^2, the raw value the invertibility constraint
    /// maps to u_hat = 0. A fresh stack is therefore the identity map (to
    /// machine precision), so training starts from the flowless baseline and
    /// moves away smoothly.
    pub fn init(dim: usize, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("flow dimension must be positive".into()));
        }
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let shift = (std::f64::consts::E - 1.0).ln();
        let layers = (0..depth)
            .map(|_| {
                let w = Array1::from_shape_fn(dim, |_| normal.sample(rng));
                let norm_sq: f64 = w.iter().map(|v| v * v).sum();
                let u = &w * (shift / norm_sq.max(DEGENERATE_NORM_SQ));
                PlanarLayer { u, w, b: 0.0 }
            })
            .collect();
        Ok(FlowStack { dim, layers })
    }

    pub fn from_layers(dim: usize, layers: Vec<PlanarLayer>) -> Result<Self> {
        if layers.iter().any(|l| l.u.len() != dim || l.w.len() != dim) {
            return Err(Error::dim(
                "FlowStack::from_layers",
                format!("all layers of dimension {dim}"),
                "mixed layer dimensions".to_string(),
            ));
        }
        Ok(FlowStack { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[PlanarLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [PlanarLayer] {
        &mut self.layers
    }
}

/// Result of pushing a point through a layer or stack.
#[derive(Clone, Debug)]
pub struct FlowEval {
    pub y: Array1<f64>,
    pub log_det: f64,
}

/// Apply the invertibility constraint, returning a layer whose `u` holds
/// u_hat. Errors when ||w|| is numerically zero.
pub fn planar_constrain(layer: &PlanarLayer) -> Result<PlanarLayer> {
    if layer.u.len() != layer.w.len() {
        return Err(Error::dim(
            "planar_constrain",
            format!("{}", layer.w.len()),
            format!("{}", layer.u.len()),
        ));
    }
    let norm_sq: f64 = layer.w.iter().map(|v| v * v).sum();
    if norm_sq < DEGENERATE_NORM_SQ {
        return Err(Error::DegenerateLayer { norm: norm_sq.sqrt() });
    }
    let wu: f64 = layer.w.iter().zip(layer.u.iter()).map(|(a, b)| a * b).sum();
    let m = softplus(wu) - 1.0;
    let coef = (m - wu) / norm_sq;
    let u_hat = &layer.u + &(&layer.w * coef);
    Ok(PlanarLayer {
        u: u_hat,
        w: layer.w.clone(),
        b: layer.b,
    })
}

/// Forward map and log-determinant of one *constrained* layer (its `u` must
/// already hold u_hat, e.g. from [`planar_constrain`]).
pub fn planar_forward(layer: &PlanarLayer, x: ArrayView1<f64>) -> Result<FlowEval> {
    let d = layer.dim();
    if x.len() != d {
        return Err(Error::dim("planar_forward", format!("{d}"), format!("{}", x.len())));
    }
    let a: f64 = layer.w.iter().zip(x.iter()).map(|(w, x)| w * x).sum::<f64>() + layer.b;
    let t = a.tanh();
    let y = &x.to_owned() + &(&layer.u * t);
    let w_dot_u: f64 = layer.w.iter().zip(layer.u.iter()).map(|(a, b)| a * b).sum();
    let log_det = (1.0 + (1.0 - t * t) * w_dot_u).abs().ln();
    Ok(FlowEval { y, log_det })
}

/// Compose the stack in order, constraining each layer on the fly and
/// accumulating log-determinants. Depth zero returns the input unchanged
/// with log_det = 0.
pub fn stack_forward(stack: &FlowStack, x: ArrayView1<f64>) -> Result<FlowEval> {
    if x.len() != stack.dim {
        return Err(Error::dim(
            "stack_forward",
            format!("{}", stack.dim),
            format!("{}", x.len()),
        ));
    }
    let mut y = x.to_owned();
    let mut log_det = 0.0;
    for layer in &stack.layers {
        let constrained = planar_constrain(layer)?;
        let eval = planar_forward(&constrained, y.view())?;
        y = eval.y;
        log_det += eval.log_det;
    }
    Ok(FlowEval { y, log_det })
}

/// Invert one constrained layer by bisection on the monotone scalar equation
/// a + (w.u_hat) tanh(a + b) = w.y in a = w.x.
fn planar_invert(layer: &PlanarLayer, y: ArrayView1<f64>, tol: f64) -> Result<Array1<f64>> {
    let c: f64 = layer.w.iter().zip(layer.u.iter()).map(|(a, b)| a * b).sum();
    let target: f64 = layer.w.iter().zip(y.iter()).map(|(w, y)| w * y).sum();
    let mut lo = target - c.abs() - 1e-9;
    let mut hi = target + c.abs() + 1e-9;
    let g = |a: f64| a + c * (a + layer.b).tanh() - target;
    let mut iters = 0;
    while hi - lo > 1e-15 * (1.0 + target.abs()) && iters < MAX_BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        iters += 1;
    }
    let a = 0.5 * (lo + hi);
    let x = &y.to_owned() - &(&layer.u * (a + layer.b).tanh());
    // Verify against the forward map; bisection stagnation shows up here.
    let fwd = planar_forward(layer, x.view())?;
    let residual = (&fwd.y - &y.to_owned())
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if residual > tol {
        return Err(Error::InversionFailed { residual, tol });
    }
    Ok(x)
}

/// Invert the whole stack back to front. The post-condition
/// ||forward(result) - y|| <= tol is verified layer by layer.
pub fn stack_inverse(stack: &FlowStack, y: ArrayView1<f64>, tol: f64) -> Result<Array1<f64>> {
    if y.len() != stack.dim {
        return Err(Error::dim(
            "stack_inverse",
            format!("{}", stack.dim),
            format!("{}", y.len()),
        ));
    }
    let mut x = y.to_owned();
    for layer in stack.layers.iter().rev() {
        let constrained = planar_constrain(layer)?;
        x = planar_invert(&constrained, x.view(), tol)?;
    }
    Ok(x)
}

// ======================= taped twins =======================

pub(crate) mod taped {
    use super::*;

    /// Constrained layer nodes shared by every application within one graph.
    pub struct PlanarVars {
        /// Raw (unconstrained) u inputs, kept for gradient extraction.
        pub u_raw: Vec<Var>,
        pub u_hat: Vec<Var>,
        pub w: Vec<Var>,
        pub b: Var,
        /// w . u_hat, which the constraint makes exactly m(w . u).
        pub w_dot_uhat: Var,
    }

    /// Stack of constrained layers plus the stack's dimension.
    pub struct StackVars {
        pub layers: Vec<PlanarVars>,
        pub dim: usize,
    }

    /// Register a layer's raw parameters as inputs and record the constraint.
    pub fn constrain(tape: &mut Tape, layer: &PlanarLayer) -> Result<PlanarVars> {
        let norm_sq_val: f64 = layer.w.iter().map(|v| v * v).sum();
        if norm_sq_val < DEGENERATE_NORM_SQ {
            return Err(Error::DegenerateLayer {
                norm: norm_sq_val.sqrt(),
            });
        }
        let u: Vec<Var> = layer.u.iter().map(|&v| tape.input(v)).collect();
        let w: Vec<Var> = layer.w.iter().map(|&v| tape.input(v)).collect();
        let b = tape.input(layer.b);
        let norm_sq = tape.sum_sq(&w);
        let wu = tape.dot(&w, &u);
        let sp = tape.softplus(wu);
        let m = tape.add_const(sp, -1.0);
        let diff = tape.sub(m, wu);
        let coef = tape.div(diff, norm_sq);
        let u_hat: Vec<Var> = u
            .iter()
            .zip(&w)
            .map(|(&ui, &wi)| {
                let s = tape.mul(coef, wi);
                tape.add(ui, s)
            })
            .collect();
        Ok(PlanarVars {
            u_raw: u,
            u_hat,
            w,
            b,
            w_dot_uhat: m,
        })
    }

    pub fn stack_vars(tape: &mut Tape, stack: &FlowStack) -> Result<StackVars> {
        let layers = stack
            .layers
            .iter()
            .map(|l| constrain(tape, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(StackVars {
            layers,
            dim: stack.dim,
        })
    }

    /// One layer forward; returns (y, log_det).
    pub fn forward(tape: &mut Tape, pv: &PlanarVars, x: &[Var]) -> (Vec<Var>, Var) {
        let (y, t) = forward_inner(tape, pv, x);
        // 1 + (1 - t^2) (w . u_hat) is strictly positive under the constraint.
        let t_sq = tape.mul(t, t);
        let neg_t_sq = tape.neg(t_sq);
        let one_minus = tape.add_const(neg_t_sq, 1.0);
        let prod = tape.mul(one_minus, pv.w_dot_uhat);
        let arg = tape.add_const(prod, 1.0);
        let log_det = tape.ln(arg);
        (y, log_det)
    }

    /// One layer forward without the log-determinant (vector-field path).
    pub fn forward_y(tape: &mut Tape, pv: &PlanarVars, x: &[Var]) -> Vec<Var> {
        forward_inner(tape, pv, x).0
    }

    fn forward_inner(tape: &mut Tape, pv: &PlanarVars, x: &[Var]) -> (Vec<Var>, Var) {
        debug_assert_eq!(x.len(), pv.w.len());
        let a0 = tape.dot(&pv.w, x);
        let a = tape.add(a0, pv.b);
        let t = tape.tanh(a);
        let y = x
            .iter()
            .zip(&pv.u_hat)
            .map(|(&xi, &ui)| {
                let s = tape.mul(ui, t);
                tape.add(xi, s)
            })
            .collect();
        (y, t)
    }

    /// Whole-stack forward; log-det is `None` for a depth-zero stack so the
    /// zero-depth path adds no tape nodes at all.
    pub fn stack_forward(tape: &mut Tape, sv: &StackVars, x: &[Var]) -> (Vec<Var>, Option<Var>) {
        debug_assert_eq!(x.len(), sv.dim);
        let mut y = x.to_vec();
        let mut log_det: Option<Var> = None;
        for pv in &sv.layers {
            let (ny, ld) = forward(tape, pv, &y);
            y = ny;
            log_det = Some(match log_det {
                None => ld,
                Some(acc) => tape.add(acc, ld),
            });
        }
        (y, log_det)
    }

    /// Whole-stack forward without log-determinants.
    pub fn stack_forward_y(tape: &mut Tape, sv: &StackVars, x: &[Var]) -> Vec<Var> {
        debug_assert_eq!(x.len(), sv.dim);
        let mut y = x.to_vec();
        for pv in &sv.layers {
            y = forward_y(tape, pv, &y);
        }
        y
    }
}
