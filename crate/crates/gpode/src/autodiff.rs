//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The evidence lower bound is a scalar function of a few thousand parameters,
//! evaluated through Cholesky factors, triangular solves, planar flows, and an
//! unrolled Runge-Kutta integration. Gradients are obtained by recording every
//! operation on a tape and sweeping it backwards. Most nodes are plain scalar
//! arithmetic; the inner loops of the vector-field evaluation are fused into
//! wide nodes (`Dot`, `SqExpDot`, `RffDot`) so that one tape node covers an
//! entire kernel row or Fourier feature expansion. Fused nodes recompute their
//! cheap intermediates during the backward sweep instead of storing them.
//!
//! Conventions: `Var` is an index into the tape; the tape grows monotonically
//! and can be truncated back to a checkpoint (used to discard the partial
//! graph of a diverged Monte-Carlo sample). Gradients accumulate, so a node
//! feeding several consumers receives the sum of its downstream sensitivities.

use ndarray::{Array1, Array2};

/// Handle to a tape node. `Default` yields the first node's handle and is
/// only meant as a placeholder before assignment.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub struct Var(u32);

impl Var {
    #[inline]
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Range of indices into the tape's argument arena.
#[derive(Copy, Clone, Debug)]
struct ArgSpan {
    start: u32,
    len: u32,
}

impl ArgSpan {
    #[inline]
    fn range(self) -> std::ops::Range<usize> {
        self.start as usize..(self.start + self.len) as usize
    }
}

/// Constant data shared by all `RffDot` nodes of one Fourier basis: unit
/// frequency draws (B x d), phases (B), and per-sample weight draws (B x d_out).
#[derive(Debug)]
pub struct RffData {
    pub eps: Array2<f64>,
    pub phases: Array1<f64>,
    pub weights: Array2<f64>,
}

#[derive(Copy, Clone, Debug)]
enum Op {
    /// Differentiable input.
    Input,
    /// Constant; receives no gradient.
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Tanh(Var),
    /// ln(1 + e^x), evaluated in the overflow-safe form.
    Softplus(Var),
    AddConst(Var),
    MulConst(Var, f64),
    Sum(ArgSpan),
    /// sum_i a_i * b_i.
    Dot(ArgSpan, ArgSpan),
    /// sum_i a_i^2.
    SumSq(ArgSpan),
    /// s2 * exp(-1/2 * sum_j ((x_j - z_j) * il_j)^2); `x`, `z`, `il` have equal length.
    SqExp {
        x: ArgSpan,
        z: ArgSpan,
        il: ArgSpan,
        s2: Var,
    },
    /// sum_i c_i * s2 * exp(-1/2 * sum_j ((x_j - z_ij) * il_j)^2),
    /// with `z` an M x d row-major block and `c` of length M.
    SqExpDot {
        x: ArgSpan,
        z: ArgSpan,
        il: ArgSpan,
        s2: Var,
        c: ArgSpan,
    },
    /// amp * sum_b weights[b, col] * cos(sum_j eps[b, j] * x_j + phases[b]),
    /// reading eps/phases/weights from the payload at `data`. `x` is the
    /// lengthscale-scaled state, so the payload stays constant under
    /// kernel-parameter changes.
    RffDot {
        x: ArgSpan,
        amp: Var,
        data: u32,
        col: u32,
    },
}

#[derive(Copy, Clone, Debug)]
struct Node {
    value: f64,
    grad: f64,
    op: Op,
}

/// Snapshot of tape extents, for truncating back after a discarded sample.
#[derive(Copy, Clone, Debug)]
pub struct TapeMark {
    nodes: usize,
    args: usize,
    payloads: usize,
}

/// Flat recording of a scalar computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    args: Vec<u32>,
    payloads: Vec<RffData>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(nodes),
            args: Vec::with_capacity(nodes),
            payloads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark {
            nodes: self.nodes.len(),
            args: self.args.len(),
            payloads: self.payloads.len(),
        }
    }

    /// Discard everything recorded after `mark`.
    pub fn truncate(&mut self, mark: TapeMark) {
        self.nodes.truncate(mark.nodes);
        self.args.truncate(mark.args);
        self.payloads.truncate(mark.payloads);
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.idx()].value
    }

    pub fn grad(&self, v: Var) -> f64 {
        self.nodes[v.idx()].grad
    }

    #[inline]
    fn push(&mut self, value: f64, op: Op) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            grad: 0.0,
            op,
        });
        Var(id)
    }

    fn span(&mut self, vars: &[Var]) -> ArgSpan {
        let start = self.args.len() as u32;
        self.args.extend(vars.iter().map(|v| v.0));
        ArgSpan {
            start,
            len: vars.len() as u32,
        }
    }

    /// Register a differentiable input.
    pub fn input(&mut self, value: f64) -> Var {
        self.push(value, Op::Input)
    }

    /// Register a constant (no gradient).
    pub fn constant(&mut self, value: f64) -> Var {
        self.push(value, Op::Const)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).ln();
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).sqrt();
        self.push(v, Op::Sqrt(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.push(v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = softplus(self.value(a));
        self.push(v, Op::Softplus(a))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v: f64 = xs.iter().map(|x| self.value(*x)).sum();
        let span = self.span(xs);
        self.push(v, Op::Sum(span))
    }

    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot: length mismatch");
        let v: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| self.value(*x) * self.value(*y))
            .sum();
        let sa = self.span(a);
        let sb = self.span(b);
        self.push(v, Op::Dot(sa, sb))
    }

    pub fn sum_sq(&mut self, xs: &[Var]) -> Var {
        let v: f64 = xs.iter().map(|x| self.value(*x) * self.value(*x)).sum();
        let span = self.span(xs);
        self.push(v, Op::SumSq(span))
    }

    /// Squared-exponential kernel value between the points held in `x` and `z`,
    /// with inverse lengthscales `il` and signal variance `s2`.
    pub fn sq_exp(&mut self, x: &[Var], z: &[Var], il: &[Var], s2: Var) -> Var {
        assert!(x.len() == z.len() && x.len() == il.len(), "sq_exp: length mismatch");
        let mut q = 0.0;
        for j in 0..x.len() {
            let t = (self.value(x[j]) - self.value(z[j])) * self.value(il[j]);
            q += t * t;
        }
        let v = self.value(s2) * (-0.5 * q).exp();
        let sx = self.span(x);
        let sz = self.span(z);
        let sil = self.span(il);
        self.push(v, Op::SqExp { x: sx, z: sz, il: sil, s2 })
    }

    /// Kernel-row dot product: sum_i c_i * k(x, z_i) over the M rows stored
    /// row-major in `z`.
    pub fn sq_exp_dot(&mut self, x: &[Var], z: &[Var], il: &[Var], s2: Var, c: &[Var]) -> Var {
        let d = x.len();
        assert_eq!(il.len(), d, "sq_exp_dot: lengthscale length mismatch");
        assert_eq!(z.len(), c.len() * d, "sq_exp_dot: z block shape mismatch");
        let s2v = self.value(s2);
        let mut acc = 0.0;
        for i in 0..c.len() {
            let mut q = 0.0;
            for j in 0..d {
                let t = (self.value(x[j]) - self.value(z[i * d + j])) * self.value(il[j]);
                q += t * t;
            }
            acc += self.value(c[i]) * s2v * (-0.5 * q).exp();
        }
        let sx = self.span(x);
        let sz = self.span(z);
        let sil = self.span(il);
        let sc = self.span(c);
        self.push(
            acc,
            Op::SqExpDot {
                x: sx,
                z: sz,
                il: sil,
                s2,
                c: sc,
            },
        )
    }

    /// Register a Fourier payload; `RffDot` nodes reference it by index.
    pub fn rff_data(&mut self, data: RffData) -> u32 {
        let id = self.payloads.len() as u32;
        self.payloads.push(data);
        id
    }

    /// Weighted Fourier feature expansion for output column `col`:
    /// amp * sum_b weights[b, col] * cos(eps[b, :] . x + phases[b]).
    /// `x` must already be scaled by the inverse lengthscales.
    pub fn rff_dot(&mut self, x: &[Var], amp: Var, data: u32, col: u32) -> Var {
        let payload = &self.payloads[data as usize];
        let b = payload.eps.nrows();
        assert_eq!(payload.eps.ncols(), x.len(), "rff_dot: dimension mismatch");
        let mut acc = 0.0;
        for bi in 0..b {
            let mut a = payload.phases[bi];
            for j in 0..x.len() {
                a += payload.eps[[bi, j]] * self.nodes[x[j].idx()].value;
            }
            acc += payload.weights[[bi, col as usize]] * a.cos();
        }
        let v = self.value(amp) * acc;
        let sx = self.span(x);
        self.push(v, Op::RffDot { x: sx, amp, data, col })
    }

    /// Reverse sweep from `out`; call `grad` afterwards to read sensitivities.
    /// Clears previous gradients first.
    pub fn backward(&mut self, out: Var) {
        for node in &mut self.nodes {
            node.grad = 0.0;
        }
        self.nodes[out.idx()].grad = 1.0;

        let Tape {
            nodes,
            args,
            payloads,
        } = self;

        for i in (0..nodes.len()).rev() {
            let Node { value, grad, op } = nodes[i];
            if grad == 0.0 {
                continue;
            }
            match op {
                Op::Input | Op::Const => {}
                Op::Add(a, b) => {
                    nodes[a.idx()].grad += grad;
                    nodes[b.idx()].grad += grad;
                }
                Op::Sub(a, b) => {
                    nodes[a.idx()].grad += grad;
                    nodes[b.idx()].grad -= grad;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.idx()].value, nodes[b.idx()].value);
                    nodes[a.idx()].grad += grad * vb;
                    nodes[b.idx()].grad += grad * va;
                }
                Op::Div(a, b) => {
                    let vb = nodes[b.idx()].value;
                    nodes[a.idx()].grad += grad / vb;
                    nodes[b.idx()].grad -= grad * value / vb;
                }
                Op::Neg(a) => nodes[a.idx()].grad -= grad,
                Op::Exp(a) => nodes[a.idx()].grad += grad * value,
                Op::Ln(a) => nodes[a.idx()].grad += grad / nodes[a.idx()].value,
                Op::Sqrt(a) => nodes[a.idx()].grad += grad * 0.5 / value,
                Op::Tanh(a) => nodes[a.idx()].grad += grad * (1.0 - value * value),
                Op::Softplus(a) => {
                    let va = nodes[a.idx()].value;
                    nodes[a.idx()].grad += grad * sigmoid(va);
                }
                Op::AddConst(a) => nodes[a.idx()].grad += grad,
                Op::MulConst(a, c) => nodes[a.idx()].grad += grad * c,
                Op::Sum(span) => {
                    for k in span.range() {
                        nodes[args[k] as usize].grad += grad;
                    }
                }
                Op::Dot(sa, sb) => {
                    let (ra, rb) = (sa.range(), sb.range());
                    for (ka, kb) in ra.zip(rb) {
                        let (ia, ib) = (args[ka] as usize, args[kb] as usize);
                        let (va, vb) = (nodes[ia].value, nodes[ib].value);
                        nodes[ia].grad += grad * vb;
                        nodes[ib].grad += grad * va;
                    }
                }
                Op::SumSq(span) => {
                    for k in span.range() {
                        let ia = args[k] as usize;
                        nodes[ia].grad += grad * 2.0 * nodes[ia].value;
                    }
                }
                Op::SqExp { x, z, il, s2 } => {
                    let d = x.len as usize;
                    let e = value / nodes[s2.idx()].value.max(f64::MIN_POSITIVE);
                    nodes[s2.idx()].grad += grad * e;
                    for j in 0..d {
                        let ix = args[x.start as usize + j] as usize;
                        let iz = args[z.start as usize + j] as usize;
                        let iil = args[il.start as usize + j] as usize;
                        let dx = nodes[ix].value - nodes[iz].value;
                        let ilv = nodes[iil].value;
                        let gxz = grad * value * dx * ilv * ilv;
                        nodes[ix].grad -= gxz;
                        nodes[iz].grad += gxz;
                        nodes[iil].grad -= grad * value * dx * dx * ilv;
                    }
                }
                Op::SqExpDot { x, z, il, s2, c } => {
                    let d = x.len as usize;
                    let m = c.len as usize;
                    let s2v = nodes[s2.idx()].value;
                    for ri in 0..m {
                        let mut q = 0.0;
                        for j in 0..d {
                            let ix = args[x.start as usize + j] as usize;
                            let iz = args[z.start as usize + ri * d + j] as usize;
                            let iil = args[il.start as usize + j] as usize;
                            let t = (nodes[ix].value - nodes[iz].value) * nodes[iil].value;
                            q += t * t;
                        }
                        let e = (-0.5 * q).exp();
                        let k = s2v * e;
                        let ic = args[c.start as usize + ri] as usize;
                        let cv = nodes[ic].value;
                        nodes[ic].grad += grad * k;
                        nodes[s2.idx()].grad += grad * cv * e;
                        let gk = grad * cv * k;
                        for j in 0..d {
                            let ix = args[x.start as usize + j] as usize;
                            let iz = args[z.start as usize + ri * d + j] as usize;
                            let iil = args[il.start as usize + j] as usize;
                            let dx = nodes[ix].value - nodes[iz].value;
                            let ilv = nodes[iil].value;
                            nodes[ix].grad -= gk * dx * ilv * ilv;
                            nodes[iz].grad += gk * dx * ilv * ilv;
                            nodes[iil].grad -= gk * dx * dx * ilv;
                        }
                    }
                }
                Op::RffDot { x, amp, data, col } => {
                    let payload = &payloads[data as usize];
                    let b = payload.eps.nrows();
                    let d = x.len as usize;
                    let ampv = nodes[amp.idx()].value;
                    nodes[amp.idx()].grad += grad * value / ampv;
                    let ga = grad * ampv;
                    for bi in 0..b {
                        let mut a = payload.phases[bi];
                        for j in 0..d {
                            let ix = args[x.start as usize + j] as usize;
                            a += payload.eps[[bi, j]] * nodes[ix].value;
                        }
                        let w = payload.weights[[bi, col as usize]];
                        let s = -a.sin() * w * ga;
                        for j in 0..d {
                            let ix = args[x.start as usize + j] as usize;
                            nodes[ix].grad += s * payload.eps[[bi, j]];
                        }
                    }
                }
            }
        }
    }
}

/// Overflow-safe ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, the derivative of `softplus`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
