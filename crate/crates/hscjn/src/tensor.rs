//! Dense-tensor core with reverse-mode automatic differentiation.
//!
//! All values live in a [`Tape`] arena; ops append one node each and
//! [`Var`] handles index into it. A backward sweep walks the nodes in
//! reverse, applying each op's local rule and accumulating gradients
//! additively into every `requires_grad` leaf. Repeated backward calls
//! without [`Tape::zero_grad`] keep accumulating into those leaves.
//!
//! One tape is single-threaded; tensors are immutable once written by
//! their creating op, so read-only sharing of a finished tape (or of
//! parameter arrays) across threads is safe.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar the tape is generic over: f64 in tests and gradient checks,
/// f32 in training runs.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::ops::AddAssign
    + std::iter::Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("value not representable")
    }
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("value not finite")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Plain dense array: parameter storage and tape-free values.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<R: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

impl<R: Real> Array<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "array: shape {:?} does not match {} values",
            shape,
            data.len()
        );
        Array { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array { shape, data: vec![R::zero(); n] }
    }

    pub fn scalar(v: R) -> Self {
        Array { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<R>) -> Self {
        Array { shape: vec![data.len()], data }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Array::new(shape, data.iter().map(|&v| R::of(v)).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a tensor recorded on a tape.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReduceMode {
    Sum,
    Mean,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Broadcast {
    None,
    LhsScalar,
    RhsScalar,
    /// lhs is [r, c], rhs is [c], applied per row.
    RhsRow,
}

#[derive(Clone, Debug)]
enum Op<R: Real> {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Stack { parts: Vec<Var> },
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Affine { x: Var, scale: R },
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    XLogX(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Reduce { x: Var, mode: ReduceMode, axis: Option<usize> },
    Gather { x: Var, idx: Vec<usize> },
    SelectRow { x: Var, row: usize },
    Dropout { x: Var, keep: Vec<bool>, scale: R },
}

/// One node in the tape.
#[derive(Debug)]
pub struct Tensor<R: Real> {
    pub shape: Vec<usize>,
    pub values: Vec<R>,
    pub grad: Option<Vec<R>>,
    pub requires_grad: bool,
    needs_grad: bool,
    op: Op<R>,
}

pub struct Tape<R: Real> {
    nodes: Vec<Tensor<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn debug_check_finite<R: Real>(values: &[R], what: &str) {
    if cfg!(debug_assertions) {
        for &v in values {
            debug_assert!(v.is_finite(), "{what}: non-finite value {v}");
        }
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Position marker for [`Tape::rewind`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop every node recorded after `mark`. Vars handed out since then
    /// are invalidated; earlier ones stay usable.
    pub fn rewind(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<R>, requires_grad: bool, op: Op<R>) -> Var {
        debug_check_finite(&values, "forward");
        let needs_grad = requires_grad
            || match &op {
                Op::Leaf => false,
                _ => self.op_parents(&op).iter().any(|p| self.nodes[p.0].needs_grad),
            };
        self.nodes.push(Tensor { shape, values, grad: None, requires_grad, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn op_parents(&self, op: &Op<R>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatVec(a, b) | Op::Add(a, b, _) | Op::Mul(a, b, _) => {
                vec![*a, *b]
            }
            Op::Concat { parts, .. } | Op::Stack { parts } => parts.clone(),
            Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Affine { x, .. }
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::LogSigmoid(x)
            | Op::XLogX(x)
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Reduce { x, .. }
            | Op::Gather { x, .. }
            | Op::SelectRow { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
        }
    }

    pub fn leaf(&mut self, array: Array<R>, requires_grad: bool) -> Var {
        self.push(array.shape, array.data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, fill: R) -> Var {
        let n = shape.iter().product();
        self.push(shape, vec![fill; n], false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: R) -> Var {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> R {
        assert_eq!(self.nodes[v.0].values.len(), 1, "expected scalar, got shape {:?}", self.shape(v));
        self.nodes[v.0].values[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn tensor(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0]
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: shape mismatch {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = va[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * vb[p * n + j];
                }
            }
        }
        self.push(vec![m, n], out, false, Op::MatMul(a, b))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (sw, sx) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        assert!(
            sw.len() == 2 && sx.len() == 1 && sw[1] == sx[0],
            "matvec: shape mismatch {:?} x {:?}",
            sw,
            sx
        );
        let (m, k) = (sw[0], sw[1]);
        let vw = self.value(w);
        let vx = self.value(x);
        let mut out = vec![R::zero(); m];
        for i in 0..m {
            let mut s = R::zero();
            for p in 0..k {
                s += vw[i * k + p] * vx[p];
            }
            out[i] = s;
        }
        self.push(vec![m], out, false, Op::MatVec(w, x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "transpose: expected rank 2, got {:?}", s);
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push(vec![c, r], out, false, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.value(x).len(),
            "reshape: {:?} incompatible with {:?}",
            self.shape(x),
            shape
        );
        let v = self.value(x).to_vec();
        self.push(shape, v, false, Op::Reshape(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let rank = self.shape(parts[0]).len();
        assert!(axis < rank, "concat: axis {} out of range for rank {}", axis, rank);
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), rank, "concat: mixed ranks {:?} vs {:?}", self.shape(parts[0]), s);
            for d in 0..rank {
                assert!(
                    d == axis || s[d] == self.shape(parts[0])[d],
                    "concat: incompatible shapes {:?} vs {:?} on axis {}",
                    self.shape(parts[0]),
                    s,
                    axis
                );
            }
        }
        match (rank, axis) {
            (1, 0) => {
                let mut out = Vec::new();
                for &p in parts {
                    out.extend_from_slice(self.value(p));
                }
                let n = out.len();
                self.push(vec![n], out, false, Op::Concat { parts: parts.to_vec(), axis })
            }
            (2, 0) => {
                let c = self.shape(parts[0])[1];
                let mut out = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    rows += self.shape(p)[0];
                    out.extend_from_slice(self.value(p));
                }
                self.push(vec![rows, c], out, false, Op::Concat { parts: parts.to_vec(), axis })
            }
            (2, 1) => {
                let r = self.shape(parts[0])[0];
                let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
                let total: usize = widths.iter().sum();
                let mut out = vec![R::zero(); r * total];
                for i in 0..r {
                    let mut off = 0;
                    for (pi, &p) in parts.iter().enumerate() {
                        let w = widths[pi];
                        let v = self.value(p);
                        out[i * total + off..i * total + off + w]
                            .copy_from_slice(&v[i * w..(i + 1) * w]);
                        off += w;
                    }
                }
                self.push(vec![r, total], out, false, Op::Concat { parts: parts.to_vec(), axis })
            }
            _ => panic!("concat: unsupported rank {} axis {}", rank, axis),
        }
    }

    /// Stack 1-D vectors of equal length into a [n, d] matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows: no inputs");
        let d = self.shape(parts[0])[0];
        let mut out = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            let s = self.shape(p);
            assert!(s.len() == 1 && s[0] == d, "stack_rows: expected [{}], got {:?}", d, s);
            out.extend_from_slice(self.value(p));
        }
        self.push(vec![parts.len(), d], out, false, Op::Stack { parts: parts.to_vec() })
    }

    fn broadcast_kind(&self, a: Var, b: Var, what: &str) -> Broadcast {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Broadcast::None
        } else if self.value(a).len() == 1 {
            Broadcast::LhsScalar
        } else if self.value(b).len() == 1 {
            Broadcast::RhsScalar
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            Broadcast::RhsRow
        } else {
            panic!("{what}: shapes {:?} and {:?} are not broadcast-compatible", sa, sb)
        }
    }

    fn binary_values(&self, a: Var, b: Var, bc: Broadcast, f: impl Fn(R, R) -> R) -> (Vec<usize>, Vec<R>) {
        let va = self.value(a);
        let vb = self.value(b);
        match bc {
            Broadcast::None => (
                self.shape(a).to_vec(),
                va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::LhsScalar => {
                (self.shape(b).to_vec(), vb.iter().map(|&y| f(va[0], y)).collect())
            }
            Broadcast::RhsScalar => {
                (self.shape(a).to_vec(), va.iter().map(|&x| f(x, vb[0])).collect())
            }
            Broadcast::RhsRow => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                let mut out = vec![R::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = f(va[i * c + j], vb[j]);
                    }
                }
                (vec![r, c], out)
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let bc = self.broadcast_kind(a, b, "add");
        let (shape, out) = self.binary_values(a, b, bc, |x, y| x + y);
        self.push(shape, out, false, Op::Add(a, b, bc))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let bc = self.broadcast_kind(a, b, "mul");
        let (shape, out) = self.binary_values(a, b, bc, |x, y| x * y);
        self.push(shape, out, false, Op::Mul(a, b, bc))
    }

    /// Elementwise `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (sc, sh) = (R::of(scale), R::of(shift));
        let out = self.value(x).iter().map(|&v| sc * v + sh).collect();
        self.push(self.shape(x).to_vec(), out, false, Op::Affine { x, scale: sc })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        self.push(self.shape(x).to_vec(), out, false, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out: Vec<R> = self
            .value(x)
            .iter()
            .map(|&v| {
                assert!(v > R::zero(), "log: domain error, input {v} is not strictly positive");
                v.ln()
            })
            .collect();
        self.push(self.shape(x).to_vec(), out, false, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(self.shape(x).to_vec(), out, false, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        self.push(self.shape(x).to_vec(), out, false, Op::Sigmoid(x))
    }

    /// Numerically stable log(sigmoid(x)): finite for every finite input.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| log_sigmoid_scalar(v)).collect();
        self.push(self.shape(x).to_vec(), out, false, Op::LogSigmoid(x))
    }

    /// Elementwise x*ln(x) with 0*ln(0) := 0. Domain error for x < 0.
    pub fn xlogx(&mut self, x: Var) -> Var {
        let out: Vec<R> = self
            .value(x)
            .iter()
            .map(|&v| {
                assert!(v >= R::zero(), "xlogx: domain error, input {v} is negative");
                if v == R::zero() {
                    R::zero()
                } else {
                    v * v.ln()
                }
            })
            .collect();
        self.push(self.shape(x).to_vec(), out, false, Op::XLogX(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let (shape, out) = self.lanes_map(x, axis, softmax_lane);
        self.push(shape, out, false, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let (shape, out) = self.lanes_map(x, axis, log_softmax_lane);
        self.push(shape, out, false, Op::LogSoftmax { x, axis })
    }

    fn lanes_map(
        &self,
        x: Var,
        axis: usize,
        f: impl Fn(&[R], &mut [R]),
    ) -> (Vec<usize>, Vec<R>) {
        let shape = self.shape(x).to_vec();
        let v = self.value(x);
        let mut out = vec![R::zero(); v.len()];
        for (offsets, stride, len) in lanes(&shape, axis) {
            let lane: Vec<R> = (0..len).map(|k| v[offsets + k * stride]).collect();
            let mut res = vec![R::zero(); len];
            f(&lane, &mut res);
            for k in 0..len {
                out[offsets + k * stride] = res[k];
            }
        }
        (shape, out)
    }

    pub fn reduce(&mut self, x: Var, mode: ReduceMode, axis: Option<usize>) -> Var {
        let shape = self.shape(x).to_vec();
        match axis {
            None => {
                let mut s = R::zero();
                for &v in self.value(x) {
                    s += v;
                }
                if mode == ReduceMode::Mean {
                    s = s / R::of(self.value(x).len() as f64);
                }
                self.push(vec![1], vec![s], false, Op::Reduce { x, mode, axis })
            }
            Some(a) => {
                assert_eq!(shape.len(), 2, "reduce: axis form expects rank 2, got {:?}", shape);
                assert!(a < 2, "reduce: axis {} out of range", a);
                let (r, c) = (shape[0], shape[1]);
                let v = self.value(x);
                let (out_len, lane_len) = if a == 0 { (c, r) } else { (r, c) };
                let mut out = vec![R::zero(); out_len];
                for i in 0..r {
                    for j in 0..c {
                        let o = if a == 0 { j } else { i };
                        out[o] += v[i * c + j];
                    }
                }
                if mode == ReduceMode::Mean {
                    let d = R::of(lane_len as f64);
                    for o in out.iter_mut() {
                        *o = *o / d;
                    }
                }
                self.push(vec![out_len], out, false, Op::Reduce { x, mode, axis })
            }
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceMode::Sum, None)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceMode::Mean, None)
    }

    /// Select entries of a vector; repeated indices repeat entries (and
    /// accumulate gradient).
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 1, "gather: expected rank 1, got {:?}", s);
        let v = self.value(x);
        let out: Vec<R> = idx
            .iter()
            .map(|&i| {
                assert!(i < v.len(), "gather: index {} out of range for [{}]", i, v.len());
                v[i]
            })
            .collect();
        let n = out.len();
        self.push(vec![n], out, false, Op::Gather { x, idx: idx.to_vec() })
    }

    /// Row i of a [r, c] matrix as a [c] vector.
    pub fn select_row(&mut self, x: Var, row: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "select_row: expected rank 2, got {:?}", s);
        assert!(row < s[0], "select_row: row {} out of range for {:?}", row, s);
        let c = s[1];
        let out = self.value(x)[row * c..(row + 1) * c].to_vec();
        self.push(vec![c], out, false, Op::SelectRow { x, row })
    }

    /// Inverted dropout with a caller-supplied keep mask. Survivors are
    /// scaled by 1/(1-rate) so the expectation is preserved.
    pub fn dropout_masked(&mut self, x: Var, keep: Vec<bool>, rate: f64) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout: rate {rate} outside [0,1)");
        assert_eq!(keep.len(), self.value(x).len(), "dropout: mask length mismatch");
        let scale = R::of(1.0 / (1.0 - rate));
        let out = self
            .value(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { R::zero() })
            .collect();
        self.push(self.shape(x).to_vec(), out, false, Op::Dropout { x, keep, scale })
    }

    // ── backward ────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, contribution: &[R]) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        debug_check_finite(contribution, "backward");
        let grad = node.grad.get_or_insert_with(|| vec![R::zero(); node.values.len()]);
        assert_eq!(grad.len(), contribution.len(), "gradient shape mismatch");
        for (g, &c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Reverse sweep from a scalar root. Gradients of `requires_grad`
    /// leaves accumulate across calls; interior gradients are rebuilt
    /// each call.
    pub fn backward(&mut self, root: Var) {
        assert!(!self.nodes.is_empty(), "backward: empty tape");
        assert_eq!(
            self.nodes[root.0].values.len(),
            1,
            "backward: non-scalar root, shape {:?}",
            self.shape(root)
        );
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        self.accumulate(root, &[R::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            self.backprop_op(Var(i), &op, &g);
        }
    }

    fn backprop_op(&mut self, out: Var, op: &Op<R>, g: &[R]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let va = self.value(*a).to_vec();
                let vb = self.value(*b).to_vec();
                let mut ga = vec![R::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = R::zero();
                        for j in 0..n {
                            s += g[i * n + j] * vb[p * n + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                let mut gb = vec![R::zero(); k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut s = R::zero();
                        for i in 0..m {
                            s += va[i * k + p] * g[i * n + j];
                        }
                        gb[p * n + j] = s;
                    }
                }
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::MatVec(w, x) => {
                let (m, k) = (self.shape(*w)[0], self.shape(*w)[1]);
                let vw = self.value(*w).to_vec();
                let vx = self.value(*x).to_vec();
                let mut gw = vec![R::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        gw[i * k + p] = g[i] * vx[p];
                    }
                }
                let mut gx = vec![R::zero(); k];
                for p in 0..k {
                    let mut s = R::zero();
                    for i in 0..m {
                        s += vw[i * k + p] * g[i];
                    }
                    gx[p] = s;
                }
                self.accumulate(*w, &gw);
                self.accumulate(*x, &gx);
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut gx = vec![R::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::Reshape(x) => {
                self.accumulate(*x, g);
            }
            Op::Concat { parts, axis } => {
                let rank = self.shape(parts[0]).len();
                match (rank, axis) {
                    (1, 0) | (2, 0) => {
                        let mut off = 0;
                        for &p in parts {
                            let n = self.value(p).len();
                            let slice = g[off..off + n].to_vec();
                            self.accumulate(p, &slice);
                            off += n;
                        }
                    }
                    (2, 1) => {
                        let r = self.shape(parts[0])[0];
                        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
                        let total: usize = widths.iter().sum();
                        let mut off = 0;
                        for (pi, &p) in parts.iter().enumerate() {
                            let w = widths[pi];
                            let mut gp = vec![R::zero(); r * w];
                            for i in 0..r {
                                gp[i * w..(i + 1) * w]
                                    .copy_from_slice(&g[i * total + off..i * total + off + w]);
                            }
                            self.accumulate(p, &gp);
                            off += w;
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::Stack { parts } => {
                let d = self.shape(parts[0])[0];
                for (i, &p) in parts.iter().enumerate() {
                    let slice = g[i * d..(i + 1) * d].to_vec();
                    self.accumulate(p, &slice);
                }
            }
            Op::Add(a, b, bc) => match bc {
                Broadcast::None => {
                    self.accumulate(*a, g);
                    self.accumulate(*b, g);
                }
                Broadcast::LhsScalar => {
                    let s: R = g.iter().copied().sum();
                    self.accumulate(*a, &[s]);
                    self.accumulate(*b, g);
                }
                Broadcast::RhsScalar => {
                    let s: R = g.iter().copied().sum();
                    self.accumulate(*a, g);
                    self.accumulate(*b, &[s]);
                }
                Broadcast::RhsRow => {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    self.accumulate(*a, g);
                    let mut gb = vec![R::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                    self.accumulate(*b, &gb);
                }
            },
            Op::Mul(a, b, bc) => {
                let va = self.value(*a).to_vec();
                let vb = self.value(*b).to_vec();
                match bc {
                    Broadcast::None => {
                        let ga: Vec<R> = g.iter().zip(&vb).map(|(&gi, &bi)| gi * bi).collect();
                        let gb: Vec<R> = g.iter().zip(&va).map(|(&gi, &ai)| gi * ai).collect();
                        self.accumulate(*a, &ga);
                        self.accumulate(*b, &gb);
                    }
                    Broadcast::LhsScalar => {
                        let s: R = g.iter().zip(&vb).map(|(&gi, &bi)| gi * bi).sum();
                        let gb: Vec<R> = g.iter().map(|&gi| gi * va[0]).collect();
                        self.accumulate(*a, &[s]);
                        self.accumulate(*b, &gb);
                    }
                    Broadcast::RhsScalar => {
                        let ga: Vec<R> = g.iter().map(|&gi| gi * vb[0]).collect();
                        let s: R = g.iter().zip(&va).map(|(&gi, &ai)| gi * ai).sum();
                        self.accumulate(*a, &ga);
                        self.accumulate(*b, &[s]);
                    }
                    Broadcast::RhsRow => {
                        let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                        let mut ga = vec![R::zero(); r * c];
                        let mut gb = vec![R::zero(); c];
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] = g[i * c + j] * vb[j];
                                gb[j] += g[i * c + j] * va[i * c + j];
                            }
                        }
                        self.accumulate(*a, &ga);
                        self.accumulate(*b, &gb);
                    }
                }
            }
            Op::Affine { x, scale } => {
                let gx: Vec<R> = g.iter().map(|&gi| gi * *scale).collect();
                self.accumulate(*x, &gx);
            }
            Op::Exp(x) => {
                let y = self.value(out).to_vec();
                let gx: Vec<R> = g.iter().zip(&y).map(|(&gi, &yi)| gi * yi).collect();
                self.accumulate(*x, &gx);
            }
            Op::Log(x) => {
                let vx = self.value(*x).to_vec();
                let gx: Vec<R> = g.iter().zip(&vx).map(|(&gi, &xi)| gi / xi).collect();
                self.accumulate(*x, &gx);
            }
            Op::Tanh(x) => {
                let y = self.value(out).to_vec();
                let gx: Vec<R> =
                    g.iter().zip(&y).map(|(&gi, &yi)| gi * (R::one() - yi * yi)).collect();
                self.accumulate(*x, &gx);
            }
            Op::Sigmoid(x) => {
                let y = self.value(out).to_vec();
                let gx: Vec<R> =
                    g.iter().zip(&y).map(|(&gi, &yi)| gi * yi * (R::one() - yi)).collect();
                self.accumulate(*x, &gx);
            }
            Op::LogSigmoid(x) => {
                let vx = self.value(*x).to_vec();
                let gx: Vec<R> = g
                    .iter()
                    .zip(&vx)
                    .map(|(&gi, &xi)| gi * sigmoid_scalar(-xi))
                    .collect();
                self.accumulate(*x, &gx);
            }
            Op::XLogX(x) => {
                let vx = self.value(*x).to_vec();
                let gx: Vec<R> = g
                    .iter()
                    .zip(&vx)
                    .map(|(&gi, &xi)| {
                        if xi == R::zero() {
                            R::zero()
                        } else {
                            gi * (xi.ln() + R::one())
                        }
                    })
                    .collect();
                self.accumulate(*x, &gx);
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(out).to_vec();
                let y = self.value(out).to_vec();
                let mut gx = vec![R::zero(); y.len()];
                for (offset, stride, len) in lanes(&shape, *axis) {
                    let mut dot = R::zero();
                    for k in 0..len {
                        let i = offset + k * stride;
                        dot += g[i] * y[i];
                    }
                    for k in 0..len {
                        let i = offset + k * stride;
                        gx[i] = (g[i] - dot) * y[i];
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::LogSoftmax { x, axis } => {
                let shape = self.shape(out).to_vec();
                let y = self.value(out).to_vec();
                let mut gx = vec![R::zero(); y.len()];
                for (offset, stride, len) in lanes(&shape, *axis) {
                    let mut gsum = R::zero();
                    for k in 0..len {
                        gsum += g[offset + k * stride];
                    }
                    for k in 0..len {
                        let i = offset + k * stride;
                        gx[i] = g[i] - y[i].exp() * gsum;
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::Reduce { x, mode, axis } => {
                let shape = self.shape(*x).to_vec();
                let n = self.value(*x).len();
                let mut gx = vec![R::zero(); n];
                match axis {
                    None => {
                        let d = match mode {
                            ReduceMode::Sum => R::one(),
                            ReduceMode::Mean => R::one() / R::of(n as f64),
                        };
                        for v in gx.iter_mut() {
                            *v = g[0] * d;
                        }
                    }
                    Some(a) => {
                        let (r, c) = (shape[0], shape[1]);
                        let lane_len = if *a == 0 { r } else { c };
                        let d = match mode {
                            ReduceMode::Sum => R::one(),
                            ReduceMode::Mean => R::one() / R::of(lane_len as f64),
                        };
                        for i in 0..r {
                            for j in 0..c {
                                let o = if *a == 0 { j } else { i };
                                gx[i * c + j] = g[o] * d;
                            }
                        }
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::Gather { x, idx } => {
                let n = self.value(*x).len();
                let mut gx = vec![R::zero(); n];
                for (t, &i) in idx.iter().enumerate() {
                    gx[i] += g[t];
                }
                self.accumulate(*x, &gx);
            }
            Op::SelectRow { x, row } => {
                let (_, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.value(*x).len();
                let mut gx = vec![R::zero(); n];
                gx[row * c..(row + 1) * c].copy_from_slice(g);
                self.accumulate(*x, &gx);
            }
            Op::Dropout { x, keep, scale } => {
                let gx: Vec<R> = g
                    .iter()
                    .zip(keep)
                    .map(|(&gi, &k)| if k { gi * *scale } else { R::zero() })
                    .collect();
                self.accumulate(*x, &gx);
            }
        }
    }
}

fn sigmoid_scalar<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// log(sigmoid(x)) via log1p: -ln(1+e^-x) for x >= 0, x - ln(1+e^x) otherwise.
fn log_sigmoid_scalar<R: Real>(x: R) -> R {
    if x >= R::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Lane decomposition of a rank<=2 shape along `axis`:
/// (offset, stride, len) per lane.
fn lanes(shape: &[usize], axis: usize) -> Vec<(usize, usize, usize)> {
    match (shape.len(), axis) {
        (1, 0) => vec![(0, 1, shape[0])],
        (2, 0) => (0..shape[1]).map(|j| (j, shape[1], shape[0])).collect(),
        (2, 1) => (0..shape[0]).map(|i| (i * shape[1], 1, shape[1])).collect(),
        _ => panic!("softmax/reduce lanes: unsupported shape {:?} axis {}", shape, axis),
    }
}

fn softmax_lane<R: Real>(x: &[R], out: &mut [R]) {
    let mut mx = x[0];
    for &v in x {
        if v > mx {
            mx = v;
        }
    }
    let mut z = R::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mx).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
}

fn log_softmax_lane<R: Real>(x: &[R], out: &mut [R]) {
    let mut mx = x[0];
    for &v in x {
        if v > mx {
            mx = v;
        }
    }
    let mut z = R::zero();
    for &v in x {
        z += (v - mx).exp();
    }
    let lse = mx + z.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Max relative error between the analytic gradient of a scalar-valued
/// tensor function and central finite differences. The finite-difference
/// side re-runs the forward pass only and is independent of the
/// backward rules it checks.
pub fn grad_check<R: Real>(
    f: impl Fn(&mut Tape<R>, Var) -> Var,
    x: &Array<R>,
    eps: f64,
) -> f64 {
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone(), true);
    let y = f(&mut tape, vx);
    assert_eq!(tape.value(y).len(), 1, "grad_check: f must be scalar-valued");
    tape.backward(y);
    let analytic: Vec<f64> =
        tape.grad(vx).expect("grad_check: no gradient").iter().map(|g| g.as_f64()).collect();

    let eval = |data: &Array<R>| -> f64 {
        let mut t = Tape::new();
        let v = t.leaf(data.clone(), false);
        let y = f(&mut t, v);
        t.scalar_value(y).as_f64()
    };

    let mut max_err: f64 = 0.0;
    for i in 0..x.numel() {
        let mut hi = x.clone();
        hi.data[i] = R::of(hi.data[i].as_f64() + eps);
        let mut lo = x.clone();
        lo.data[i] = R::of(lo.data[i].as_f64() - eps);
        let fd = (eval(&hi) - eval(&lo)) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs() + 1e-12);
        if err > max_err {
            max_err = err;
        }
    }
    max_err
}
