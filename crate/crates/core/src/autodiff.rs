//! Reverse-mode automatic differentiation over dense `f64` vectors.
//!
//! A [`Tape`] records a computation symbolically. [`Tape::forward`] evaluates
//! it for concrete input values and [`Tape::backward`] accumulates adjoints
//! in reverse node order, returning one gradient vector per declared input.
//! Because the graph is independent of the input values, the same tape can be
//! replayed at perturbed inputs, which is what [`grad_check`] does.
//!
//! Piecewise operations (`max_const`, `min_const`, `select`) take the
//! zero subgradient at their kinks. Every forward pass records which side of
//! each kink it took; [`Tape::at_kink`] reports whether an input sat exactly
//! on one.
//!
//! ```
//! use bidlab::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.input(1);
//! let y = tape.input(1);
//! let f = tape.mul(x, y);
//! tape.forward(&[&[3.0], &[7.0]]).unwrap();
//! let g = tape.backward(f).unwrap();
//! assert_eq!(g.wrt(0), &[7.0]);
//! assert_eq!(g.wrt(1), &[3.0]);
//! ```

use std::fmt::{self, Write as _};
use std::sync::Arc;

use crate::error::{Error, Result};

/// A node handle; carries the node's output length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    len: usize,
}

impl Var {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Scalar function with its derivative, applied elementwise by [`Tape::map`].
pub trait ScalarFn: Send + Sync + fmt::Debug {
    /// Returns `(f(x), f'(x))`.
    fn eval(&self, x: f64) -> (f64, f64);
}

#[derive(Debug, Clone)]
enum Op {
    Input(usize),
    /// Offset into the constant pool.
    Const(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatVec { m: Var, x: Var },
    Sigmoid(Var),
    Tanh(Var),
    /// `scale ⊙ x + shift` with pool offsets for both vectors.
    Affine { x: Var, scale: usize, shift: usize },
    MaxConst(Var, f64),
    MinConst(Var, f64),
    Sum(Var),
    Broadcast(Var),
    Slice { x: Var, start: usize },
    Concat(Vec<Var>),
    Map(Var, Arc<dyn ScalarFn>),
    /// `a` where `lo <= cond <= hi`, else `b`.
    Select { cond: Var, lo: f64, hi: f64, a: Var, b: Var },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    off: usize,
    len: usize,
}

/// Per-input adjoints from a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<Vec<f64>>);

impl Gradient {
    pub fn wrt(&self, input: usize) -> &[f64] {
        &self.0[input]
    }

    pub fn into_inner(self) -> Vec<Vec<f64>> {
        self.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    pool: Vec<f64>,
    input_lens: Vec<usize>,
    width: usize,
    vals: Vec<f64>,
    branches: Vec<i8>,
    evaluated: bool,
}

fn sign(x: f64, c: f64) -> i8 {
    if x > c {
        1
    } else if x < c {
        -1
    } else {
        0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, len: usize) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            off: self.width,
            len,
        });
        self.width += len;
        self.evaluated = false;
        Var { id, len }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Declares the next input slot.
    pub fn input(&mut self, len: usize) -> Var {
        let slot = self.input_lens.len();
        self.input_lens.push(len);
        self.push(Op::Input(slot), len)
    }

    pub fn constant(&mut self, values: &[f64]) -> Var {
        let off = self.pool.len();
        self.pool.extend_from_slice(values);
        self.push(Op::Const(off), values.len())
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(&[value])
    }

    fn broadcast_len(a: Var, b: Var) -> Result<usize> {
        if a.len == b.len || b.len == 1 {
            Ok(a.len)
        } else if a.len == 1 {
            Ok(b.len)
        } else {
            Err(Error::ShapeMismatch(format!(
                "elementwise op on lengths {} and {}",
                a.len, b.len
            )))
        }
    }

    pub fn try_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = Self::broadcast_len(a, b)?;
        Ok(self.push(Op::Add(a, b), n))
    }

    pub fn try_sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = Self::broadcast_len(a, b)?;
        Ok(self.push(Op::Sub(a, b), n))
    }

    pub fn try_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = Self::broadcast_len(a, b)?;
        Ok(self.push(Op::Mul(a, b), n))
    }

    /// Panics on incompatible shapes; see [`Tape::try_add`].
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.try_add(a, b).unwrap()
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.try_sub(a, b).unwrap()
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.try_mul(a, b).unwrap()
    }

    /// Row-major `rows × x.len()` matrix times vector.
    pub fn try_matvec(&mut self, m: Var, rows: usize, x: Var) -> Result<Var> {
        if rows * x.len != m.len {
            return Err(Error::ShapeMismatch(format!(
                "matvec of {} values as {rows} rows against vector of {}",
                m.len, x.len
            )));
        }
        Ok(self.push(Op::MatVec { m, x }, rows))
    }

    pub fn matvec(&mut self, m: Var, rows: usize, x: Var) -> Var {
        self.try_matvec(m, rows, x).unwrap()
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.push(Op::Sigmoid(x), x.len)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.push(Op::Tanh(x), x.len)
    }

    /// Elementwise `scale[i] * x[i] + shift[i]`.
    pub fn try_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        if scale.len() != x.len || shift.len() != x.len {
            return Err(Error::ShapeMismatch(format!(
                "affine on length {} with scale {} and shift {}",
                x.len,
                scale.len(),
                shift.len()
            )));
        }
        let s = self.pool.len();
        self.pool.extend_from_slice(scale);
        let t = self.pool.len();
        self.pool.extend_from_slice(shift);
        Ok(self.push(
            Op::Affine {
                x,
                scale: s,
                shift: t,
            },
            x.len,
        ))
    }

    pub fn affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Var {
        self.try_affine(x, scale, shift).unwrap()
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let s = vec![factor; x.len];
        let z = vec![0.0; x.len];
        self.affine(x, &s, &z)
    }

    pub fn max_const(&mut self, x: Var, c: f64) -> Var {
        self.push(Op::MaxConst(x, c), x.len)
    }

    pub fn min_const(&mut self, x: Var, c: f64) -> Var {
        self.push(Op::MinConst(x, c), x.len)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let y = self.max_const(x, lo);
        self.min_const(y, hi)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.push(Op::Sum(x), 1)
    }

    /// Repeats a scalar `len` times.
    pub fn try_broadcast(&mut self, x: Var, len: usize) -> Result<Var> {
        if x.len != 1 {
            return Err(Error::ShapeMismatch(format!(
                "broadcast needs a scalar, got length {}",
                x.len
            )));
        }
        Ok(self.push(Op::Broadcast(x), len))
    }

    pub fn broadcast(&mut self, x: Var, len: usize) -> Var {
        self.try_broadcast(x, len).unwrap()
    }

    pub fn try_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > x.len {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{} of length {}",
                start + len,
                x.len
            )));
        }
        Ok(self.push(Op::Slice { x, start }, len))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        self.try_slice(x, start, len).unwrap()
    }

    pub fn index(&mut self, x: Var, i: usize) -> Var {
        self.slice(x, i, 1)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let n = parts.iter().map(|p| p.len).sum();
        self.push(Op::Concat(parts.to_vec()), n)
    }

    pub fn map(&mut self, x: Var, f: Arc<dyn ScalarFn>) -> Var {
        self.push(Op::Map(x, f), x.len)
    }

    /// `a` when the scalar `cond` lies in `[lo, hi]`, otherwise `b`. No
    /// gradient flows into `cond`.
    pub fn try_select(&mut self, cond: Var, lo: f64, hi: f64, a: Var, b: Var) -> Result<Var> {
        if cond.len != 1 || a.len != b.len {
            return Err(Error::ShapeMismatch(format!(
                "select with condition length {} and branches {} / {}",
                cond.len, a.len, b.len
            )));
        }
        Ok(self.push(Op::Select { cond, lo, hi, a, b }, a.len))
    }

    pub fn select(&mut self, cond: Var, lo: f64, hi: f64, a: Var, b: Var) -> Var {
        self.try_select(cond, lo, hi, a, b).unwrap()
    }

    /// Evaluates every node for the given input values.
    pub fn forward(&mut self, inputs: &[&[f64]]) -> Result<()> {
        if inputs.len() != self.input_lens.len() {
            return Err(Error::ShapeMismatch(format!(
                "tape declares {} inputs, got {}",
                self.input_lens.len(),
                inputs.len()
            )));
        }
        for (i, (v, &n)) in inputs.iter().zip(&self.input_lens).enumerate() {
            if v.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "input {i} declared with length {n}, got {}",
                    v.len()
                )));
            }
        }
        self.evaluated = false;
        self.vals.clear();
        self.vals.resize(self.width, 0.0);
        self.branches.clear();
        let pool = &self.pool;
        for node in &self.nodes {
            let (lo, hi) = self.vals.split_at_mut(node.off);
            let out = &mut hi[..node.len];
            let v = |x: &Var| {
                let n = &self.nodes[x.id];
                &lo[n.off..n.off + n.len]
            };
            match &node.op {
                Op::Input(slot) => out.copy_from_slice(inputs[*slot]),
                Op::Const(off) => out.copy_from_slice(&pool[*off..*off + node.len]),
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    let (x, y) = (v(a), v(b));
                    for (i, o) in out.iter_mut().enumerate() {
                        let p = x[if x.len() == 1 { 0 } else { i }];
                        let q = y[if y.len() == 1 { 0 } else { i }];
                        *o = match &node.op {
                            Op::Add(..) => p + q,
                            Op::Sub(..) => p - q,
                            _ => p * q,
                        };
                    }
                }
                Op::MatVec { m, x } => {
                    let (m, x) = (v(m), v(x));
                    let cols = x.len();
                    for (r, o) in out.iter_mut().enumerate() {
                        let row = &m[r * cols..(r + 1) * cols];
                        let mut acc = 0.0;
                        for c in 0..cols {
                            acc += row[c] * x[c];
                        }
                        *o = acc;
                    }
                }
                Op::Sigmoid(a) => {
                    for (o, x) in out.iter_mut().zip(v(a)) {
                        *o = sigmoid(*x);
                    }
                }
                Op::Tanh(a) => {
                    for (o, x) in out.iter_mut().zip(v(a)) {
                        *o = x.tanh();
                    }
                }
                Op::Affine { x, scale, shift } => {
                    let x = v(x);
                    for i in 0..node.len {
                        out[i] = pool[scale + i] * x[i] + pool[shift + i];
                    }
                }
                Op::MaxConst(a, c) => {
                    for (o, x) in out.iter_mut().zip(v(a)) {
                        self.branches.push(sign(*x, *c));
                        *o = x.max(*c);
                    }
                }
                Op::MinConst(a, c) => {
                    for (o, x) in out.iter_mut().zip(v(a)) {
                        self.branches.push(sign(*x, *c));
                        *o = x.min(*c);
                    }
                }
                Op::Sum(a) => out[0] = v(a).iter().sum(),
                Op::Broadcast(a) => out.fill(v(a)[0]),
                Op::Slice { x, start } => out.copy_from_slice(&v(x)[*start..*start + node.len]),
                Op::Concat(parts) => {
                    let mut k = 0;
                    for p in parts {
                        out[k..k + p.len].copy_from_slice(v(p));
                        k += p.len;
                    }
                }
                Op::Map(a, f) => {
                    for (o, x) in out.iter_mut().zip(v(a)) {
                        *o = f.eval(*x).0;
                    }
                }
                Op::Select {
                    cond,
                    lo: l,
                    hi: h,
                    a,
                    b,
                } => {
                    let c = v(cond)[0];
                    let sl = sign(c, *l);
                    let sh = sign(c, *h);
                    self.branches.push(if sl == 0 || sh == 0 {
                        0
                    } else if sl > 0 && sh < 0 {
                        1
                    } else {
                        -1
                    });
                    let src = if *l <= c && c <= *h { v(a) } else { v(b) };
                    out.copy_from_slice(src);
                }
            }
        }
        self.evaluated = true;
        Ok(())
    }

    pub fn value(&self, x: Var) -> Result<&[f64]> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let n = &self.nodes[x.id];
        Ok(&self.vals[n.off..n.off + n.len])
    }

    /// Side taken at every piecewise op in the last forward pass: `1`/`-1`
    /// off the kink, `0` exactly on it.
    pub fn branch_signature(&self) -> &[i8] {
        &self.branches
    }

    pub fn at_kink(&self) -> bool {
        self.branches.contains(&0)
    }

    /// Gradient of the scalar node `output` with respect to every input.
    pub fn backward(&self, output: Var) -> Result<Gradient> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        if output.len != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar output, got length {}",
                output.len
            )));
        }
        let mut adj = vec![0.0; self.width];
        adj[self.nodes[output.id].off] = 1.0;
        let mut grads: Vec<Vec<f64>> = self.input_lens.iter().map(|&n| vec![0.0; n]).collect();
        let vals = &self.vals;
        let span = |x: &Var| {
            let n = &self.nodes[x.id];
            n.off..n.off + n.len
        };
        for node in self.nodes[..=output.id].iter().rev() {
            let (lo, hi) = adj.split_at_mut(node.off);
            let g = &hi[..node.len];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let out = &vals[node.off..node.off + node.len];
            match &node.op {
                Op::Input(slot) => {
                    for (d, s) in grads[*slot].iter_mut().zip(g) {
                        *d += s;
                    }
                }
                Op::Const(_) => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    let (ra, rb) = (span(a), span(b));
                    for (i, gi) in g.iter().enumerate() {
                        let ia = ra.start + if a.len == 1 { 0 } else { i };
                        let ib = rb.start + if b.len == 1 { 0 } else { i };
                        lo[ia] += gi;
                        if neg {
                            lo[ib] -= gi;
                        } else {
                            lo[ib] += gi;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ra, rb) = (span(a), span(b));
                    for (i, gi) in g.iter().enumerate() {
                        let ia = ra.start + if a.len == 1 { 0 } else { i };
                        let ib = rb.start + if b.len == 1 { 0 } else { i };
                        let (va, vb) = (vals[ia], vals[ib]);
                        lo[ia] += gi * vb;
                        lo[ib] += gi * va;
                    }
                }
                Op::MatVec { m, x } => {
                    let (rm, rx) = (span(m), span(x));
                    let cols = x.len;
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            let im = rm.start + r * cols + c;
                            lo[im] += gr * vals[rx.start + c];
                            lo[rx.start + c] += gr * vals[im];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let ra = span(a);
                    for i in 0..node.len {
                        lo[ra.start + i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
                Op::Tanh(a) => {
                    let ra = span(a);
                    for i in 0..node.len {
                        lo[ra.start + i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                }
                Op::Affine { x, scale, .. } => {
                    let rx = span(x);
                    for i in 0..node.len {
                        lo[rx.start + i] += g[i] * self.pool[scale + i];
                    }
                }
                Op::MaxConst(a, c) | Op::MinConst(a, c) => {
                    let upper = matches!(node.op, Op::MaxConst(..));
                    let ra = span(a);
                    for i in 0..node.len {
                        let x = vals[ra.start + i];
                        let pass = if upper { x > *c } else { x < *c };
                        if pass {
                            lo[ra.start + i] += g[i];
                        }
                    }
                }
                Op::Sum(a) => {
                    for d in &mut lo[span(a)] {
                        *d += g[0];
                    }
                }
                Op::Broadcast(a) => {
                    lo[span(a).start] += g.iter().sum::<f64>();
                }
                Op::Slice { x, start } => {
                    let s = span(x).start + start;
                    for (i, gi) in g.iter().enumerate() {
                        lo[s + i] += gi;
                    }
                }
                Op::Concat(parts) => {
                    let mut k = 0;
                    for p in parts {
                        let s = span(p).start;
                        for i in 0..p.len {
                            lo[s + i] += g[k + i];
                        }
                        k += p.len;
                    }
                }
                Op::Map(a, f) => {
                    let ra = span(a);
                    for i in 0..node.len {
                        lo[ra.start + i] += g[i] * f.eval(vals[ra.start + i]).1;
                    }
                }
                Op::Select {
                    cond,
                    lo: l,
                    hi: h,
                    a,
                    b,
                } => {
                    let c = vals[span(cond).start];
                    let target = if *l <= c && c <= *h { a } else { b };
                    let s = span(target).start;
                    for (i, gi) in g.iter().enumerate() {
                        lo[s + i] += gi;
                    }
                }
            }
        }
        for (slot, g) in grads.iter().enumerate() {
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of input {slot} at coordinate {bad}"
                )));
            }
        }
        Ok(Gradient(grads))
    }

    /// Plain-text listing of the nodes, with values when evaluated.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let desc = match &n.op {
                Op::Input(k) => format!("input[{k}]"),
                Op::Const(_) => "const".into(),
                Op::Add(a, b) => format!("add %{} %{}", a.id, b.id),
                Op::Sub(a, b) => format!("sub %{} %{}", a.id, b.id),
                Op::Mul(a, b) => format!("mul %{} %{}", a.id, b.id),
                Op::MatVec { m, x } => format!("matvec %{} %{}", m.id, x.id),
                Op::Sigmoid(a) => format!("sigmoid %{}", a.id),
                Op::Tanh(a) => format!("tanh %{}", a.id),
                Op::Affine { x, .. } => format!("affine %{}", x.id),
                Op::MaxConst(a, c) => format!("max %{} {c}", a.id),
                Op::MinConst(a, c) => format!("min %{} {c}", a.id),
                Op::Sum(a) => format!("sum %{}", a.id),
                Op::Broadcast(a) => format!("broadcast %{}", a.id),
                Op::Slice { x, start } => format!("slice %{} {start}..{}", x.id, start + n.len),
                Op::Concat(p) => {
                    let ids: Vec<String> = p.iter().map(|v| format!("%{}", v.id)).collect();
                    format!("concat {}", ids.join(" "))
                }
                Op::Map(a, f) => format!("map %{} {f:?}", a.id),
                Op::Select { cond, lo, hi, a, b } => {
                    format!("select %{} in [{lo}, {hi}] ? %{} : %{}", cond.id, a.id, b.id)
                }
            };
            write!(s, "%{i} [{}] = {desc}", n.len).unwrap();
            if self.evaluated {
                let v = &self.vals[n.off..n.off + n.len];
                if v.len() <= 4 {
                    write!(s, " -> {v:?}").unwrap();
                } else {
                    write!(s, " -> [{}, {}, .. {}]", v[0], v[1], v[v.len() - 1]).unwrap();
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, 1)`.
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    /// The base point lies exactly on a kink; no coordinates were compared.
    pub non_differentiable: bool,
    /// Coordinates whose perturbation crossed a kink.
    pub skipped: Vec<usize>,
}

/// Checks the gradient of a scalar function of one parameter vector on all
/// coordinates.
pub fn grad_check<F>(build: F, params: &[f64], epsilon: f64) -> Result<GradCheck>
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    grad_check_coords(build, params, epsilon, &coords)
}

/// As [`grad_check`], restricted to `coords`.
pub fn grad_check_coords<F>(build: F, params: &[f64], epsilon: f64, coords: &[usize]) -> Result<GradCheck>
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let p = tape.input(params.len());
    let out = build(&mut tape, p);
    if tape.input_lens.len() != 1 {
        return Err(Error::ShapeMismatch(
            "grad_check functions must declare no further inputs".into(),
        ));
    }
    tape.forward(&[params])?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_coordinate: None,
        non_differentiable: false,
        skipped: Vec::new(),
    };
    if tape.at_kink() {
        report.non_differentiable = true;
        return Ok(report);
    }
    let base_sig = tape.branches.clone();
    let analytic = tape.backward(out)?.0.remove(0);
    let mut x = params.to_vec();
    for &i in coords {
        let orig = x[i];
        x[i] = orig + epsilon;
        tape.forward(&[&x])?;
        let fp = tape.value(out)?[0];
        let crossed_p = tape.branches != base_sig;
        x[i] = orig - epsilon;
        tape.forward(&[&x])?;
        let fm = tape.value(out)?[0];
        let crossed_m = tape.branches != base_sig;
        x[i] = orig;
        if crossed_p || crossed_m {
            report.skipped.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * epsilon);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        if err > report.max_rel_error || report.worst_coordinate.is_none() {
            report.max_rel_error = err;
            report.worst_coordinate = Some(i);
        }
    }
    Ok(report)
}
