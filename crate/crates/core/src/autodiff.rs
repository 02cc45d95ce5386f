//! Dense-array math with tape-based reverse-mode differentiation.
//!
//! Everything trainable in this crate is an [`NArray`] of 64-bit floats with
//! an attached gradient buffer. Operations execute eagerly and, when a
//! recording [`Tape`] is supplied and any input requires gradients, push a
//! backward rule. Replaying the rules in reverse execution order accumulates
//! exactly one gradient contribution per use of each input, so fan-out sums
//! naturally.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use libm::erf;

use crate::error::{Error, Result};

/// Dense row-major array of f64 values plus a same-shape gradient buffer.
#[derive(Debug, Clone)]
pub struct NArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub requires_grad: bool,
}

pub type ArrayRef = Rc<RefCell<NArray>>;

impl NArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape/data length mismatch");
        let grad = vec![0.0; n];
        NArray {
            shape,
            data,
            grad,
            requires_grad,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.iter_mut() {
            *g = 0.0;
        }
    }
}

/// Wrap as a shared reference usable on a tape.
pub fn aref(a: NArray) -> ArrayRef {
    Rc::new(RefCell::new(a))
}

/// Constant (non-learnable) array.
pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> ArrayRef {
    aref(NArray::new(shape, data, false))
}

/// Learnable array: the optimizer may read its grad.
pub fn param(shape: Vec<usize>, data: Vec<f64>) -> ArrayRef {
    aref(NArray::new(shape, data, true))
}

pub fn scalar_value(a: &ArrayRef) -> f64 {
    let b = a.borrow();
    debug_assert_eq!(b.numel(), 1);
    b.data[0]
}

fn shape_of(a: &ArrayRef) -> Vec<usize> {
    a.borrow().shape.clone()
}

fn any_grad(inputs: &[&ArrayRef]) -> bool {
    inputs.iter().any(|a| a.borrow().requires_grad)
}

fn check_finite(data: &[f64], context: &'static str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite input to {context}")));
    }
    Ok(())
}

type BackwardFn = Box<dyn Fn()>;

/// Ordered record of executed operations with their backward rules.
///
/// `Tape::no_grad()` builds an inactive tape: ops compute values but record
/// nothing, which is what evaluation-time forwards use.
pub struct Tape {
    nodes: RefCell<Vec<BackwardFn>>,
    touched: RefCell<HashSet<usize>>,
    active: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            touched: RefCell::new(HashSet::new()),
            active: true,
        }
    }

    /// A tape that records nothing; forward values are still computed.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            touched: RefCell::new(HashSet::new()),
            active: false,
        }
    }

    fn record(&self, inputs: &[&ArrayRef], rule: impl Fn() + 'static) {
        if !self.active {
            return;
        }
        let mut touched = self.touched.borrow_mut();
        for a in inputs {
            if a.borrow().requires_grad {
                touched.insert(Rc::as_ptr(a) as usize);
            }
        }
        self.nodes.borrow_mut().push(Box::new(rule));
    }

    /// Whether `a` received any gradient contribution on this tape.
    pub fn touched(&self, a: &ArrayRef) -> bool {
        self.touched.borrow().contains(&(Rc::as_ptr(a) as usize))
    }

    /// Seed the scalar loss gradient with 1 and replay backward rules in
    /// reverse execution order. Consumes the recorded nodes.
    pub fn backward(&self, loss: &ArrayRef) -> Result<()> {
        {
            let mut l = loss.borrow_mut();
            if l.numel() != 1 {
                return Err(Error::numeric(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    l.shape
                )));
            }
            l.grad[0] = 1.0;
        }
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        for rule in nodes.iter().rev() {
            rule();
        }
        Ok(())
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// Standard matrix product of an m×k by a k×n array.
    pub fn matmul(&self, a: &ArrayRef, b: &ArrayRef) -> Result<ArrayRef> {
        let (sa, sb) = (shape_of(a), shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let ad = &a.borrow().data;
            let bd = &b.borrow().data;
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        let o = aref(NArray::new(vec![m, n], out, any_grad(&[a, b])));
        if self.active && o.borrow().requires_grad {
            let (a2, b2, o2) = (a.clone(), b.clone(), o.clone());
            self.record(&[a, b], move || {
                let g = o2.borrow().grad.clone();
                let (a_rg, b_rg) = (a2.borrow().requires_grad, b2.borrow().requires_grad);
                if a_rg {
                    let bd = b2.borrow().data.clone();
                    let mut am = a2.borrow_mut();
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            am.grad[i * k + p] += acc;
                        }
                    }
                }
                if b_rg {
                    let ad = a2.borrow().data.clone();
                    let mut bm = b2.borrow_mut();
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += ad[i * k + p] * g[i * n + j];
                            }
                            bm.grad[p * n + j] += acc;
                        }
                    }
                }
            });
        }
        Ok(o)
    }

    /// `a · bᵀ` for a m×k and b n×k. Used for batched projections and
    /// similarity matrices.
    pub fn matmul_bt(&self, a: &ArrayRef, b: &ArrayRef) -> Result<ArrayRef> {
        let (sa, sb) = (shape_of(a), shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                context: "matmul_bt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        {
            let ad = &a.borrow().data;
            let bd = &b.borrow().data;
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += arow[p] * brow[p];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        let o = aref(NArray::new(vec![m, n], out, any_grad(&[a, b])));
        if self.active && o.borrow().requires_grad {
            let (a2, b2, o2) = (a.clone(), b.clone(), o.clone());
            self.record(&[a, b], move || {
                let g = o2.borrow().grad.clone();
                let (a_rg, b_rg) = (a2.borrow().requires_grad, b2.borrow().requires_grad);
                if a_rg {
                    // grad_a += G · b
                    let bd = b2.borrow().data.clone();
                    let mut am = a2.borrow_mut();
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[j * k + p];
                            }
                            am.grad[i * k + p] += acc;
                        }
                    }
                }
                if b_rg {
                    // grad_b += Gᵀ · a
                    let ad = a2.borrow().data.clone();
                    let mut bm = b2.borrow_mut();
                    for j in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += g[i * n + j] * ad[i * k + p];
                            }
                            bm.grad[j * k + p] += acc;
                        }
                    }
                }
            });
        }
        Ok(o)
    }

    /// Matrix-vector product: w m×n times v of length n.
    pub fn matvec(&self, w: &ArrayRef, v: &ArrayRef) -> Result<ArrayRef> {
        let (sw, sv) = (shape_of(w), shape_of(v));
        if sw.len() != 2 || sv.len() != 1 || sw[1] != sv[0] {
            return Err(Error::ShapeMismatch {
                context: "matvec",
                lhs: sw,
                rhs: sv,
            });
        }
        let (m, n) = (sw[0], sw[1]);
        let mut out = vec![0.0; m];
        {
            let wd = &w.borrow().data;
            let vd = &v.borrow().data;
            for i in 0..m {
                let row = &wd[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += row[j] * vd[j];
                }
                out[i] = acc;
            }
        }
        let o = aref(NArray::new(vec![m], out, any_grad(&[w, v])));
        if self.active && o.borrow().requires_grad {
            let (w2, v2, o2) = (w.clone(), v.clone(), o.clone());
            self.record(&[w, v], move || {
                let g = o2.borrow().grad.clone();
                let (w_rg, v_rg) = (w2.borrow().requires_grad, v2.borrow().requires_grad);
                if w_rg {
                    let vd = v2.borrow().data.clone();
                    let mut wm = w2.borrow_mut();
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let grow = &mut wm.grad[i * n..(i + 1) * n];
                        for j in 0..n {
                            grow[j] += gi * vd[j];
                        }
                    }
                }
                if v_rg {
                    let wd = w2.borrow().data.clone();
                    let mut vm = v2.borrow_mut();
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let row = &wd[i * n..(i + 1) * n];
                        for j in 0..n {
                            vm.grad[j] += gi * row[j];
                        }
                    }
                }
            });
        }
        Ok(o)
    }

    pub fn transpose(&self, a: &ArrayRef) -> Result<ArrayRef> {
        let sa = shape_of(a);
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "transpose",
                lhs: sa,
                rhs: vec![],
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let ad = a.borrow().data.clone();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let o = aref(NArray::new(vec![n, m], out, any_grad(&[a])));
        if self.active && o.borrow().requires_grad {
            let (a2, o2) = (a.clone(), o.clone());
            self.record(&[a], move || {
                let g = o2.borrow().grad.clone();
                let mut am = a2.borrow_mut();
                for i in 0..m {
                    for j in 0..n {
                        am.grad[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Ok(o)
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn ew_check(
        &self,
        a: &ArrayRef,
        b: &ArrayRef,
        context: &'static str,
    ) -> Result<(Vec<usize>, usize)> {
        let (sa, sb) = (shape_of(a), shape_of(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                context,
                lhs: sa,
                rhs: sb,
            });
        }
        let n = sa.iter().product();
        Ok((sa, n))
    }

    pub fn add(&self, a: &ArrayRef, b: &ArrayRef) -> Result<ArrayRef> {
        let (shape, n) = self.ew_check(a, b, "add")?;
        let mut out = vec![0.0; n];
        {
            let ad = &a.borrow().data;
            let bd = &b.borrow().data;
            for i in 0..n {
                out[i] = ad[i] + bd[i];
            }
        }
        let o = aref(NArray::new(shape, out, any_grad(&[a, b])));
        if self.active && o.borrow().requires_grad {
            let (a2, b2, o2) = (a.clone(), b.clone(), o.clone());
            self.record(&[a, b], move || {
                let g = o2.borrow().grad.clone();
                if a2.borrow().requires_grad {
                    let mut am = a2.borrow_mut();
                    for i in 0..n {
                        am.grad[i] += g[i];
                    }
                }
                if b2.borrow().requires_grad {
                    let mut bm = b2.borrow_mut();
                    for i in 0..n {
                        bm.grad[i] += g[i];
                    }
                }
            });
        }
        Ok(o)
    }

    pub fn sub(&self, a: &ArrayRef, b: &ArrayRef) -> Result<ArrayRef> {
        let (shape, n) = self.ew_check(a, b, "sub")?;
        let mut out = vec![0.0; n];
        {
            let ad = &a.borrow().data;
            let bd = &b.borrow().data;
            for i in 0..n {
                out[i] = ad[i] - bd[i];
            }
        }
        let o = aref(NArray::new(shape, out, any_grad(&[a, b])));
        if self.active && o.borrow().requires_grad {
            let (a2, b2, o2) = (a.clone(), b.clone(), o.clone());
            self.record(&[a, b], move || {
                let g = o2.borrow().grad.clone();
                if a2.borrow().requires_grad {
                    let mut am = a2.borrow_mut();
                    for i in 0..n {
                        am.grad[i] += g[i];
                    }
                }
                if b2.borrow().requires_grad {
                    let mut bm = b2.borrow_mut();
                    for i in 0..n {
                        bm.grad[i] -= g[i];
                    }
                }
            });
        }
        Ok(o)
    }

    pub fn mul(&self, a: &ArrayRef, b: &ArrayRef) -> Result<ArrayRef> {
        let (shape, n) = self.ew_check(a, b, "mul")?;
        let mut out = vec![0.0; n];
        {
            let ad = &a.borrow().data;
            let bd = &b.borrow().data;
            for i in 0..n {
                out[i] = ad[i] * bd[i];
            }
        }
        let o = aref(NArray::new(shape, out, any_grad(&[a, b])));
        if self.active && o.borrow().requires_grad {
            let (a2, b2, o2) = (a.clone(), b.clone(), o.clone());
            self.record(&[a, b], move || {
                let g = o2.borrow().grad.clone();
                if a2.borrow().requires_grad {
                    let bd = b2.borrow().data.clone();
                    let mut am = a2.borrow_mut();
                    for i in 0..n {
                        am.grad[i] += g[i] * bd[i];
                    }
                }
                if b2.borrow().requires_grad {
                    let ad = a2.borrow().data.clone();
                    let mut bm = b2.borrow_mut();
                    for i in 0..n {
                        bm.grad[i] += g[i] * ad[i];
                    }
                }
            });
        }
        Ok(o)
    }

    pub fn scale(&self, a: &ArrayRef, c: f64) -> Result<ArrayRef> {
        let shape = shape_of(a);
        let out: Vec<f64> = a.borrow().data.iter().map(|v| v * c).collect();
        let o = aref(NArray::new(shape, out, any_grad(&[a])));
        if self.active && o.borrow().requires_grad {
            let (a2, o2) = (a.clone(), o.clone());
            self.record(&[a], move || {
                let g = o2.borrow().grad.clone();
                let mut am = a2.borrow_mut();
                for (ga, gi) in am.grad.iter_mut().zip(g.iter()) {
                    *ga += c * gi;
                }
            });
        }
        Ok(o)
    }

    pub fn sum(&self, a: &ArrayRef) -> Result<ArrayRef> {
        let s: f64 = a.borrow().data.iter().sum();
        let o = aref(NArray::new(vec![1], vec![s], any_grad(&[a])));
        if self.active && o.borrow().requires_grad {
            let (a2, o2) = (a.clone(), o.clone());
            self.record(&[a], move || {
                let g = o2.borrow().grad[0];
                let mut am = a2.borrow_mut();
                for ga in am.grad.iter_mut() {
                    *ga += g;
                }
            });
        }
        Ok(o)
    }

    /// Exact GELU: x · Φ(x) with Φ the standard normal CDF.
    pub fn gelu(&self, a: &ArrayRef) -> Result<ArrayRef> {
        let shape = shape_of(a);
        check_finite(&a.borrow().data, "gelu")?;
        let out: Vec<f64> = a.borrow().data.iter().map(|&x| x * phi_cdf(x)).collect();
        let o = aref(NArray::new(shape, out, any_grad(&[a])));
        if self.active && o.borrow().requires_grad {
            let (a2, o2) = (a.clone(), o.clone());
            self.record(&[a], move || {
                let g = o2.borrow().grad.clone();
                let mut am = a2.borrow_mut();
                for i in 0..g.len() {
                    let x = am.data[i];
                    am.grad[i] += g[i] * (phi_cdf(x) + x * phi_pdf(x));
                }
            });
        }
        Ok(o)
    }

    /// Max-shifted softmax over a 1-D array.
    pub fn softmax(&self, v: &ArrayRef) -> Result<ArrayRef> {
        let sv = shape_of(v);
        if sv.len() != 1 || sv[0] == 0 {
            return Err(Error::ShapeMismatch {
                context: "softmax expects a non-empty 1-D array",
                lhs: sv,
                rhs: vec![],
            });
        }
        check_finite(&v.borrow().data, "softmax")?;
        let out = softmax_slice(&v.borrow().data);
        let o = aref(NArray::new(sv, out, any_grad(&[v])));
        if self.active && o.borrow().requires_grad {
            let (v2, o2) = (v.clone(), o.clone());
            self.record(&[v], move || {
                let (g, y) = {
                    let ob = o2.borrow();
                    (ob.grad.clone(), ob.data.clone())
                };
                let dot: f64 = g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).sum();
                let mut vm = v2.borrow_mut();
                for i in 0..y.len() {
                    vm.grad[i] += y[i] * (g[i] - dot);
                }
            });
        }
        Ok(o)
    }

    /// Keep the K largest entries of a dense weight vector (ties to the
    /// lowest index) and renormalize them to sum to 1. Returns the selected
    /// indices in ascending order alongside the weight array; gradients flow
    /// into the selected dense entries only.
    pub fn topk_renorm(&self, dense: &ArrayRef, k: usize) -> Result<(ArrayRef, Vec<usize>)> {
        let sv = shape_of(dense);
        if sv.len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "topk_renorm expects 1-D",
                lhs: sv,
                rhs: vec![],
            });
        }
        let n = sv[0];
        if k == 0 || k > n {
            return Err(Error::config(format!(
                "top-K out of range: K={k} with {n} experts"
            )));
        }
        let d = dense.borrow().data.clone();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).unwrap().then(i.cmp(&j)));
        let mut selected: Vec<usize> = order[..k].to_vec();
        selected.sort_unstable();
        let sum: f64 = selected.iter().map(|&i| d[i]).sum();
        let weights: Vec<f64> = selected.iter().map(|&i| d[i] / sum).collect();
        let o = aref(NArray::new(vec![k], weights, any_grad(&[dense])));
        if self.active && o.borrow().requires_grad {
            let (d2, o2) = (dense.clone(), o.clone());
            let sel = selected.clone();
            self.record(&[dense], move || {
                let g = o2.borrow().grad.clone();
                let mut dm = d2.borrow_mut();
                let vals: Vec<f64> = sel.iter().map(|&i| dm.data[i]).collect();
                let s: f64 = vals.iter().sum();
                let gd: f64 = g.iter().zip(vals.iter()).map(|(gi, di)| gi * di).sum();
                for (j, &idx) in sel.iter().enumerate() {
                    dm.grad[idx] += g[j] / s - gd / (s * s);
                }
            });
        }
        Ok((o, selected))
    }

    /// `Σᵢ wᵢ · vecᵢ` with a learnable weight vector of length k.
    pub fn weighted_sum(&self, vecs: &[ArrayRef], w: &ArrayRef) -> Result<ArrayRef> {
        let sw = shape_of(w);
        if sw.len() != 1 || sw[0] != vecs.len() || vecs.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "weighted_sum",
                lhs: sw,
                rhs: vec![vecs.len()],
            });
        }
        let d = shape_of(&vecs[0]);
        for v in vecs {
            if shape_of(v) != d {
                return Err(Error::ShapeMismatch {
                    context: "weighted_sum parts",
                    lhs: d,
                    rhs: shape_of(v),
                });
            }
        }
        let n: usize = d.iter().product();
        let mut out = vec![0.0; n];
        {
            let wd = &w.borrow().data;
            for (k, v) in vecs.iter().enumerate() {
                let vd = &v.borrow().data;
                for i in 0..n {
                    out[i] += wd[k] * vd[i];
                }
            }
        }
        let inputs: Vec<&ArrayRef> = vecs.iter().chain(std::iter::once(w)).collect();
        let o = aref(NArray::new(d, out, any_grad(&inputs)));
        if self.active && o.borrow().requires_grad {
            let vs: Vec<ArrayRef> = vecs.to_vec();
            let (w2, o2) = (w.clone(), o.clone());
            self.record(&inputs, move || {
                let g = o2.borrow().grad.clone();
                let wd = w2.borrow().data.clone();
                for (k, v) in vs.iter().enumerate() {
                    if v.borrow().requires_grad {
                        let mut vm = v.borrow_mut();
                        for i in 0..n {
                            vm.grad[i] += wd[k] * g[i];
                        }
                    }
                }
                if w2.borrow().requires_grad {
                    let mut acc = vec![0.0; wd.len()];
                    for (k, v) in vs.iter().enumerate() {
                        let vd = v.borrow();
                        let mut dot = 0.0;
                        for i in 0..n {
                            dot += vd.data[i] * g[i];
                        }
                        acc[k] = dot;
                    }
                    let mut wm = w2.borrow_mut();
                    for (gw, a) in wm.grad.iter_mut().zip(acc.iter()) {
                        *gw += a;
                    }
                }
            });
        }
        Ok(o)
    }

    /// Order-preserving concatenation of 1-D parts.
    pub fn concat(&self, parts: &[ArrayRef]) -> Result<ArrayRef> {
        if parts.is_empty() {
            return Err(Error::config("concat requires at least one part"));
        }
        let mut out = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        for p in parts {
            let sp = shape_of(p);
            if sp.len() != 1 {
                return Err(Error::ShapeMismatch {
                    context: "concat expects 1-D parts",
                    lhs: sp,
                    rhs: vec![],
                });
            }
            offsets.push(out.len());
            out.extend_from_slice(&p.borrow().data);
        }
        let inputs: Vec<&ArrayRef> = parts.iter().collect();
        let o = aref(NArray::new(vec![out.len()], out, any_grad(&inputs)));
        if self.active && o.borrow().requires_grad {
            let ps: Vec<ArrayRef> = parts.to_vec();
            let o2 = o.clone();
            self.record(&inputs, move || {
                let g = o2.borrow().grad.clone();
                for (p, &off) in ps.iter().zip(offsets.iter()) {
                    if p.borrow().requires_grad {
                        let mut pm = p.borrow_mut();
                        let len = pm.numel();
                        for i in 0..len {
                            pm.grad[i] += g[off + i];
                        }
                    }
                }
            });
        }
        Ok(o)
    }

    /// Stack B same-length 1-D arrays into a B×d matrix.
    pub fn stack_rows(&self, rows: &[ArrayRef]) -> Result<ArrayRef> {
        if rows.is_empty() {
            return Err(Error::config("stack_rows requires at least one row"));
        }
        let d = shape_of(&rows[0]);
        if d.len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "stack_rows expects 1-D rows",
                lhs: d,
                rhs: vec![],
            });
        }
        let cols = d[0];
        let mut out = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let sr = shape_of(r);
            if sr != d {
                return Err(Error::ShapeMismatch {
                    context: "stack_rows row shapes",
                    lhs: d,
                    rhs: sr,
                });
            }
            out.extend_from_slice(&r.borrow().data);
        }
        let inputs: Vec<&ArrayRef> = rows.iter().collect();
        let o = aref(NArray::new(
            vec![rows.len(), cols],
            out,
            any_grad(&inputs),
        ));
        if self.active && o.borrow().requires_grad {
            let rs: Vec<ArrayRef> = rows.to_vec();
            let o2 = o.clone();
            self.record(&inputs, move || {
                let g = o2.borrow().grad.clone();
                for (i, r) in rs.iter().enumerate() {
                    if r.borrow().requires_grad {
                        let mut rm = r.borrow_mut();
                        for j in 0..cols {
                            rm.grad[j] += g[i * cols + j];
                        }
                    }
                }
            });
        }
        Ok(o)
    }

    /// Scale each row of a 2-D array to unit L2 norm.
    pub fn normalize_rows(&self, a: &ArrayRef) -> Result<ArrayRef> {
        let sa = shape_of(a);
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "normalize_rows expects 2-D",
                lhs: sa,
                rhs: vec![],
            });
        }
        let (m, d) = (sa[0], sa[1]);
        let ad = a.borrow().data.clone();
        let mut norms = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &ad[i * d..(i + 1) * d];
            let n2: f64 = row.iter().map(|v| v * v).sum();
            let n = n2.sqrt();
            if n == 0.0 {
                return Err(Error::DegenerateVector("normalize_rows"));
            }
            norms[i] = n;
            for j in 0..d {
                out[i * d + j] = row[j] / n;
            }
        }
        let o = aref(NArray::new(sa, out, any_grad(&[a])));
        if self.active && o.borrow().requires_grad {
            let (a2, o2) = (a.clone(), o.clone());
            self.record(&[a], move || {
                let (g, y) = {
                    let ob = o2.borrow();
                    (ob.grad.clone(), ob.data.clone())
                };
                let mut am = a2.borrow_mut();
                for i in 0..m {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        am.grad[i * d + j] += (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
            });
        }
        Ok(o)
    }

    /// Squared L2 distance Σ(aᵢ−bᵢ)² as a scalar.
    pub fn sq_l2(&self, a: &ArrayRef, b: &ArrayRef) -> Result<ArrayRef> {
        let (_, n) = self.ew_check(a, b, "sq_l2")?;
        let s: f64 = {
            let ad = &a.borrow().data;
            let bd = &b.borrow().data;
            (0..n).map(|i| (ad[i] - bd[i]) * (ad[i] - bd[i])).sum()
        };
        let o = aref(NArray::new(vec![1], vec![s], any_grad(&[a, b])));
        if self.active && o.borrow().requires_grad {
            let (a2, b2, o2) = (a.clone(), b.clone(), o.clone());
            self.record(&[a, b], move || {
                let g = o2.borrow().grad[0];
                let ad = a2.borrow().data.clone();
                let bd = b2.borrow().data.clone();
                if a2.borrow().requires_grad {
                    let mut am = a2.borrow_mut();
                    for i in 0..n {
                        am.grad[i] += g * 2.0 * (ad[i] - bd[i]);
                    }
                }
                if b2.borrow().requires_grad {
                    let mut bm = b2.borrow_mut();
                    for i in 0..n {
                        bm.grad[i] -= g * 2.0 * (ad[i] - bd[i]);
                    }
                }
            });
        }
        Ok(o)
    }

    /// Cosine similarity of two 1-D arrays as a scalar in [-1, 1].
    pub fn cosine_sim(&self, a: &ArrayRef, b: &ArrayRef) -> Result<ArrayRef> {
        let (_, n) = self.ew_check(a, b, "cosine_sim")?;
        let (dot, na, nb) = {
            let ad = &a.borrow().data;
            let bd = &b.borrow().data;
            let dot: f64 = (0..n).map(|i| ad[i] * bd[i]).sum();
            let na: f64 = ad.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = bd.iter().map(|v| v * v).sum::<f64>().sqrt();
            (dot, na, nb)
        };
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateVector("cosine_sim"));
        }
        let c = dot / (na * nb);
        let o = aref(NArray::new(vec![1], vec![c], any_grad(&[a, b])));
        if self.active && o.borrow().requires_grad {
            let (a2, b2, o2) = (a.clone(), b.clone(), o.clone());
            self.record(&[a, b], move || {
                let g = o2.borrow().grad[0];
                let ad = a2.borrow().data.clone();
                let bd = b2.borrow().data.clone();
                if a2.borrow().requires_grad {
                    let mut am = a2.borrow_mut();
                    for i in 0..n {
                        am.grad[i] += g * (bd[i] / (na * nb) - c * ad[i] / (na * na));
                    }
                }
                if b2.borrow().requires_grad {
                    let mut bm = b2.borrow_mut();
                    for i in 0..n {
                        bm.grad[i] += g * (ad[i] / (na * nb) - c * bd[i] / (nb * nb));
                    }
                }
            });
        }
        Ok(o)
    }

    /// In-batch InfoNCE over a B×B similarity matrix whose diagonal holds
    /// the positive pairs: mean over rows of logsumexp(row/τ) − diag/τ.
    pub fn infonce_rows(&self, sims: &ArrayRef, tau: f64) -> Result<ArrayRef> {
        let sa = shape_of(sims);
        if sa.len() != 2 || sa[0] != sa[1] {
            return Err(Error::ShapeMismatch {
                context: "infonce_rows expects a square matrix",
                lhs: sa,
                rhs: vec![],
            });
        }
        if tau <= 0.0 {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        let b = sa[0];
        if b < 2 {
            return Err(Error::config(
                "in-batch contrastive loss needs batch size >= 2",
            ));
        }
        let sd = sims.borrow().data.clone();
        let mut loss = 0.0;
        for i in 0..b {
            let row = &sd[i * b..(i + 1) * b];
            let lse = log_sum_exp(row, tau);
            loss += lse - row[i] / tau;
        }
        loss /= b as f64;
        let o = aref(NArray::new(vec![1], vec![loss], any_grad(&[sims])));
        if self.active && o.borrow().requires_grad {
            let (s2, o2) = (sims.clone(), o.clone());
            self.record(&[sims], move || {
                let g = o2.borrow().grad[0];
                let mut sm = s2.borrow_mut();
                let data = sm.data.clone();
                for i in 0..b {
                    let row = &data[i * b..(i + 1) * b];
                    let p = softmax_scaled(row, tau);
                    for j in 0..b {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        sm.grad[i * b + j] += g * (p[j] - delta) / (b as f64 * tau);
                    }
                }
            });
        }
        Ok(o)
    }

    /// Inverted dropout: zero with probability p and scale survivors by
    /// 1/(1-p). The mask is a pure function of `seed`.
    pub fn dropout(&self, a: &ArrayRef, p: f64, seed: u64) -> Result<ArrayRef> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} not in [0,1)")));
        }
        if p == 0.0 {
            return Ok(a.clone());
        }
        let shape = shape_of(a);
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let out: Vec<f64> = a
            .borrow()
            .data
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| v * m)
            .collect();
        let o = aref(NArray::new(shape, out, any_grad(&[a])));
        if self.active && o.borrow().requires_grad {
            let (a2, o2) = (a.clone(), o.clone());
            self.record(&[a], move || {
                let g = o2.borrow().grad.clone();
                let mut am = a2.borrow_mut();
                for i in 0..g.len() {
                    am.grad[i] += g[i] * mask[i];
                }
            });
        }
        Ok(o)
    }
}

/// Standard normal CDF.
pub fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal PDF.
pub fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax_scaled(v: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = v.iter().map(|x| x / tau).collect();
    softmax_slice(&scaled)
}

fn log_sum_exp(v: &[f64], tau: f64) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
    let sum: f64 = v.iter().map(|x| (x / tau - max).exp()).sum();
    max + sum.ln()
}

/// Central-difference gradient oracle: (f(p+ε·eᵢ) − f(p−ε·eᵢ)) / 2ε.
///
/// `f` must be deterministic (dropout disabled).
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; p.len()];
    let mut work = p.to_vec();
    for i in 0..p.len() {
        work[i] = p[i] + eps;
        let up = f(&work)?;
        work[i] = p[i] - eps;
        let down = f(&work)?;
        work[i] = p[i];
        grad[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Max relative disagreement between an analytic and a numeric gradient,
/// measured on the infinity norm.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    let scale = numeric
        .iter()
        .chain(analytic.iter())
        .map(|v| v.abs())
        .fold(0.0_f64, f64::max);
    diff / (scale + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(data: &[f64], rg: bool) -> ArrayRef {
        aref(NArray::new(vec![data.len()], data.to_vec(), rg))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let t = Tape::no_grad();
        let eye = constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let o = t.matmul(&eye, &b).unwrap();
        assert_eq!(o.borrow().data, b.borrow().data);

        // [[1,2],[3,4]]·[[1],[1]] = [[3],[7]]
        let a = constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let ones = constant(vec![2, 1], vec![1.0, 1.0]);
        let o = t.matmul(&a, &ones).unwrap();
        assert_eq!(o.borrow().data, vec![3.0, 7.0]);

        let zero = constant(vec![2, 2], vec![0.0; 4]);
        let o = t.matmul(&zero, &b).unwrap();
        assert!(o.borrow().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let t = Tape::no_grad();
        let a = constant(vec![2, 3], vec![0.0; 6]);
        let b = constant(vec![2, 2], vec![0.0; 4]);
        let err = t.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let t = Tape::no_grad();
        let o = t.softmax(&vec1(&[0.0, 0.0], false)).unwrap();
        assert_eq!(o.borrow().data, vec![0.5, 0.5]);

        let o = t.softmax(&vec1(&[2.0_f64.ln(), 0.0], false)).unwrap();
        assert!((o.borrow().data[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((o.borrow().data[1] - 1.0 / 3.0).abs() < 1e-15);

        let o = t.softmax(&vec1(&[1000.0, 0.0], false)).unwrap();
        assert!((o.borrow().data[0] - 1.0).abs() < 1e-12);
        assert!(o.borrow().data[1].abs() < 1e-12);

        assert!(t.softmax(&vec1(&[f64::NAN, 0.0], false)).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_permutation_equivariant() {
        let t = Tape::no_grad();
        let v = [0.3, -1.2, 2.5, 0.0, 4.1];
        let y = t.softmax(&vec1(&v, false)).unwrap();
        let sum: f64 = y.borrow().data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        let perm = [2usize, 0, 4, 1, 3];
        let vp: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
        let yp = t.softmax(&vec1(&vp, false)).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((yp.borrow().data[j] - y.borrow().data[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_values() {
        let t = Tape::no_grad();
        let o = t.gelu(&vec1(&[0.0], false)).unwrap();
        assert_eq!(o.borrow().data[0], 0.0);

        let o = t.gelu(&vec1(&[10.0], false)).unwrap();
        assert!((o.borrow().data[0] - 10.0).abs() < 1e-9);

        // High-precision value of 1·Φ(1) = 0.5·(1+erf(1/√2)).
        let expected = 0.841344746068543; // Φ(1) to 15 digits
        let o = t.gelu(&vec1(&[1.0], false)).unwrap();
        assert!((o.borrow().data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn cosine_and_sql2_cases() {
        let t = Tape::no_grad();
        let a = vec1(&[1.0, 1.0], false);
        assert!((scalar_value(&t.cosine_sim(&a, &a).unwrap()) - 1.0).abs() < 1e-15);

        let x = vec1(&[1.0, 0.0], false);
        let y = vec1(&[0.0, 1.0], false);
        assert_eq!(scalar_value(&t.cosine_sim(&x, &y).unwrap()), 0.0);

        let b = vec1(&[1.0, 0.0], false);
        let c = scalar_value(&t.cosine_sim(&a, &b).unwrap());
        assert!((c - 1.0 / 2.0_f64.sqrt()).abs() < 1e-15);

        let z = vec1(&[0.0, 0.0], false);
        assert!(matches!(
            t.cosine_sim(&a, &z).unwrap_err(),
            Error::DegenerateVector(_)
        ));

        assert_eq!(scalar_value(&t.sq_l2(&a, &a).unwrap()), 0.0);
        assert_eq!(scalar_value(&t.sq_l2(&x, &z).unwrap()), 1.0);
        let p = vec1(&[1.0, 2.0], false);
        let q = vec1(&[3.0, 1.0], false);
        assert_eq!(scalar_value(&t.sq_l2(&p, &q).unwrap()), 5.0);
    }

    #[test]
    fn concat_and_backward_through_it() {
        let t = Tape::new();
        let a = vec1(&[1.0], true);
        let b = vec1(&[2.0, 3.0], true);
        let c = t.concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.borrow().data, vec![1.0, 2.0, 3.0]);

        let s = t.sum(&c).unwrap();
        t.backward(&s).unwrap();
        assert_eq!(a.borrow().grad, vec![1.0]);
        assert_eq!(b.borrow().grad, vec![1.0, 1.0]);

        let t2 = Tape::no_grad();
        let single = t2.concat(&[vec1(&[4.0, 5.0], false)]).unwrap();
        assert_eq!(single.borrow().data, vec![4.0, 5.0]);
        assert!(t2.concat(&[]).is_err());
    }

    #[test]
    fn backward_square_and_linear() {
        // loss = x² at x = 3 -> grad 6
        let t = Tape::new();
        let x = vec1(&[3.0], true);
        let y = t.mul(&x, &x).unwrap();
        t.backward(&y).unwrap();
        assert_eq!(x.borrow().grad, vec![6.0]);

        // loss = sum(W·v) -> grad_W = outer(1, v)
        let t = Tape::new();
        let w = param(vec![2, 3], vec![0.5; 6]);
        let v = vec1(&[1.0, 2.0, 3.0], false);
        let o = t.matvec(&w, &v).unwrap();
        let s = t.sum(&o).unwrap();
        t.backward(&s).unwrap();
        assert_eq!(w.borrow().grad, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let x = vec1(&[1.0, 2.0], true);
        let y = t.scale(&x, 2.0).unwrap();
        assert!(t.backward(&y).is_err());
    }

    #[test]
    fn fan_out_sums_contributions() {
        // loss = x + x -> grad 2
        let t = Tape::new();
        let x = vec1(&[5.0], true);
        let y = t.add(&x, &x).unwrap();
        t.backward(&y).unwrap();
        assert_eq!(x.borrow().grad, vec![2.0]);
    }

    #[test]
    fn finite_diff_basics() {
        let g = finite_diff_grad(|p| Ok(p[0] * p[0]), &[1.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);

        let g = finite_diff_grad(|p| Ok(p[0].sin()), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn topk_renorm_cases() {
        let t = Tape::no_grad();
        // one-hot routing limit
        let d = softmax_slice(&[10.0, -10.0, -10.0, -10.0]);
        let (w, sel) = t.topk_renorm(&vec1(&d, false), 1).unwrap();
        assert_eq!(sel, vec![0]);
        assert!((w.borrow().data[0] - 1.0).abs() < 1e-4);

        // exact ties -> lowest indices
        let (w, sel) = t.topk_renorm(&vec1(&[0.25; 4], false), 2).unwrap();
        assert_eq!(sel, vec![0, 1]);
        assert_eq!(w.borrow().data, vec![0.5, 0.5]);

        // stated example: [0.5,0.2,0.2,0.1], K=2 -> {0,1}, [5/7,2/7]
        let (w, sel) = t.topk_renorm(&vec1(&[0.5, 0.2, 0.2, 0.1], false), 2).unwrap();
        assert_eq!(sel, vec![0, 1]);
        assert!((w.borrow().data[0] - 5.0 / 7.0).abs() < 1e-15);
        assert!((w.borrow().data[1] - 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn dropout_is_seeded_and_inverted() {
        let t = Tape::no_grad();
        let x = vec1(&[1.0; 1000], false);
        let a = t.dropout(&x, 0.3, 42).unwrap();
        let b = t.dropout(&x, 0.3, 42).unwrap();
        assert_eq!(a.borrow().data, b.borrow().data);
        let mean: f64 = a.borrow().data.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1, "inverted scaling keeps mean ~1, got {mean}");
        let c = t.dropout(&x, 0.3, 43).unwrap();
        assert_ne!(a.borrow().data, c.borrow().data);
    }

    #[test]
    fn ops_match_finite_differences() {
        // A composite expression exercising most backward rules.
        let base: Vec<f64> = vec![0.3, -0.7, 1.1, 0.4, -0.2, 0.9];
        let f = |p: &[f64]| -> Result<f64> {
            let t = Tape::no_grad();
            let w = constant(vec![2, 3], p.to_vec());
            let v = constant(vec![3], vec![0.5, -1.0, 0.25]);
            let h = t.matvec(&w, &v)?;
            let g = t.gelu(&h)?;
            let s = t.softmax(&g)?;
            let (wk, _) = t.topk_renorm(&s, 1)?;
            let mix = t.weighted_sum(&[g.clone()], &wk)?;
            let tgt = constant(vec![2], vec![0.2, 0.8]);
            let l1 = t.sq_l2(&mix, &tgt)?;
            let l2 = t.cosine_sim(&mix, &tgt)?;
            let tot = t.add(&l1, &l2)?;
            Ok(scalar_value(&tot))
        };
        let numeric = finite_diff_grad(f, &base, 1e-5).unwrap();

        let t = Tape::new();
        let w = param(vec![2, 3], base.clone());
        let v = constant(vec![3], vec![0.5, -1.0, 0.25]);
        let h = t.matvec(&w, &v).unwrap();
        let g = t.gelu(&h).unwrap();
        let s = t.softmax(&g).unwrap();
        let (wk, _) = t.topk_renorm(&s, 1).unwrap();
        let mix = t.weighted_sum(&[g.clone()], &wk).unwrap();
        let tgt = constant(vec![2], vec![0.2, 0.8]);
        let l1 = t.sq_l2(&mix, &tgt).unwrap();
        let l2 = t.cosine_sim(&mix, &tgt).unwrap();
        let tot = t.add(&l1, &l2).unwrap();
        t.backward(&tot).unwrap();
        assert!(t.touched(&w));

        let rel = grad_rel_err(&w.borrow().grad, &numeric);
        assert!(rel < 1e-4, "rel err {rel}");
    }

    #[test]
    fn infonce_matches_finite_differences_and_symmetry() {
        let t = Tape::no_grad();
        // all sims equal -> ln(B)
        let s = constant(vec![3, 3], vec![0.4; 9]);
        let l = t.infonce_rows(&s, 0.5).unwrap();
        assert!((scalar_value(&l) - 3.0_f64.ln()).abs() < 1e-12);

        // B=2 identity sims, tau=1 -> ln(1+e^-1)
        let s = constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let l = t.infonce_rows(&s, 1.0).unwrap();
        assert!((scalar_value(&l) - (1.0 + (-1.0_f64).exp()).ln()).abs() < 1e-12);

        // gradient check
        let base = vec![0.9, 0.1, -0.2, 0.2, 0.8, 0.0, -0.1, 0.3, 0.7];
        let numeric = finite_diff_grad(
            |p| {
                let t = Tape::no_grad();
                let s = constant(vec![3, 3], p.to_vec());
                Ok(scalar_value(&t.infonce_rows(&s, 0.3)?))
            },
            &base,
            1e-5,
        )
        .unwrap();
        let t = Tape::new();
        let s = param(vec![3, 3], base);
        let l = t.infonce_rows(&s, 0.3).unwrap();
        t.backward(&l).unwrap();
        assert!(grad_rel_err(&s.borrow().grad, &numeric) < 1e-4);
    }

    #[test]
    fn normalize_rows_gradcheck() {
        let base = vec![0.5, -1.0, 2.0, 0.3, 0.7, -0.4];
        let numeric = finite_diff_grad(
            |p| {
                let t = Tape::no_grad();
                let x = constant(vec![2, 3], p.to_vec());
                let y = t.normalize_rows(&x)?;
                let w = constant(vec![2, 3], vec![0.1, 0.5, -0.3, 0.2, 0.9, 0.4]);
                let m = t.mul(&y, &w)?;
                Ok(scalar_value(&t.sum(&m)?))
            },
            &base,
            1e-5,
        )
        .unwrap();
        let t = Tape::new();
        let x = param(vec![2, 3], base);
        let y = t.normalize_rows(&x).unwrap();
        let w = constant(vec![2, 3], vec![0.1, 0.5, -0.3, 0.2, 0.9, 0.4]);
        let m = t.mul(&y, &w).unwrap();
        let s = t.sum(&m).unwrap();
        t.backward(&s).unwrap();
        assert!(grad_rel_err(&x.borrow().grad, &numeric) < 1e-4);
    }
}
