//! Reverse-mode differentiation on an explicit tape.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] walks the nodes
//! in reverse, accumulating gradients into every node that requires them.
//! There is no graph rewriting: what was recorded is what runs.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

pub(crate) struct Node {
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub needs_grad: bool,
    back: Option<BackFn>,
}

type BackFn = Box<dyn Fn(&mut BackCtx<'_>)>;

pub(crate) struct BackCtx<'a> {
    pub nodes: &'a [Node],
    pub grads: &'a mut Vec<Option<Vec<f64>>>,
    pub out_grad: &'a [f64],
    pub out_value: &'a [f64],
}

#[inline]
fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// `c += a @ b` for row-major `a: n×k`, `b: k×m`, `c: n×m`.
pub(crate) fn mm_nn(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * m..(kk + 1) * m];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// `c += a @ bᵀ` for `a: n×m`, `b: k×m`, `c: n×k`.
pub(crate) fn mm_nt(c: &mut [f64], a: &[f64], b: &[f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let crow = &mut c[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * m..(j + 1) * m];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// `c += aᵀ @ b` for `a: n×k`, `b: n×m`, `c: k×m`.
pub(crate) fn mm_tn(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let crow = &mut c[kk * m..(kk + 1) * m];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// Recording tape: values forward, gradients backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, back: Option<BackFn>) -> TensorRef {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            back: if needs_grad { back } else { None },
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn needs(&self, r: TensorRef) -> bool {
        self.nodes[r.0].needs_grad
    }

    /// Record a leaf value. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorRef {
        self.push(value, requires_grad, None)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> TensorRef {
        self.leaf(value, false)
    }

    pub fn value(&self, r: TensorRef) -> &Tensor {
        &self.nodes[r.0].value
    }

    /// Gradient of the last `backward` root w.r.t. this node, if any flowed.
    pub fn grad(&self, r: TensorRef) -> Option<&[f64]> {
        self.nodes[r.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, r: TensorRef) -> Option<Tensor> {
        self.nodes[r.0].grad.as_ref().map(|g| {
            Tensor::new(self.nodes[r.0].value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&mut self, root: TensorRef) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.nodes[root.0].value.shape().to_vec(),
                reason: "backward root must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].back.is_some() {
                let node = &self.nodes[i];
                let back = node.back.as_ref().unwrap();
                let mut ctx = BackCtx {
                    nodes: &self.nodes,
                    grads: &mut grads,
                    out_grad: &g,
                    out_value: node.value.data(),
                };
                (back)(&mut ctx);
            }
            if self.nodes[i].needs_grad {
                self.nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }

    // ---- arithmetic ----

    /// Matrix product `a (n×k) @ b (k×m)`.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (n, k) = dims2(self.value(a));
        let (kb, m) = dims2(self.value(b));
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        mm_nn(&mut out, self.value(a).data(), self.value(b).data(), n, k, m);
        let (na, nb) = (self.needs(a), self.needs(b));
        let (a_len, b_len) = (n * k, k * m);
        let back: BackFn = Box::new(move |ctx| {
            if na {
                let bv = ctx.nodes[b.0].value.data().to_vec();
                let ga = slot(ctx.grads, a.0, a_len);
                mm_nt(ga, ctx.out_grad, &bv, n, m, k);
            }
            if nb {
                let av = ctx.nodes[a.0].value.data().to_vec();
                let gb = slot(ctx.grads, b.0, b_len);
                mm_tn(gb, &av, ctx.out_grad, n, k, m);
            }
        });
        Ok(self.push(Tensor::new(vec![n, m], out)?, na || nb, Some(back)))
    }

    /// Row-packed batched matrix product: row `q` of the result is
    /// `A_q (m×k) @ B_q (k×n)` where `a` stores `A_q` flattened per row.
    pub fn bmm(
        &mut self,
        a: TensorRef,
        b: TensorRef,
        m: usize,
        k: usize,
        n: usize,
    ) -> Result<TensorRef> {
        let (qa, ca) = dims2(self.value(a));
        let (qb, cb) = dims2(self.value(b));
        if qa != qb || ca != m * k || cb != k * n {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let q = qa;
        let mut out = vec![0.0; q * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..q {
                mm_nn(
                    &mut out[i * m * n..(i + 1) * m * n],
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: BackFn = Box::new(move |ctx| {
            let av = &ctx.nodes[a.0].value;
            let bv = &ctx.nodes[b.0].value;
            if na {
                let bd = bv.data().to_vec();
                let ga = slot(ctx.grads, a.0, q * m * k);
                for i in 0..q {
                    mm_nt(
                        &mut ga[i * m * k..(i + 1) * m * k],
                        &ctx.out_grad[i * m * n..(i + 1) * m * n],
                        &bd[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                    );
                }
            }
            if nb {
                let ad = av.data().to_vec();
                let gb = slot(ctx.grads, b.0, q * k * n);
                for i in 0..q {
                    mm_tn(
                        &mut gb[i * k * n..(i + 1) * k * n],
                        &ad[i * m * k..(i + 1) * m * k],
                        &ctx.out_grad[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        });
        Ok(self.push(Tensor::new(vec![q, m * n], out)?, na || nb, Some(back)))
    }

    fn elementwise2(
        &mut self,
        op: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(f64, f64) -> f64,
        back: BackFn,
    ) -> Result<TensorRef> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, needs, Some(back)))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (na, nb) = (self.needs(a), self.needs(b));
        let len = self.value(a).len();
        let back: BackFn = Box::new(move |ctx| {
            if na {
                let ga = slot(ctx.grads, a.0, len);
                for (g, &og) in ga.iter_mut().zip(ctx.out_grad) {
                    *g += og;
                }
            }
            if nb {
                let gb = slot(ctx.grads, b.0, len);
                for (g, &og) in gb.iter_mut().zip(ctx.out_grad) {
                    *g += og;
                }
            }
        });
        self.elementwise2("add", a, b, |x, y| x + y, back)
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (na, nb) = (self.needs(a), self.needs(b));
        let len = self.value(a).len();
        let back: BackFn = Box::new(move |ctx| {
            if na {
                let ga = slot(ctx.grads, a.0, len);
                for (g, &og) in ga.iter_mut().zip(ctx.out_grad) {
                    *g += og;
                }
            }
            if nb {
                let gb = slot(ctx.grads, b.0, len);
                for (g, &og) in gb.iter_mut().zip(ctx.out_grad) {
                    *g -= og;
                }
            }
        });
        self.elementwise2("sub", a, b, |x, y| x - y, back)
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (na, nb) = (self.needs(a), self.needs(b));
        let len = self.value(a).len();
        let back: BackFn = Box::new(move |ctx| {
            if na {
                let bv = ctx.nodes[b.0].value.data().to_vec();
                let ga = slot(ctx.grads, a.0, len);
                for i in 0..len {
                    ga[i] += ctx.out_grad[i] * bv[i];
                }
            }
            if nb {
                let av = ctx.nodes[a.0].value.data().to_vec();
                let gb = slot(ctx.grads, b.0, len);
                for i in 0..len {
                    gb[i] += ctx.out_grad[i] * av[i];
                }
            }
        });
        self.elementwise2("mul", a, b, |x, y| x * y, back)
    }

    /// Elementwise sum of same-shape tensors.
    pub fn sum_list(&mut self, terms: &[TensorRef]) -> Result<TensorRef> {
        let first = *terms.first().ok_or_else(|| Error::Config(
            "sum_list needs at least one term".into(),
        ))?;
        let shape = self.value(first).shape().to_vec();
        for &t in &terms[1..] {
            if self.value(t).shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "sum_list",
                    left: shape,
                    right: self.value(t).shape().to_vec(),
                });
            }
        }
        let len = self.value(first).len();
        let mut data = vec![0.0; len];
        for &t in terms {
            for (d, &v) in data.iter_mut().zip(self.value(t).data()) {
                *d += v;
            }
        }
        let parents: Vec<(TensorRef, bool)> =
            terms.iter().map(|&t| (t, self.needs(t))).collect();
        let needs = parents.iter().any(|&(_, n)| n);
        let back: BackFn = Box::new(move |ctx| {
            for &(t, n) in &parents {
                if n {
                    let g = slot(ctx.grads, t.0, len);
                    for (gv, &og) in g.iter_mut().zip(ctx.out_grad) {
                        *gv += og;
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(shape, data)?, needs, Some(back)))
    }

    pub fn scale(&mut self, a: TensorRef, s: f64) -> TensorRef {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| s * x).collect();
        let shape = self.value(a).shape().to_vec();
        let na = self.needs(a);
        let len = data.len();
        let back: BackFn = Box::new(move |ctx| {
            if na {
                let ga = slot(ctx.grads, a.0, len);
                for (g, &og) in ga.iter_mut().zip(ctx.out_grad) {
                    *g += s * og;
                }
            }
        });
        self.push(Tensor::new(shape, data).expect("same shape"), na, Some(back))
    }

    pub fn square(&mut self, a: TensorRef) -> TensorRef {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x * x).collect();
        let shape = self.value(a).shape().to_vec();
        let na = self.needs(a);
        let len = data.len();
        let back: BackFn = Box::new(move |ctx| {
            if na {
                let av = ctx.nodes[a.0].value.data().to_vec();
                let ga = slot(ctx.grads, a.0, len);
                for i in 0..len {
                    ga[i] += 2.0 * av[i] * ctx.out_grad[i];
                }
            }
        });
        self.push(Tensor::new(shape, data).expect("same shape"), na, Some(back))
    }

    /// Elementwise `max(0, x)`; gradient passes where `x > 0`.
    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        let na = self.needs(a);
        let len = data.len();
        let back: BackFn = Box::new(move |ctx| {
            if na {
                let av = ctx.nodes[a.0].value.data().to_vec();
                let ga = slot(ctx.grads, a.0, len);
                for i in 0..len {
                    if av[i] > 0.0 {
                        ga[i] += ctx.out_grad[i];
                    }
                }
            }
        });
        self.push(Tensor::new(shape, data).expect("same shape"), na, Some(back))
    }

    // ---- row-vector broadcasts over an n×c matrix ----

    fn rowvec_check(&self, op: &'static str, x: TensorRef, v: TensorRef) -> Result<(usize, usize)> {
        let (n, c) = dims2(self.value(x));
        if self.value(v).len() != c {
            return Err(Error::ShapeMismatch {
                op,
                left: self.value(x).shape().to_vec(),
                right: self.value(v).shape().to_vec(),
            });
        }
        Ok((n, c))
    }

    /// `x[i,j] + v[j]`.
    pub fn add_rowvec(&mut self, x: TensorRef, v: TensorRef) -> Result<TensorRef> {
        let (n, c) = self.rowvec_check("add_rowvec", x, v)?;
        let vv = self.value(v).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv + vv[i % c])
            .collect();
        let (nx, nv) = (self.needs(x), self.needs(v));
        let back: BackFn = Box::new(move |ctx| {
            if nx {
                let gx = slot(ctx.grads, x.0, n * c);
                for (g, &og) in gx.iter_mut().zip(ctx.out_grad) {
                    *g += og;
                }
            }
            if nv {
                let gv = slot(ctx.grads, v.0, c);
                for i in 0..n {
                    for j in 0..c {
                        gv[j] += ctx.out_grad[i * c + j];
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(vec![n, c], data)?, nx || nv, Some(back)))
    }

    /// `x[i,j] - v[j]`.
    pub fn sub_rowvec(&mut self, x: TensorRef, v: TensorRef) -> Result<TensorRef> {
        let (n, c) = self.rowvec_check("sub_rowvec", x, v)?;
        let vv = self.value(v).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv - vv[i % c])
            .collect();
        let (nx, nv) = (self.needs(x), self.needs(v));
        let back: BackFn = Box::new(move |ctx| {
            if nx {
                let gx = slot(ctx.grads, x.0, n * c);
                for (g, &og) in gx.iter_mut().zip(ctx.out_grad) {
                    *g += og;
                }
            }
            if nv {
                let gv = slot(ctx.grads, v.0, c);
                for i in 0..n {
                    for j in 0..c {
                        gv[j] -= ctx.out_grad[i * c + j];
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(vec![n, c], data)?, nx || nv, Some(back)))
    }

    /// `x[i,j] * v[j]`.
    pub fn mul_rowvec(&mut self, x: TensorRef, v: TensorRef) -> Result<TensorRef> {
        let (n, c) = self.rowvec_check("mul_rowvec", x, v)?;
        let vv = self.value(v).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv * vv[i % c])
            .collect();
        let (nx, nv) = (self.needs(x), self.needs(v));
        let back: BackFn = Box::new(move |ctx| {
            if nx {
                let vd = ctx.nodes[v.0].value.data().to_vec();
                let gx = slot(ctx.grads, x.0, n * c);
                for i in 0..n {
                    for j in 0..c {
                        gx[i * c + j] += ctx.out_grad[i * c + j] * vd[j];
                    }
                }
            }
            if nv {
                let xd = ctx.nodes[x.0].value.data().to_vec();
                let gv = slot(ctx.grads, v.0, c);
                for i in 0..n {
                    for j in 0..c {
                        gv[j] += ctx.out_grad[i * c + j] * xd[i * c + j];
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(vec![n, c], data)?, nx || nv, Some(back)))
    }

    /// Scale row `i` by the fixed coefficient `coeffs[i]`.
    pub fn row_scale(&mut self, x: TensorRef, coeffs: Vec<f64>) -> Result<TensorRef> {
        let (n, c) = dims2(self.value(x));
        if coeffs.len() != n {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                left: vec![n, c],
                right: vec![coeffs.len()],
            });
        }
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for v in &mut data[i * c..(i + 1) * c] {
                *v *= coeffs[i];
            }
        }
        let nx = self.needs(x);
        let back_coeffs = coeffs;
        let back: BackFn = Box::new(move |ctx| {
            if nx {
                let gx = slot(ctx.grads, x.0, n * c);
                for i in 0..n {
                    let s = back_coeffs[i];
                    for j in 0..c {
                        gx[i * c + j] += s * ctx.out_grad[i * c + j];
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(vec![n, c], data)?, nx, Some(back)))
    }

    // ---- row plumbing ----

    /// Sum consecutive row pairs: `2p×c -> p×c`.
    pub fn pair_sum_rows(&mut self, x: TensorRef) -> Result<TensorRef> {
        let (n, c) = dims2(self.value(x));
        if n % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: vec![n, c],
                reason: "pair_sum_rows needs an even row count".into(),
            });
        }
        let p = n / 2;
        let xd = self.value(x).data();
        let mut data = vec![0.0; p * c];
        for i in 0..p {
            for j in 0..c {
                data[i * c + j] = xd[2 * i * c + j] + xd[(2 * i + 1) * c + j];
            }
        }
        let nx = self.needs(x);
        let back: BackFn = Box::new(move |ctx| {
            if nx {
                let gx = slot(ctx.grads, x.0, n * c);
                for i in 0..p {
                    for j in 0..c {
                        let og = ctx.out_grad[i * c + j];
                        gx[2 * i * c + j] += og;
                        gx[(2 * i + 1) * c + j] += og;
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(vec![p, c], data)?, nx, Some(back)))
    }

    /// Duplicate each row in place: `p×c -> 2p×c` with rows `0,0,1,1,...`.
    pub fn dup_rows(&mut self, x: TensorRef) -> Result<TensorRef> {
        let (p, c) = dims2(self.value(x));
        let xd = self.value(x).data();
        let mut data = vec![0.0; 2 * p * c];
        for i in 0..p {
            data[2 * i * c..(2 * i + 1) * c].copy_from_slice(&xd[i * c..(i + 1) * c]);
            data[(2 * i + 1) * c..(2 * i + 2) * c].copy_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let nx = self.needs(x);
        let back: BackFn = Box::new(move |ctx| {
            if nx {
                let gx = slot(ctx.grads, x.0, p * c);
                for i in 0..p {
                    for j in 0..c {
                        gx[i * c + j] +=
                            ctx.out_grad[2 * i * c + j] + ctx.out_grad[(2 * i + 1) * c + j];
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(vec![2 * p, c], data)?, nx, Some(back)))
    }

    /// Concatenate along columns; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        let first = *parts.first().ok_or_else(|| Error::Config(
            "concat_cols needs at least one part".into(),
        ))?;
        let n = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (np, cp) = dims2(self.value(p));
            if np != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![n],
                    right: vec![np],
                });
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for i in 0..n {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let parents: Vec<(TensorRef, usize, bool)> = parts
            .iter()
            .zip(&widths)
            .map(|(&p, &w)| (p, w, self.needs(p)))
            .collect();
        let needs = parents.iter().any(|&(_, _, n)| n);
        let back: BackFn = Box::new(move |ctx| {
            let mut offset = 0;
            for &(p, w, np) in &parents {
                if np {
                    let gp = slot(ctx.grads, p.0, n * w);
                    for i in 0..n {
                        for j in 0..w {
                            gp[i * w + j] += ctx.out_grad[i * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        });
        Ok(self.push(Tensor::new(vec![n, total], data)?, needs, Some(back)))
    }

    /// Gather rows by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: TensorRef, idx: &[Option<usize>]) -> Result<TensorRef> {
        let (n, c) = dims2(self.value(x));
        for &i in idx.iter().flatten() {
            if i >= n {
                return Err(Error::InvalidShape {
                    shape: vec![n, c],
                    reason: format!("gather index {i} out of {n} rows"),
                });
            }
        }
        let xd = self.value(x).data();
        let q = idx.len();
        let mut data = vec![0.0; q * c];
        for (r, &src) in idx.iter().enumerate() {
            if let Some(s) = src {
                data[r * c..(r + 1) * c].copy_from_slice(&xd[s * c..(s + 1) * c]);
            }
        }
        let nx = self.needs(x);
        let idx_back = idx.to_vec();
        let back: BackFn = Box::new(move |ctx| {
            if nx {
                let gx = slot(ctx.grads, x.0, n * c);
                for (r, &src) in idx_back.iter().enumerate() {
                    if let Some(s) = src {
                        for j in 0..c {
                            gx[s * c + j] += ctx.out_grad[r * c + j];
                        }
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(vec![q, c], data)?, nx, Some(back)))
    }

    /// Scatter rows of `x` into a fresh `out_rows×c` matrix at distinct
    /// `positions`; untouched rows are zero.
    pub fn scatter_rows(
        &mut self,
        x: TensorRef,
        positions: &[usize],
        out_rows: usize,
    ) -> Result<TensorRef> {
        let (q, c) = dims2(self.value(x));
        if positions.len() != q {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                left: vec![q, c],
                right: vec![positions.len()],
            });
        }
        let mut seen = vec![false; out_rows];
        for &p in positions {
            if p >= out_rows {
                return Err(Error::InvalidShape {
                    shape: vec![out_rows, c],
                    reason: format!("scatter position {p} out of {out_rows} rows"),
                });
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidShape {
                    shape: vec![out_rows, c],
                    reason: format!("duplicate scatter position {p}"),
                });
            }
        }
        let xd = self.value(x).data();
        let mut data = vec![0.0; out_rows * c];
        for (r, &p) in positions.iter().enumerate() {
            data[p * c..(p + 1) * c].copy_from_slice(&xd[r * c..(r + 1) * c]);
        }
        let nx = self.needs(x);
        let pos_back = positions.to_vec();
        let back: BackFn = Box::new(move |ctx| {
            if nx {
                let gx = slot(ctx.grads, x.0, q * c);
                for (r, &p) in pos_back.iter().enumerate() {
                    for j in 0..c {
                        gx[r * c + j] += ctx.out_grad[p * c + j];
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(vec![out_rows, c], data)?, nx, Some(back)))
    }

    /// View with a new shape of equal element count.
    pub fn reshape(&mut self, x: TensorRef, shape: Vec<usize>) -> Result<TensorRef> {
        let len = self.value(x).len();
        if shape.iter().product::<usize>() != len {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("reshape of {len} elements"),
            });
        }
        let data = self.value(x).data().to_vec();
        let nx = self.needs(x);
        let back: BackFn = Box::new(move |ctx| {
            if nx {
                let gx = slot(ctx.grads, x.0, len);
                for (g, &og) in gx.iter_mut().zip(ctx.out_grad) {
                    *g += og;
                }
            }
        });
        Ok(self.push(Tensor::new(shape, data)?, nx, Some(back)))
    }

    // ---- reductions and broadcasts over rows ----

    /// Column means: `n×c -> [c]`.
    pub fn col_mean(&mut self, x: TensorRef) -> Result<TensorRef> {
        let (n, c) = dims2(self.value(x));
        if n == 0 {
            return Err(Error::InvalidShape {
                shape: vec![n, c],
                reason: "col_mean of zero rows".into(),
            });
        }
        let xd = self.value(x).data();
        let mut data = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                data[j] += xd[i * c + j];
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        let nx = self.needs(x);
        let back: BackFn = Box::new(move |ctx| {
            if nx {
                let gx = slot(ctx.grads, x.0, n * c);
                let inv = 1.0 / n as f64;
                for i in 0..n {
                    for j in 0..c {
                        gx[i * c + j] += ctx.out_grad[j] * inv;
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(vec![c], data)?, nx, Some(back)))
    }

    /// Column maxima: `n×c -> [c]`; gradient routes to the first maximal row.
    pub fn col_max(&mut self, x: TensorRef) -> Result<TensorRef> {
        let (n, c) = dims2(self.value(x));
        if n == 0 {
            return Err(Error::InvalidShape {
                shape: vec![n, c],
                reason: "col_max of zero rows".into(),
            });
        }
        let xd = self.value(x).data();
        let mut data = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for i in 0..n {
            for j in 0..c {
                let v = xd[i * c + j];
                if v > data[j] {
                    data[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let nx = self.needs(x);
        let back: BackFn = Box::new(move |ctx| {
            if nx {
                let gx = slot(ctx.grads, x.0, n * c);
                for j in 0..c {
                    gx[argmax[j] * c + j] += ctx.out_grad[j];
                }
            }
        });
        Ok(self.push(Tensor::new(vec![c], data)?, nx, Some(back)))
    }

    /// Tile a `[c]` vector into `n` identical rows.
    pub fn broadcast_rows(&mut self, v: TensorRef, n: usize) -> Result<TensorRef> {
        let c = self.value(v).len();
        let vd = self.value(v).data();
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            data[i * c..(i + 1) * c].copy_from_slice(vd);
        }
        let nv = self.needs(v);
        let back: BackFn = Box::new(move |ctx| {
            if nv {
                let gv = slot(ctx.grads, v.0, c);
                for i in 0..n {
                    for j in 0..c {
                        gv[j] += ctx.out_grad[i * c + j];
                    }
                }
            }
        });
        Ok(self.push(Tensor::new(vec![n, c], data)?, nv, Some(back)))
    }

    /// Elementwise `1/sqrt(v + eps)`.
    pub fn rsqrt_eps(&mut self, v: TensorRef, eps: f64) -> TensorRef {
        let data: Vec<f64> = self
            .value(v)
            .data()
            .iter()
            .map(|&x| 1.0 / (x + eps).sqrt())
            .collect();
        let shape = self.value(v).shape().to_vec();
        let nv = self.needs(v);
        let len = data.len();
        let back: BackFn = Box::new(move |ctx| {
            if nv {
                let y = ctx.out_value.to_vec();
                let gv = slot(ctx.grads, v.0, len);
                for i in 0..len {
                    gv[i] += ctx.out_grad[i] * (-0.5) * y[i] * y[i] * y[i];
                }
            }
        });
        self.push(Tensor::new(shape, data).expect("same shape"), nv, Some(back))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, x: TensorRef) -> Result<TensorRef> {
        let len = self.value(x).len();
        if len == 0 {
            return Err(Error::InvalidShape {
                shape: self.value(x).shape().to_vec(),
                reason: "mean of empty tensor".into(),
            });
        }
        let mean = self.value(x).data().iter().sum::<f64>() / len as f64;
        let nx = self.needs(x);
        let back: BackFn = Box::new(move |ctx| {
            if nx {
                let gx = slot(ctx.grads, x.0, len);
                let g = ctx.out_grad[0] / len as f64;
                for v in gx.iter_mut() {
                    *v += g;
                }
            }
        });
        Ok(self.push(Tensor::scalar(mean), nx, Some(back)))
    }

    /// Numerically stabilized softmax cross entropy over rows.
    ///
    /// Returns the scalar mean loss on the tape and the row-stochastic
    /// probabilities as a detached tensor. The gradient w.r.t. the logits is
    /// `(probs - onehot(labels)) / n`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorRef,
        labels: &[usize],
    ) -> Result<(TensorRef, Tensor)> {
        let (n, p) = dims2(self.value(logits));
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: vec![n, p],
                right: vec![labels.len()],
            });
        }
        for (row, &l) in labels.iter().enumerate() {
            if l >= p {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    row,
                    parts: p,
                });
            }
        }
        let xd = self.value(logits).data();
        let mut probs = vec![0.0; n * p];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &xd[i * p..(i + 1) * p];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &v in row {
                z += (v - max).exp();
            }
            let log_z = max + z.ln();
            loss += log_z - row[labels[i]];
            for j in 0..p {
                probs[i * p + j] = (row[j] - log_z).exp();
            }
        }
        loss /= n as f64;
        let probs_t = Tensor::new(vec![n, p], probs.clone())?;
        let nx = self.needs(logits);
        let labels_back = labels.to_vec();
        let back: BackFn = Box::new(move |ctx| {
            if nx {
                let g = ctx.out_grad[0] / n as f64;
                let gx = slot(ctx.grads, logits.0, n * p);
                for i in 0..n {
                    for j in 0..p {
                        let onehot = (j == labels_back[i]) as u8 as f64;
                        gx[i * p + j] += g * (probs[i * p + j] - onehot);
                    }
                }
            }
        });
        let loss_ref = self.push(Tensor::scalar(loss), nx, Some(back));
        Ok((loss_ref, probs_t))
    }
}

/// Row-stochastic softmax of a plain tensor (no tape participation).
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let (n, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = t.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row {
            z += (v - max).exp();
        }
        for j in 0..c {
            out[i * c + j] = (row[j] - max).exp() / z;
        }
    }
    Tensor::new(vec![n, c], out).expect("same shape")
}
