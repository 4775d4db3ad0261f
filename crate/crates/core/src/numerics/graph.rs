//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and, when any input requires a
//! gradient, records a closure mapping the output gradient to one gradient
//! per input. [`Graph::backward`] replays the tape in reverse.
//!
//! ```
//! use mcseg::numerics::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0]));
//! let y = g.sum_all(g.mul(x, x).unwrap());
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use rand::Rng;

use super::half::round_half_slice;
use super::tensor::{gemm, Mat, Precision, Tensor};
use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Recording context for one forward/backward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }
}

/// Attention span inside a packed row matrix.
///
/// Rows `start..start + len` form one sequence; keys at offsets `>= valid`
/// are padding and receive an additive −∞ mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Segment { start, len, valid: len }
    }
}

/// Softmaxed attention weights, indexed `[segment][head]`, each `[len, len]`.
pub type AttentionProbs = Vec<Vec<Tensor>>;

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the leaf did not take part in the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// A graph that records gradients for parameters.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(t, self.grad_enabled)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(t, false)
    }

    fn push_leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a custom operation. `backward` maps the output gradient to one
    /// optional gradient per parent, in order.
    pub fn custom<'g>(
        &'g self,
        parents: &[Var<'g>],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::shape("backward", nodes[loss.id].value.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&out_grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }

    /// Matrix product. When `b` is an `EmulatedHalf` kernel, `a` and the
    /// product are rounded to binary16; accumulation stays at full precision.
    pub fn matmul<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let av = a.value();
        let bv = b.value();
        let (m, k) = av.require_matrix("matmul")?;
        let (k2, n) = bv.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let half = bv.precision() == Precision::EmulatedHalf;
        let av = if half {
            let mut r = (*av).clone();
            round_half_slice(r.data_mut());
            Rc::new(r)
        } else {
            av
        };
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(av.data(), m, k, false),
            Mat::new(bv.data(), k, n, false),
            &mut out,
            false,
        );
        if half {
            round_half_slice(&mut out);
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.custom(&[a, b], value, move |g| {
            let mut da = vec![0.0; m * k];
            gemm(
                Mat::new(g.data(), m, n, false),
                Mat::new(bv.data(), k, n, true),
                &mut da,
                false,
            );
            let mut db = vec![0.0; k * n];
            gemm(
                Mat::new(av.data(), m, k, true),
                Mat::new(g.data(), m, n, false),
                &mut db,
                false,
            );
            vec![
                Some(Tensor::new(vec![m, k], da).unwrap()),
                Some(Tensor::new(vec![k, n], db).unwrap()),
            ]
        }))
    }

    pub fn add<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let value = a.value().add(&b.value())?;
        Ok(self.custom(&[a, b], value, |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let value = a.value().sub(&b.value())?;
        Ok(self.custom(&[a, b], value, |g| vec![Some(g.clone()), Some(g.scale(-1.0))]))
    }

    /// Elementwise product.
    pub fn mul<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let av = a.value();
        let bv = b.value();
        let value = av.zip_map(&bv, "mul", |x, y| x * y)?;
        Ok(self.custom(&[a, b], value, move |g| {
            vec![
                Some(g.zip_map(&bv, "mul", |x, y| x * y).unwrap()),
                Some(g.zip_map(&av, "mul", |x, y| x * y).unwrap()),
            ]
        }))
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_bias<'g>(&'g self, x: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        let xv = x.value();
        let bv = bias.value();
        let (m, n) = xv.require_matrix("add_bias")?;
        if bv.shape() != [n] {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut value = (*xv).clone().with_precision(Precision::Full);
        for r in 0..m {
            for (v, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        Ok(self.custom(&[x, bias], value, move |g| {
            let mut db = vec![0.0; n];
            for r in 0..m {
                for (d, v) in db.iter_mut().zip(g.row(r)) {
                    *d += v;
                }
            }
            vec![Some(g.clone()), Some(Tensor::vector(db))]
        }))
    }

    /// `x · w + b`.
    pub fn linear<'g>(&'g self, x: Var<'g>, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale<'g>(&'g self, a: Var<'g>, c: f64) -> Var<'g> {
        let value = a.value().scale(c);
        self.custom(&[a], value, move |g| vec![Some(g.scale(c))])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu<'g>(&'g self, a: Var<'g>) -> Var<'g> {
        let av = a.value();
        let value = av.map(gelu);
        self.custom(&[a], value, move |g| {
            vec![Some(g.zip_map(&av, "gelu", |d, x| d * gelu_grad(x)).unwrap())]
        })
    }

    pub fn relu<'g>(&'g self, a: Var<'g>) -> Var<'g> {
        let av = a.value();
        let value = av.map(|x| x.max(0.0));
        self.custom(&[a], value, move |g| {
            vec![Some(
                g.zip_map(&av, "relu", |d, x| if x > 0.0 { d } else { 0.0 }).unwrap(),
            )]
        })
    }

    /// Row-wise softmax; a vector is treated as one row.
    pub fn softmax_rows<'g>(&'g self, a: Var<'g>) -> Var<'g> {
        let av = a.value();
        let mut y = (*av).clone().with_precision(Precision::Full);
        let rows = y.rows();
        for r in 0..rows {
            softmax_in_place(y.row_mut(r));
        }
        let yv = Rc::new(y.clone());
        self.custom(&[a], y, move |g| {
            let mut dx = g.clone();
            for r in 0..rows {
                let yr = yv.row(r);
                let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, gy), yy) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(yr) {
                    *d = yy * (gy - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` of shape `[n]`.
    pub fn layer_norm<'g>(&'g self, x: Var<'g>, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let xv = x.value();
        let gv = gamma.value();
        let bv = beta.value();
        let (m, n) = xv.require_matrix("layer_norm")?;
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.custom(&[x, gamma, beta], value, move |g| {
            let mut dx = vec![0.0; m * n];
            let mut dgamma = vec![0.0; n];
            let mut dbeta = vec![0.0; n];
            for r in 0..m {
                let gr = g.row(r);
                let hr = &xhat[r * n..(r + 1) * n];
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for c in 0..n {
                    let dh = gr[c] * gv.data()[c];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[c];
                    dgamma[c] += gr[c] * hr[c];
                    dbeta[c] += gr[c];
                }
                mean_dh /= n as f64;
                mean_dh_h /= n as f64;
                for c in 0..n {
                    let dh = gr[c] * gv.data()[c];
                    dx[r * n + c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                }
            }
            vec![
                Some(Tensor::new(vec![m, n], dx).unwrap()),
                Some(Tensor::vector(dgamma)),
                Some(Tensor::vector(dbeta)),
            ]
        }))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<'g>(&'g self, x: Var<'g>, p: f64, rng: &mut impl Rng) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let xv = x.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(xv.shape().to_vec(), mask)?;
        let value = xv.zip_map(&mask, "dropout", |a, b| a * b)?;
        Ok(self.custom(&[x], value, move |g| {
            vec![Some(g.zip_map(&mask, "dropout", |a, b| a * b).unwrap())]
        }))
    }

    /// Selects rows of a `[v, d]` table.
    pub fn gather_rows<'g>(&'g self, table: Var<'g>, ids: &[usize]) -> Result<Var<'g>> {
        let tv = table.value();
        let (v, d) = tv.require_matrix("gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "row index {bad} out of range for table of {v} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let ids = ids.to_vec();
        Ok(self.custom(&[table], value, move |g| {
            let mut dt = Tensor::zeros(vec![v, d]);
            for (r, &i) in ids.iter().enumerate() {
                for (a, b) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                    *a += b;
                }
            }
            vec![Some(dt)]
        }))
    }

    /// `[m, p] ++ [m, q] → [m, p + q]`.
    pub fn concat_cols<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let av = a.value();
        let bv = b.value();
        let (m, p) = av.require_matrix("concat_cols")?;
        let (m2, q) = bv.require_matrix("concat_cols")?;
        if m != m2 {
            return Err(Error::shape("concat_cols", av.shape(), bv.shape()));
        }
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let value = Tensor::new(vec![m, p + q], out)?;
        Ok(self.custom(&[a, b], value, move |g| {
            let mut da = Vec::with_capacity(m * p);
            let mut db = Vec::with_capacity(m * q);
            for r in 0..m {
                let row = g.row(r);
                da.extend_from_slice(&row[..p]);
                db.extend_from_slice(&row[p..]);
            }
            vec![
                Some(Tensor::new(vec![m, p], da).unwrap()),
                Some(Tensor::new(vec![m, q], db).unwrap()),
            ]
        }))
    }

    pub fn sum_all<'g>(&'g self, a: Var<'g>) -> Var<'g> {
        let av = a.value();
        let shape = av.shape().to_vec();
        let value = Tensor::scalar(av.sum());
        self.custom(&[a], value, move |g| vec![Some(Tensor::full(shape.clone(), g.item()))])
    }

    /// Elementwise sum of equally shaped values.
    pub fn sum<'g>(&'g self, xs: &[Var<'g>]) -> Result<Var<'g>> {
        let first = xs.first().ok_or_else(|| Error::invalid("sum of zero values"))?;
        let mut acc = (*first.value()).clone().with_precision(Precision::Full);
        for x in &xs[1..] {
            acc = acc.add(&x.value())?;
        }
        let k = xs.len();
        Ok(self.custom(xs, acc, move |g| vec![Some(g.clone()); k]))
    }

    /// `Σ_l w[l] · xs[l]` for a weight vector `w` of length `xs.len()`.
    pub fn mix<'g>(&'g self, xs: &[Var<'g>], w: Var<'g>) -> Result<Var<'g>> {
        let wv = w.value();
        if wv.shape() != [xs.len()] || xs.is_empty() {
            return Err(Error::shape("mix", &[xs.len()], wv.shape()));
        }
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|x| x.value()).collect();
        let mut acc = Tensor::zeros(vals[0].shape().to_vec());
        for (v, &wl) in vals.iter().zip(wv.data()) {
            if v.shape() != acc.shape() {
                return Err(Error::shape("mix", acc.shape(), v.shape()));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
                *a += wl * b;
            }
        }
        let mut parents = xs.to_vec();
        parents.push(w);
        Ok(self.custom(&parents, acc, move |g| {
            let mut out: Vec<Option<Tensor>> = wv.data().iter().map(|&wl| Some(g.scale(wl))).collect();
            let dw: Vec<f64> = vals
                .iter()
                .map(|v| v.data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
                .collect();
            out.push(Some(Tensor::vector(dw)));
            out
        }))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows, d]`; each [`Segment`] attends only within its
    /// own rows. Returns the `[rows, d]` context and, if requested, the
    /// softmaxed weights per segment and head.
    pub fn attention<'g>(
        &'g self,
        q: Var<'g>,
        k: Var<'g>,
        v: Var<'g>,
        segments: &[Segment],
        heads: usize,
        capture: bool,
    ) -> Result<(Var<'g>, Option<AttentionProbs>)> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let (rows, d) = qv.require_matrix("attention")?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("{d} columns not divisible into {heads} heads")));
        }
        for s in segments {
            if s.start + s.len > rows || s.valid > s.len || (s.len > 0 && s.valid == 0) {
                return Err(Error::invalid(format!("bad attention segment {s:?} for {rows} rows")));
            }
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; rows * d];
        // probs[segment][head] as flat [len * len]
        let mut probs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(segments.len());
        let mut qh = Vec::new();
        let mut kh = Vec::new();
        let mut vh = Vec::new();
        let mut oh = Vec::new();
        for s in segments {
            let n = s.len;
            let mut seg_probs = Vec::with_capacity(heads);
            for h in 0..heads {
                extract_head(&qv, s, h, dk, &mut qh);
                extract_head(&kv, s, h, dk, &mut kh);
                extract_head(&vv, s, h, dk, &mut vh);
                let mut p = vec![0.0; n * n];
                gemm(Mat::new(&qh, n, dk, false), Mat::new(&kh, n, dk, true), &mut p, false);
                for i in 0..n {
                    let row = &mut p[i * n..(i + 1) * n];
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = if j < s.valid { *x * scale } else { f64::NEG_INFINITY };
                    }
                    softmax_in_place(row);
                }
                oh.clear();
                oh.resize(n * dk, 0.0);
                gemm(Mat::new(&p, n, n, false), Mat::new(&vh, n, dk, false), &mut oh, false);
                scatter_head(&oh, s, h, dk, d, &mut out);
                seg_probs.push(p);
            }
            probs.push(seg_probs);
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let captured = capture.then(|| {
            segments
                .iter()
                .zip(&probs)
                .map(|(s, hp)| {
                    hp.iter()
                        .map(|p| Tensor::new(vec![s.len, s.len], p.clone()).unwrap())
                        .collect()
                })
                .collect()
        });
        let segments = segments.to_vec();
        let var = self.custom(&[q, k, v], value, move |g| {
            let mut dq = vec![0.0; rows * d];
            let mut dkk = vec![0.0; rows * d];
            let mut dv = vec![0.0; rows * d];
            let (mut qh, mut kh, mut vh, mut goh) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (s, hp) in segments.iter().zip(&probs) {
                let n = s.len;
                for (h, p) in hp.iter().enumerate() {
                    extract_head(&qv, s, h, dk, &mut qh);
                    extract_head(&kv, s, h, dk, &mut kh);
                    extract_head(&vv, s, h, dk, &mut vh);
                    extract_head(g, s, h, dk, &mut goh);
                    // dV = Pᵀ · dO
                    let mut dvh = vec![0.0; n * dk];
                    gemm(Mat::new(p, n, n, true), Mat::new(&goh, n, dk, false), &mut dvh, false);
                    // dP = dO · Vᵀ
                    let mut ds = vec![0.0; n * n];
                    gemm(Mat::new(&goh, n, dk, false), Mat::new(&vh, n, dk, true), &mut ds, false);
                    for i in 0..n {
                        let pr = &p[i * n..(i + 1) * n];
                        let dr = &mut ds[i * n..(i + 1) * n];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (x, pp) in dr.iter_mut().zip(pr) {
                            *x = pp * (*x - dot) * scale;
                        }
                    }
                    let mut dqh = vec![0.0; n * dk];
                    gemm(Mat::new(&ds, n, n, false), Mat::new(&kh, n, dk, false), &mut dqh, false);
                    let mut dkh = vec![0.0; n * dk];
                    gemm(Mat::new(&ds, n, n, true), Mat::new(&qh, n, dk, false), &mut dkh, false);
                    scatter_head(&dqh, s, h, dk, d, &mut dq);
                    scatter_head(&dkh, s, h, dk, d, &mut dkk);
                    scatter_head(&dvh, s, h, dk, d, &mut dv);
                }
            }
            vec![
                Some(Tensor::new(vec![rows, d], dq).unwrap()),
                Some(Tensor::new(vec![rows, d], dkk).unwrap()),
                Some(Tensor::new(vec![rows, d], dv).unwrap()),
            ]
        });
        Ok((var, captured))
    }
}

fn extract_head(t: &Tensor, s: &Segment, h: usize, dk: usize, buf: &mut Vec<f64>) {
    buf.clear();
    for r in s.start..s.start + s.len {
        buf.extend_from_slice(&t.row(r)[h * dk..(h + 1) * dk]);
    }
}

fn scatter_head(src: &[f64], s: &Segment, h: usize, dk: usize, d: usize, out: &mut [f64]) {
    for i in 0..s.len {
        let r = s.start + i;
        out[r * d + h * dk..r * d + (h + 1) * dk].copy_from_slice(&src[i * dk..(i + 1) * dk]);
    }
}

/// Numerically stable softmax of one row; `-inf` entries get weight 0.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let g = Graph::inference();
        let x = g.constant(Tensor::vector(vec![0.0; 4]));
        assert_eq!(g.softmax_rows(x).value().data(), &[0.25; 4]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let g = Graph::inference();
        let x = g.constant(Tensor::full([2, 5], 3.7));
        let gamma = g.constant(Tensor::full([5], 1.0));
        let beta = g.constant(Tensor::zeros([5]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_identity_at_zero_and_scaled_otherwise() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.param(Tensor::full([10, 10], 1.0));
        let same = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(same.value().data(), x.value().data());
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn unused_params_get_no_gradient() {
        let g = Graph::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0]));
        let b = g.param(Tensor::vector(vec![3.0]));
        let loss = g.sum_all(g.scale(a, 2.0));
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0]);
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get_or_zeros(b).data(), &[0.0]);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let g = Graph::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::new([4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let x = g.constant(t);
        let seg = Segment {
            start: 0,
            len: 4,
            valid: 2,
        };
        let (_, probs) = g.attention(x, x, x, &[seg], 2, true).unwrap();
        for p in &probs.unwrap()[0] {
            for r in 0..4 {
                assert_eq!(p.get(r, 2), 0.0);
                assert_eq!(p.get(r, 3), 0.0);
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = Graph::new();
        let a = g.param(Tensor::zeros([2, 3]));
        let b = g.param(Tensor::zeros([2, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }
}
