//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value. [`Tape::gradients`] walks the nodes backwards once, which is
//! valid because a node can only reference nodes created before it (the
//! graph is acyclic by construction).
//!
//! Discrete choices (cluster assignments, arg-max indices, mask thresholds)
//! never enter the tape as operations: they are passed in as plain index
//! vectors or constant leaves and so receive no gradient.

use std::sync::Arc;

use super::params::{ParamGrads, ParamStore};
use super::tensor::Tensor;
use super::NORM_FLOOR;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    RowNormalize(usize),
    SoftmaxRows(usize),
    MeanRows(usize),
    SumAll(usize),
    AddRowBroadcast(usize, usize),
    GatherRows(usize, Vec<usize>),
    PickPerRow(usize, Vec<usize>),
    ConcatCols(usize, usize),
    Reshape(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    AvgPool2d {
        input: usize,
        window: (usize, usize),
    },
    Upsample(usize),
    CrossEntropy {
        probs: usize,
        target: Arc<Tensor>,
        floor: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::RowNormalize(..) => "row_normalize",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::SumAll(..) => "sum",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::GatherRows(..) => "gather_rows",
            Op::PickPerRow(..) => "pick_per_row",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Upsample(..) => "upsample_bilinear",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node adjoints produced by [`Tape::gradients`].
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.adjoints[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("adjoint shape"))
    }
}

/// Single-episode recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    first_non_finite: Option<(usize, &'static str)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input. It still receives an adjoint, which is simply ignored.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to the parameter `name` of `store`. Repeated calls return
    /// the same node so that gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?
            .clone();
        let v = self.push(value, Op::Leaf);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Error if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some((node, op)) => Err(Error::NonFinite(format!("produced by {op} (node {node})"))),
        }
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = matmul_raw(av, bv, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a.0)))
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "elementwise {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a.0))
    }

    /// Divide every row of a matrix by `max(‖row‖, NORM_FLOOR)`.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let n = norm(row).max(NORM_FLOOR);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::RowNormalize(a.0)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::SoftmaxRows(a.0)))
    }

    /// `r×c -> 1×c` column means.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let mut out = vec![0.0; c];
        for row in self.value(a).rows() {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let t = Tensor::new(vec![1, c], out)?;
        Ok(self.push(t, Op::MeanRows(a.0)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    /// Add the `1×c` row `b` to every row of the `r×c` matrix `a`.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if self.shape(b) != [1, c] {
            return Err(Error::Shape(format!("broadcast {:?} onto {r}x{c}", self.shape(b))));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(&bv).for_each(|(x, y)| *x += y);
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::AddRowBroadcast(a.0, b.0)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if rows.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("row {bad} out of {r}")));
        }
        let src = self.value(a);
        let data = rows.iter().flat_map(|&i| src.row(i).iter().copied()).collect();
        let t = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows(a.0, rows.to_vec())))
    }

    /// `out[i] = a[i, cols[i]]`, an `r×1` column.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::Shape("pick_per_row index mismatch".into()));
        }
        let src = self.value(a);
        let data = cols.iter().enumerate().map(|(i, &j)| src.at2(i, j)).collect();
        let t = Tensor::new(vec![r, 1], data)?;
        Ok(self.push(t, Op::PickPerRow(a.0, cols.to_vec())))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(Error::Shape(format!("concat rows {ra} vs {rb}")));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let t = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push(t, Op::ConcatCols(a.0, b.0)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a.0)))
    }

    /// Square-kernel 2-D convolution with zero padding.
    ///
    /// `input`: C×H×W, `weight`: O×C×K×K, `bias`: O. Output O×H'×W' with
    /// `H' = (H + 2·pad - K) / stride + 1`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(input), self.shape(weight), stride, pad)?;
        if self.shape(bias) != [geo.out_c] {
            return Err(Error::Shape(format!("conv bias {:?}", self.shape(bias))));
        }
        let out = geo.forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let t = Tensor::new(vec![geo.out_c, geo.out_h, geo.out_w], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                stride,
                pad,
            },
        ))
    }

    /// Channel-wise mean pooling of a C×H×W tensor with stride = window.
    pub fn avg_pool2d(&mut self, input: Var, window: (usize, usize)) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        check_window(h, w, window)?;
        let (oh, ow) = (h / window.0, w / window.1);
        let count = (window.0 * window.1) as f64;
        let src = self.value(input).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * oh + y / window.0) * ow + x / window.1] += src[(ch * h + y) * w + x];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= count);
        let t = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(t, Op::AvgPool2d { input: input.0, window }))
    }

    /// Bilinear resize of a C×h×w tensor to C×out_h×out_w (half-pixel
    /// centres, edge clamped).
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Shape("upsample to empty extent".into()));
        }
        let ys = interp_axis(h, out_h);
        let xs = interp_axis(w, out_w);
        let src = self.value(input).data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v = (1.0 - fy) * ((1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1])
                        + fy * ((1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]);
                    out[(ch * out_h + oy) * out_w + ox] = v;
                }
            }
        }
        let t = Tensor::new(vec![c, out_h, out_w], out)?;
        Ok(self.push(t, Op::Upsample(input.0)))
    }

    /// `-(1/HW) Σ_pixels Σ_classes target · ln max(probs, floor)` for C×H×W
    /// probabilities and targets.
    pub fn cross_entropy(&mut self, probs: Var, target: Arc<Tensor>, floor: f64) -> Result<Var> {
        let (_, h, w) = self.value(probs).dims3()?;
        if self.shape(probs) != target.shape() {
            return Err(Error::Shape(format!(
                "cross entropy probs {:?} vs target {:?}",
                self.shape(probs),
                target.shape()
            )));
        }
        let p = self.value(probs).data();
        let s: f64 = p
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| if t == 0.0 { 0.0 } else { t * p.max(floor).ln() })
            .sum();
        let loss = -s / (h * w) as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs: probs.0,
                target,
                floor,
            },
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.check_finite()?;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            self.backprop_node(id, &g, &mut adj);
            adj[id] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Gradients of `loss` for every entry of `store`. Parameters that never
    /// reached the tape (or do not influence the loss) get zeros and are
    /// listed in [`ParamGrads::untouched`].
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<ParamGrads> {
        let grads = self.gradients(loss)?;
        let mut out = Vec::with_capacity(store.len());
        let mut untouched = Vec::new();
        for (name, value) in store.iter() {
            let g = self
                .params
                .iter()
                .find(|(n, _)| n == name)
                .and_then(|(_, v)| grads.wrt(*v));
            match g {
                Some(g) => out.push(g),
                None => {
                    untouched.push(name.to_string());
                    out.push(Tensor::zeros(value.shape()));
                }
            }
        }
        Ok(ParamGrads::new(out, untouched))
    }

    fn backprop_node(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[*a].value.dims2().unwrap();
                let n = self.nodes[*b].value.shape()[1];
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                // dA = G·Bᵀ, dB = Aᵀ·G
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let row = &mut db[p * n..(p + 1) * n];
                        row.iter_mut().zip(&g[i * n..(i + 1) * n]).for_each(|(d, gv)| *d += aip * gv);
                    }
                }
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[*a].value.dims2().unwrap();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.to_vec());
                accumulate(adj, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.to_vec());
                accumulate(adj, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                accumulate(adj, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                accumulate(adj, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(adj, *a, g.to_vec()),
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                accumulate(adj, *a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::RowNormalize(a) => {
                let x = self.nodes[*a].value.data();
                let c = node.value.shape()[1];
                let mut d = vec![0.0; x.len()];
                for ((dr, (xr, yr)), gr) in d
                    .chunks_exact_mut(c)
                    .zip(x.chunks_exact(c).zip(y.chunks_exact(c)))
                    .zip(g.chunks_exact(c))
                {
                    let n = norm(xr);
                    if n > NORM_FLOOR {
                        let yg: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = (g - y * yg) / n;
                        }
                    } else {
                        for (d, g) in dr.iter_mut().zip(gr) {
                            *d = g / NORM_FLOOR;
                        }
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.shape()[1];
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(g.chunks_exact(c)) {
                    let yg: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - yg);
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::MeanRows(a) => {
                let (r, _) = self.nodes[*a].value.dims2().unwrap();
                let inv = 1.0 / r as f64;
                let d = (0..r).flat_map(|_| g.iter().map(move |v| v * inv)).collect();
                accumulate(adj, *a, d);
            }
            Op::SumAll(a) => {
                let n = self.nodes[*a].value.len();
                accumulate(adj, *a, vec![g[0]; n]);
            }
            Op::AddRowBroadcast(a, b) => {
                let c = node.value.shape()[1];
                let mut db = vec![0.0; c];
                for gr in g.chunks_exact(c) {
                    db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                }
                accumulate(adj, *a, g.to_vec());
                accumulate(adj, *b, db);
            }
            Op::GatherRows(a, rows) => {
                let src = &self.nodes[*a].value;
                let c = src.shape()[1];
                let mut d = vec![0.0; src.len()];
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[k * c + j];
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::PickPerRow(a, cols) => {
                let src = &self.nodes[*a].value;
                let c = src.shape()[1];
                let mut d = vec![0.0; src.len()];
                for (i, &j) in cols.iter().enumerate() {
                    d[i * c + j] = g[i];
                }
                accumulate(adj, *a, d);
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.nodes[*a].value.dims2().unwrap();
                let cb = self.nodes[*b].value.shape()[1];
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for gr in g.chunks_exact(ca + cb) {
                    da.extend_from_slice(&gr[..ca]);
                    db.extend_from_slice(&gr[ca..]);
                }
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let geo = ConvGeometry::new(
                    self.nodes[*input].value.shape(),
                    self.nodes[*weight].value.shape(),
                    *stride,
                    *pad,
                )
                .unwrap();
                let (dx, dw, db) = geo.backward(self.nodes[*input].value.data(), self.nodes[*weight].value.data(), g);
                accumulate(adj, *input, dx);
                accumulate(adj, *weight, dw);
                accumulate(adj, *bias, db);
            }
            Op::AvgPool2d { input, window } => {
                let (c, h, w) = self.nodes[*input].value.dims3().unwrap();
                let (oh, ow) = (h / window.0, w / window.1);
                let inv = 1.0 / (window.0 * window.1) as f64;
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            d[(ch * h + yy) * w + xx] = g[(ch * oh + yy / window.0) * ow + xx / window.1] * inv;
                        }
                    }
                }
                accumulate(adj, *input, d);
            }
            Op::Upsample(input) => {
                let (c, h, w) = self.nodes[*input].value.dims3().unwrap();
                let (_, out_h, out_w) = node.value.dims3().unwrap();
                let ys = interp_axis(h, out_h);
                let xs = interp_axis(w, out_w);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let gv = g[(ch * out_h + oy) * out_w + ox];
                            plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                            plane[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                accumulate(adj, *input, d);
            }
            Op::CrossEntropy { probs, target, floor } => {
                let (_, h, w) = self.nodes[*probs].value.dims3().unwrap();
                let scale = -g[0] / (h * w) as f64;
                let p = self.nodes[*probs].value.data();
                let d = p
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| if p > *floor && t != 0.0 { scale * t / p } else { 0.0 })
                    .collect();
                accumulate(adj, *probs, d);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: usize, d: Vec<f64>) {
    match &mut adj[id] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, v)| *a += v),
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            orow.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, b)| *o += aip * b);
        }
    }
    out
}

pub(crate) fn check_window(h: usize, w: usize, window: (usize, usize)) -> Result<()> {
    if window.0 == 0 || window.1 == 0 {
        return Err(Error::InvalidArgument("zero pooling window".into()));
    }
    if window.0 > h || window.1 > w {
        return Err(Error::InvalidArgument(format!(
            "pooling window {window:?} larger than map {h}x{w}"
        )));
    }
    if h % window.0 != 0 || w % window.1 != 0 {
        return Err(Error::InvalidArgument(format!(
            "pooling window {window:?} does not divide map {h}x{w}"
        )));
    }
    Ok(())
}

/// Source taps `(i0, i1, frac)` for each output index along one axis.
pub(crate) fn interp_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

struct ConvGeometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [in_c, in_h, in_w] = input[..] else {
            return Err(Error::Shape(format!("conv input {input:?}")));
        };
        let [out_c, wc, kh, kw] = weight[..] else {
            return Err(Error::Shape(format!("conv weight {weight:?}")));
        };
        if wc != in_c || kh != kw || stride == 0 {
            return Err(Error::Shape(format!("conv weight {weight:?} for input {input:?}")));
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return Err(Error::Shape("conv kernel larger than padded input".into()));
        }
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
            k: kh,
            stride,
            pad,
        })
    }

    /// Input coordinate for output `o` and kernel tap `t`, if inside the map.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + t).checked_sub(self.pad)?;
        (p < extent).then_some(p)
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow, k) = (self.out_h, self.out_w, self.k);
        let mut out = vec![0.0; self.out_c * oh * ow];
        for oc in 0..self.out_c {
            let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = b[oc]);
            for ic in 0..self.in_c {
                let xin = &x[ic * self.in_h * self.in_w..(ic + 1) * self.in_h * self.in_w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((oc * self.in_c + ic) * k + ky) * k + kx];
                        for oy in 0..oh {
                            let Some(iy) = self.src(oy, ky, self.in_h) else { continue };
                            for ox in 0..ow {
                                if let Some(ix) = self.src(ox, kx, self.in_w) {
                                    plane[oy * ow + ox] += wv * xin[iy * self.in_w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, x: &[f64], w: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (oh, ow, k) = (self.out_h, self.out_w, self.k);
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; self.out_c];
        for oc in 0..self.out_c {
            let gp = &g[oc * oh * ow..(oc + 1) * oh * ow];
            db[oc] = gp.iter().sum();
            for ic in 0..self.in_c {
                let base = ic * self.in_h * self.in_w;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * self.in_c + ic) * k + ky) * k + kx;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let Some(iy) = self.src(oy, ky, self.in_h) else { continue };
                            for ox in 0..ow {
                                if let Some(ix) = self.src(ox, kx, self.in_w) {
                                    let gv = gp[oy * ow + ox];
                                    let xi = base + iy * self.in_w + ix;
                                    acc += gv * x[xi];
                                    dx[xi] += gv * wv;
                                }
                            }
                        }
                        dw[widx] = acc;
                    }
                }
            }
        }
        (dx, dw, db)
    }
}
