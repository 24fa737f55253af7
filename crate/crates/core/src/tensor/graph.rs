use super::kernels::{self, ConvGeom};
use super::{matmul_dims, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    MaxPool { x: Var, winners: Vec<usize> },
    Reshape(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Build one per forward pass and drop it after
/// [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds `bias[c]` along axis 1 of a 2-d or 4-d input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape();
        if xs.len() < 2 || bs != [xs[1]] {
            return dim_err(format!("bias {bs:?} for input {xs:?}"));
        }
        let inner: usize = xs[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data.iter_mut().enumerate() {
            *v += b[(i / inner) % xs[1]];
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data.iter_mut() {
            *v = v.max(0.0);
        }
        let rg = self.needs(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Zero-padded cross-correlation of `x: [N,C,H,W]` with `k: [O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        let (&[n, c, h, w], &[o, kc, kh, kw]) = (&xs[..], &ks[..]) else {
            return dim_err(format!("conv2d of {xs:?} by {ks:?}"));
        };
        if c != kc || stride == 0 || kh == 0 || kw == 0 {
            return dim_err(format!("conv2d of {xs:?} by {ks:?} stride {stride}"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return dim_err(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}"
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad: padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * cols_n];
        let mut out = vec![0.0; n * o * cols_n];
        let xd = self.value(x).data();
        let kd = self.value(k).data();
        for i in 0..n {
            kernels::im2col(&geom, &xd[i * c * h * w..(i + 1) * c * h * w], &mut cols);
            kernels::gemm_nn(o, rows, cols_n, kd, &cols, &mut out[i * o * cols_n..(i + 1) * o * cols_n]);
        }
        let value = Tensor {
            shape: vec![n, o, geom.out_h, geom.out_w],
            data: out,
        };
        let rg = self.needs(&[x, k]);
        Ok(self.push(value, Op::Conv2d { x, k, geom }, rg))
    }

    /// Non-overlapping `size x size` max pooling over `[N,C,H,W]`; trailing
    /// rows and columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let [n, c, h, w] = xs[..] else {
            return dim_err(format!("max_pool2d of {xs:?}"));
        };
        if size == 0 || h < size || w < size {
            return dim_err(format!("max_pool2d window {size} over {h}x{w}"));
        }
        let (oh, ow) = (h / size, w / size);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut winners = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    winners.push(best);
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, oh, ow],
            data: out,
        };
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::MaxPool { x, winners }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Collapses everything after the leading dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.rows(), t.row_len()];
        self.reshape(x, &shape)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let [b, heads] = t.shape()[..] else {
            return dim_err(format!("cross entropy expects [batch, heads], got {:?}", t.shape()));
        };
        if b != labels.len() {
            return dim_err(format!("{b} logit rows but {} labels", labels.len()));
        }
        if b == 0 {
            return Err(Error::Usage("cross entropy over an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= heads) {
            return Err(Error::Index(format!("label {bad} outside {heads} heads")));
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(heads).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let value = Tensor::scalar(total / b as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err(format!("mse of {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        if ta.is_empty() {
            return Err(Error::Usage("mse over empty tensors".into()));
        }
        let sum: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(sum / ta.len() as f64);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mse(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err(format!("add of {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        for v in value.data.iter_mut() {
            *v *= s;
        }
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return dim_err(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = matmul_dims(self.value(*a).shape(), self.value(*b).shape())
                    .expect("validated in forward");
                if rg(*a) {
                    let da = slot(grads, *a, m * k);
                    kernels::gemm_nt(m, n, k, g, self.value(*b).data(), da);
                }
                if rg(*b) {
                    let db = slot(grads, *b, k * n);
                    kernels::gemm_tn(m, k, n, self.value(*a).data(), g, db);
                }
            }
            Op::AddBias(x, bias) => {
                if rg(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if rg(*bias) {
                    let xs = self.value(*x).shape();
                    let (ch, inner) = (xs[1], xs[2..].iter().product::<usize>());
                    let db = slot(grads, *bias, ch);
                    for (i, v) in g.iter().enumerate() {
                        db[(i / inner) % ch] += v;
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = slot(grads, *x, g.len());
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Conv2d { x, k, geom } => {
                let n = self.value(*x).shape()[0];
                let o = self.value(*k).shape()[0];
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.height * geom.width;
                let xd = self.value(*x).data();
                let kd = self.value(*k).data();
                let mut cols = vec![0.0; rows * cols_n];
                if rg(*k) {
                    let mut dk = vec![0.0; o * rows];
                    for i in 0..n {
                        kernels::im2col(geom, &xd[i * img..(i + 1) * img], &mut cols);
                        let go = &g[i * o * cols_n..(i + 1) * o * cols_n];
                        kernels::gemm_nt(o, cols_n, rows, go, &cols, &mut dk);
                    }
                    add_into(slot(grads, *k, o * rows), &dk);
                }
                if rg(*x) {
                    let mut dx = vec![0.0; n * img];
                    for i in 0..n {
                        cols.iter_mut().for_each(|c| *c = 0.0);
                        let go = &g[i * o * cols_n..(i + 1) * o * cols_n];
                        kernels::gemm_tn(o, rows, cols_n, kd, go, &mut cols);
                        kernels::col2im(geom, &cols, &mut dx[i * img..(i + 1) * img]);
                    }
                    add_into(slot(grads, *x, n * img), &dx);
                }
            }
            Op::MaxPool { x, winners } => {
                let len = self.value(*x).len();
                let dx = slot(grads, *x, len);
                for (&w, &gv) in winners.iter().zip(g) {
                    dx[w] += gv;
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let heads = probs.len() / b;
                let scale = g[0] / b as f64;
                let dl = slot(grads, *logits, probs.len());
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..heads {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        dl[i * heads + j] += scale * (probs[i * heads + j] - onehot);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * g[0] / ad.len() as f64;
                if rg(*a) {
                    let da = slot(grads, *a, ad.len());
                    for ((d, x), y) in da.iter_mut().zip(ad).zip(bd) {
                        *d += c * (x - y);
                    }
                }
                if rg(*b) {
                    let db = slot(grads, *b, bd.len());
                    for ((d, x), y) in db.iter_mut().zip(ad).zip(bd) {
                        *d -= c * (x - y);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Scale(a, s) => {
                let da = slot(grads, *a, g.len());
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += s * gv;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
