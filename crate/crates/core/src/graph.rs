//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a single-use tape: forward operations are evaluated eagerly
//! and recorded, [`Graph::backward`] walks the tape once in reverse. Nodes are
//! referenced by [`NodeId`]; inputs of a node always have smaller ids, so the
//! insertion order is a valid topological order.
//!
//! The op set is intentionally small: exactly what the masked-conditioning
//! models need. Every op has a finite-difference test in this module.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView4, ArrayViewMut4, Axis, Ix2, Ix4, IxDyn};

pub type Arr = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

struct AttnSaved {
    xs: Vec<Array2<f64>>,
    qs: Vec<Array2<f64>>,
    ks: Vec<Array2<f64>>,
    vs: Vec<Array2<f64>>,
    os: Vec<Array2<f64>>,
    attn: Vec<Array3<f64>>,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    /// `[m,k] x [k,n]`
    Matmul(NodeId, NodeId),
    /// `[B,O] + [O]` broadcast over rows
    AddRow(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// rows of `table [R,D]` selected per batch element
    Gather { table: NodeId, rows: Vec<usize> },
    /// stride-1 same-padding convolution; kernel size from the weight shape
    Conv2d { x: NodeId, w: NodeId, b: NodeId, cols: Array2<f64> },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    ConcatChannels(Vec<NodeId>),
    /// `[B,C] -> [B,C,H,W]`, every spatial position identical
    BroadcastSpatial { x: NodeId },
    /// `[B,C,H,W] + [B,C]` broadcast over spatial positions
    AddChannel { x: NodeId, c: NodeId },
    /// training-mode batch normalization over the batch axis of `[B,C]`
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    MeanAll(NodeId),
    SumAll(NodeId),
    /// multi-head self-attention over spatial positions of `[B,C,H,W]`
    SelfAttention {
        x: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        heads: usize,
        saved: AttnSaved,
    },
}

struct Node {
    value: Arr,
    grad: Option<Arr>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Arr, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arr) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Arr> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Arr> {
        self.nodes[id.0].grad.take()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::Matmul(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[bias.0].value.view();
        let v = (&xv + &bv).into_dyn();
        self.push(v, Op::AddRow(x, bias))
    }

    /// `x` through an affine layer: `x.dot(w) + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts
            .iter()
            .map(|p| self.nodes[p.0].value.view().into_dimensionality::<Ix2>().unwrap())
            .collect();
        // concatenate along axis 1 is not standard layout; normalize so
        // downstream ops can take contiguous slices
        let v = ndarray::concatenate(Axis(1), &views).unwrap();
        let v = v.as_standard_layout().to_owned().into_dyn();
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = xv.slice(ndarray::s![.., start..end]).to_owned().into_dyn();
        self.push(v, Op::SliceCols(x, start, end))
    }

    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> NodeId {
        let tv = self.nodes[table.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let d = tv.ncols();
        let mut out = Array2::<f64>::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&tv.row(r));
        }
        self.push(out.into_dyn(), Op::Gather { table, rows: rows.to_vec() })
    }

    /// Stride-1 convolution with same padding. `w` is `[Cout, Cin, k, k]`,
    /// `b` is `[Cout]`; `k` must be odd.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let (batch, cin, h, wd) = xv.dim();
        let (cout, cin_w, k, _) = wv.dim();
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(k % 2, 1, "conv2d requires odd kernel size");
        let pad = k / 2;
        let cols = im2col(&xv, k, pad);
        let w2 = wv.into_shape_with_order((cout, cin * k * k)).unwrap();
        let y2 = w2.dot(&cols); // [Cout, B*H*W]
        let mut out = ndarray::Array4::<f64>::zeros((batch, cout, h, wd));
        let hw = h * wd;
        {
            let y2s = y2.as_slice().unwrap();
            let outs = out.as_slice_mut().unwrap();
            for bi in 0..batch {
                for o in 0..cout {
                    let src = &y2s[o * batch * hw + bi * hw..][..hw];
                    let dst = &mut outs[(bi * cout + o) * hw..][..hw];
                    let bias = bv[o];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + bias;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, cols })
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (batch, c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 requires even spatial dims");
        let mut out = ndarray::Array4::<f64>::zeros((batch, c, h / 2, w / 2));
        for bi in 0..batch {
            for ci in 0..c {
                for y in 0..h / 2 {
                    for xo in 0..w / 2 {
                        let s = xv[[bi, ci, 2 * y, 2 * xo]]
                            + xv[[bi, ci, 2 * y, 2 * xo + 1]]
                            + xv[[bi, ci, 2 * y + 1, 2 * xo]]
                            + xv[[bi, ci, 2 * y + 1, 2 * xo + 1]];
                        out[[bi, ci, y, xo]] = 0.25 * s;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::AvgPool2(x))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (batch, c, h, w) = xv.dim();
        let mut out = ndarray::Array4::<f64>::zeros((batch, c, 2 * h, 2 * w));
        for bi in 0..batch {
            for ci in 0..c {
                for y in 0..h {
                    for xo in 0..w {
                        let v = xv[[bi, ci, y, xo]];
                        out[[bi, ci, 2 * y, 2 * xo]] = v;
                        out[[bi, ci, 2 * y, 2 * xo + 1]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * xo]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * xo + 1]] = v;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Upsample2(x))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts
            .iter()
            .map(|p| self.nodes[p.0].value.view().into_dimensionality::<Ix4>().unwrap())
            .collect();
        let v = ndarray::concatenate(Axis(1), &views).unwrap();
        let v = v.as_standard_layout().to_owned().into_dyn();
        self.push(v, Op::ConcatChannels(parts.to_vec()))
    }

    pub fn broadcast_spatial(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let (batch, c) = xv.dim();
        let mut out = ndarray::Array4::<f64>::zeros((batch, c, h, w));
        for bi in 0..batch {
            for ci in 0..c {
                out.slice_mut(ndarray::s![bi, ci, .., ..]).fill(xv[[bi, ci]]);
            }
        }
        self.push(out.into_dyn(), Op::BroadcastSpatial { x })
    }

    pub fn add_channel(&mut self, x: NodeId, c: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let cv = self.nodes[c.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let (batch, ch, h, w) = xv.dim();
        let mut out = xv.to_owned();
        for bi in 0..batch {
            for ci in 0..ch {
                let add = cv[[bi, ci]];
                out.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|v| v + add);
            }
        }
        let _ = (h, w);
        self.push(out.into_dyn(), Op::AddChannel { x, c })
    }

    /// Training-mode batch normalization of `[B,C]` over the batch axis
    /// (biased variance). Returns the normalized, scaled and shifted output.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let gv = self.nodes[gamma.0].value.view();
        let bv = self.nodes[beta.0].value.view();
        let (mean, var) = batch_stats(&xv);
        let (batch, c) = xv.dim();
        let mut out = Array2::<f64>::zeros((batch, c));
        for j in 0..c {
            let inv = 1.0 / (var[j] + eps).sqrt();
            let g = gv[[j]];
            let b = bv[[j]];
            for i in 0..batch {
                out[[i, j]] = g * (xv[[i, j]] - mean[j]) * inv + b;
            }
        }
        self.push(out.into_dyn(), Op::BatchNorm { x, gamma, beta, eps })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let m = self.nodes[x.0].value.mean().unwrap();
        self.push(Arr::from_elem(IxDyn(&[]), m), Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.sum();
        self.push(Arr::from_elem(IxDyn(&[]), s), Op::SumAll(x))
    }

    /// Multi-head self-attention over spatial positions. All four projection
    /// weights are `[C, C]`; the residual connection is the caller's business.
    pub fn self_attention(
        &mut self,
        x: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        heads: usize,
    ) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (batch, c, h, w) = xv.dim();
        assert!(c % heads == 0, "channels must divide into heads");
        let dh = c / heads;
        let t = h * w;
        let scale = 1.0 / (dh as f64).sqrt();
        let wqv = self.nodes[wq.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let wkv = self.nodes[wk.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let wvv = self.nodes[wv.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let wov = self.nodes[wo.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();

        let mut saved = AttnSaved {
            xs: Vec::with_capacity(batch),
            qs: Vec::with_capacity(batch),
            ks: Vec::with_capacity(batch),
            vs: Vec::with_capacity(batch),
            os: Vec::with_capacity(batch),
            attn: Vec::with_capacity(batch),
        };
        let mut out = ndarray::Array4::<f64>::zeros((batch, c, h, w));
        for bi in 0..batch {
            // sequence layout: row = spatial position, column = channel
            let mut xs = Array2::<f64>::zeros((t, c));
            for ci in 0..c {
                for p in 0..t {
                    xs[[p, ci]] = xv[[bi, ci, p / w, p % w]];
                }
            }
            let q = xs.dot(&wqv);
            let k = xs.dot(&wkv);
            let v = xs.dot(&wvv);
            let mut o = Array2::<f64>::zeros((t, c));
            let mut attn = Array3::<f64>::zeros((heads, t, t));
            for hi in 0..heads {
                let cols = hi * dh..(hi + 1) * dh;
                let qh = q.slice(ndarray::s![.., cols.clone()]);
                let kh = k.slice(ndarray::s![.., cols.clone()]);
                let vh = v.slice(ndarray::s![.., cols.clone()]);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                for mut row in scores.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|s| (s - m).exp());
                    let z = row.sum();
                    row.mapv_inplace(|s| s / z);
                }
                let oh = scores.dot(&vh);
                o.slice_mut(ndarray::s![.., cols]).assign(&oh);
                attn.slice_mut(ndarray::s![hi, .., ..]).assign(&scores);
            }
            let y = o.dot(&wov);
            for ci in 0..c {
                for p in 0..t {
                    out[[bi, ci, p / w, p % w]] = y[[p, ci]];
                }
            }
            saved.xs.push(xs);
            saved.qs.push(q);
            saved.ks.push(k);
            saved.vs.push(v);
            saved.os.push(o);
            saved.attn.push(attn);
        }
        self.push(out.into_dyn(), Op::SelfAttention { x, wq, wk, wv, wo, heads, saved })
    }

    /// Backpropagate from `root` (any shape; the seed gradient is all ones).
    pub fn backward(&mut self, root: NodeId) {
        let seed = Arr::ones(self.nodes[root.0].value.raw_dim());
        self.nodes[root.0].grad = Some(seed);
        for i in (0..=root.0).rev() {
            let (before, after) = self.nodes.split_at_mut(i);
            let node = &mut after[0];
            let Some(grad) = node.grad.take() else {
                node.grad = None;
                continue;
            };
            backward_node(before, &node.op, &node.value, &grad);
            node.grad = Some(grad);
        }
    }
}

fn acc(nodes: &mut [Node], id: NodeId, delta: Arr) {
    match &mut nodes[id.0].grad {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn batch_stats(x: &ndarray::ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let (batch, c) = x.dim();
    let n = batch as f64;
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for j in 0..c {
        let mut s = 0.0;
        for i in 0..batch {
            s += x[[i, j]];
        }
        let m = s / n;
        let mut v = 0.0;
        for i in 0..batch {
            let d = x[[i, j]] - m;
            v += d * d;
        }
        mean[j] = m;
        var[j] = v / n;
    }
    (mean, var)
}

fn backward_node(nodes: &mut [Node], op: &Op, value: &Arr, grad: &Arr) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, *a, grad.clone());
            acc(nodes, *b, grad.clone());
        }
        Op::Sub(a, b) => {
            acc(nodes, *a, grad.clone());
            acc(nodes, *b, -grad);
        }
        Op::Mul(a, b) => {
            let da = grad * &nodes[b.0].value;
            let db = grad * &nodes[a.0].value;
            acc(nodes, *a, da);
            acc(nodes, *b, db);
        }
        Op::Scale(a, c) => acc(nodes, *a, grad * *c),
        Op::AddScalar(a) => acc(nodes, *a, grad.clone()),
        Op::Relu(a) => {
            let mask = nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            acc(nodes, *a, grad * &mask);
        }
        Op::Exp(a) => acc(nodes, *a, grad * value),
        Op::Matmul(a, b) => {
            let g = grad.view().into_dimensionality::<Ix2>().unwrap();
            let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let bv = nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let da = g.dot(&bv.t()).into_dyn();
            let db = av.t().dot(&g).into_dyn();
            acc(nodes, *a, da);
            acc(nodes, *b, db);
        }
        Op::AddRow(x, bias) => {
            let g = grad.view().into_dimensionality::<Ix2>().unwrap();
            acc(nodes, *x, grad.clone());
            acc(nodes, *bias, g.sum_axis(Axis(0)).into_dyn());
        }
        Op::ConcatCols(parts) => {
            let g = grad.view().into_dimensionality::<Ix2>().unwrap();
            let mut start = 0;
            for p in parts {
                let w = nodes[p.0].value.shape()[1];
                let slice = g.slice(ndarray::s![.., start..start + w]).to_owned().into_dyn();
                acc(nodes, *p, slice);
                start += w;
            }
        }
        Op::SliceCols(x, start, end) => {
            let g = grad.view().into_dimensionality::<Ix2>().unwrap();
            let full = nodes[x.0].value.shape();
            let mut dx = Array2::<f64>::zeros((full[0], full[1]));
            dx.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
            acc(nodes, *x, dx.into_dyn());
        }
        Op::Gather { table, rows } => {
            let g = grad.view().into_dimensionality::<Ix2>().unwrap();
            let shape = nodes[table.0].value.shape();
            let mut dt = Array2::<f64>::zeros((shape[0], shape[1]));
            for (i, &r) in rows.iter().enumerate() {
                let mut row = dt.row_mut(r);
                row += &g.row(i);
            }
            acc(nodes, *table, dt.into_dyn());
        }
        Op::Conv2d { x, w, b, cols } => {
            let g = grad.view().into_dimensionality::<Ix4>().unwrap();
            let (batch, cout, h, wd) = g.dim();
            let wshape = nodes[w.0].value.shape().to_vec();
            let (cin, k) = (wshape[1], wshape[2]);
            let hw = h * wd;
            // gradient as [Cout, B*H*W]
            let mut dy2 = Array2::<f64>::zeros((cout, batch * hw));
            {
                let gs = g.as_slice().unwrap();
                let ds = dy2.as_slice_mut().unwrap();
                for bi in 0..batch {
                    for o in 0..cout {
                        let src = &gs[(bi * cout + o) * hw..][..hw];
                        ds[o * batch * hw + bi * hw..][..hw].copy_from_slice(src);
                    }
                }
            }
            let dw2 = dy2.dot(&cols.t()); // [Cout, Cin*k*k]
            let dw = dw2.into_shape_with_order(IxDyn(&[cout, cin, k, k])).unwrap();
            let db = dy2.sum_axis(Axis(1)).into_dyn();
            let w2 = nodes[w.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .into_shape_with_order((cout, cin * k * k))
                .unwrap()
                .to_owned();
            let dcols = w2.t().dot(&dy2); // [Cin*k*k, B*H*W]
            let xshape = nodes[x.0].value.shape().to_vec();
            let mut dx =
                ndarray::Array4::<f64>::zeros((xshape[0], xshape[1], xshape[2], xshape[3]));
            col2im(&dcols, &mut dx.view_mut(), k, k / 2);
            acc(nodes, *x, dx.into_dyn());
            acc(nodes, *w, dw);
            acc(nodes, *b, db);
        }
        Op::AvgPool2(x) => {
            let g = grad.view().into_dimensionality::<Ix4>().unwrap();
            let (batch, c, h2, w2) = g.dim();
            let mut dx = ndarray::Array4::<f64>::zeros((batch, c, 2 * h2, 2 * w2));
            for bi in 0..batch {
                for ci in 0..c {
                    for y in 0..h2 {
                        for xo in 0..w2 {
                            let v = 0.25 * g[[bi, ci, y, xo]];
                            dx[[bi, ci, 2 * y, 2 * xo]] = v;
                            dx[[bi, ci, 2 * y, 2 * xo + 1]] = v;
                            dx[[bi, ci, 2 * y + 1, 2 * xo]] = v;
                            dx[[bi, ci, 2 * y + 1, 2 * xo + 1]] = v;
                        }
                    }
                }
            }
            acc(nodes, *x, dx.into_dyn());
        }
        Op::Upsample2(x) => {
            let g = grad.view().into_dimensionality::<Ix4>().unwrap();
            let (batch, c, h2, w2) = g.dim();
            let mut dx = ndarray::Array4::<f64>::zeros((batch, c, h2 / 2, w2 / 2));
            for bi in 0..batch {
                for ci in 0..c {
                    for y in 0..h2 {
                        for xo in 0..w2 {
                            dx[[bi, ci, y / 2, xo / 2]] += g[[bi, ci, y, xo]];
                        }
                    }
                }
            }
            acc(nodes, *x, dx.into_dyn());
        }
        Op::ConcatChannels(parts) => {
            let g = grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut start = 0;
            for p in parts {
                let ch = nodes[p.0].value.shape()[1];
                let slice = g
                    .slice(ndarray::s![.., start..start + ch, .., ..])
                    .to_owned()
                    .into_dyn();
                acc(nodes, *p, slice);
                start += ch;
            }
        }
        Op::BroadcastSpatial { x } => {
            let g = grad.view().into_dimensionality::<Ix4>().unwrap();
            let (batch, c, _, _) = g.dim();
            let mut dx = Array2::<f64>::zeros((batch, c));
            for bi in 0..batch {
                for ci in 0..c {
                    dx[[bi, ci]] = g.slice(ndarray::s![bi, ci, .., ..]).sum();
                }
            }
            acc(nodes, *x, dx.into_dyn());
        }
        Op::AddChannel { x, c } => {
            let g = grad.view().into_dimensionality::<Ix4>().unwrap();
            let (batch, ch, _, _) = g.dim();
            let mut dc = Array2::<f64>::zeros((batch, ch));
            for bi in 0..batch {
                for ci in 0..ch {
                    dc[[bi, ci]] = g.slice(ndarray::s![bi, ci, .., ..]).sum();
                }
            }
            acc(nodes, *x, grad.clone());
            acc(nodes, *c, dc.into_dyn());
        }
        Op::BatchNorm { x, gamma, beta, eps } => {
            let g = grad.view().into_dimensionality::<Ix2>().unwrap();
            let xv = nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let gammav = nodes[gamma.0].value.view();
            let (batch, c) = xv.dim();
            let n = batch as f64;
            let (mean, var) = batch_stats(&xv);
            let mut dx = Array2::<f64>::zeros((batch, c));
            let mut dgamma = Array1::<f64>::zeros(c);
            let mut dbeta = Array1::<f64>::zeros(c);
            for j in 0..c {
                let inv = 1.0 / (var[j] + eps).sqrt();
                let gm = gammav[[j]];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for i in 0..batch {
                    let xhat = (xv[[i, j]] - mean[j]) * inv;
                    let dxhat = g[[i, j]] * gm;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma[j] += g[[i, j]] * xhat;
                    dbeta[j] += g[[i, j]];
                }
                for i in 0..batch {
                    let xhat = (xv[[i, j]] - mean[j]) * inv;
                    let dxhat = g[[i, j]] * gm;
                    dx[[i, j]] = inv / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
            acc(nodes, *x, dx.into_dyn());
            acc(nodes, *gamma, dgamma.into_dyn());
            acc(nodes, *beta, dbeta.into_dyn());
        }
        Op::MeanAll(x) => {
            let n = nodes[x.0].value.len() as f64;
            let g = grad.iter().next().copied().unwrap();
            let dx = Arr::from_elem(nodes[x.0].value.raw_dim(), g / n);
            acc(nodes, *x, dx);
        }
        Op::SumAll(x) => {
            let g = grad.iter().next().copied().unwrap();
            let dx = Arr::from_elem(nodes[x.0].value.raw_dim(), g);
            acc(nodes, *x, dx);
        }
        Op::SelfAttention { x, wq, wk, wv, wo, heads, saved } => {
            let g = grad.view().into_dimensionality::<Ix4>().unwrap();
            let (batch, c, h, w) = g.dim();
            let dh = c / heads;
            let t = h * w;
            let scale = 1.0 / (dh as f64).sqrt();
            let wqv = nodes[wq.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let wkv = nodes[wk.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let wvv = nodes[wv.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let wov = nodes[wo.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let mut dwq = Array2::<f64>::zeros((c, c));
            let mut dwk = Array2::<f64>::zeros((c, c));
            let mut dwv = Array2::<f64>::zeros((c, c));
            let mut dwo = Array2::<f64>::zeros((c, c));
            let mut dx_full = ndarray::Array4::<f64>::zeros((batch, c, h, w));
            for bi in 0..batch {
                let mut dy = Array2::<f64>::zeros((t, c));
                for ci in 0..c {
                    for p in 0..t {
                        dy[[p, ci]] = g[[bi, ci, p / w, p % w]];
                    }
                }
                let xs = &saved.xs[bi];
                let q = &saved.qs[bi];
                let k = &saved.ks[bi];
                let v = &saved.vs[bi];
                let o = &saved.os[bi];
                dwo += &o.t().dot(&dy);
                let do_ = dy.dot(&wov.t());
                let mut dq = Array2::<f64>::zeros((t, c));
                let mut dk = Array2::<f64>::zeros((t, c));
                let mut dv = Array2::<f64>::zeros((t, c));
                for hi in 0..*heads {
                    let cols = hi * dh..(hi + 1) * dh;
                    let a = saved.attn[bi].slice(ndarray::s![hi, .., ..]);
                    let doh = do_.slice(ndarray::s![.., cols.clone()]);
                    let vh = v.slice(ndarray::s![.., cols.clone()]);
                    let qh = q.slice(ndarray::s![.., cols.clone()]);
                    let kh = k.slice(ndarray::s![.., cols.clone()]);
                    let da = doh.dot(&vh.t());
                    dv.slice_mut(ndarray::s![.., cols.clone()]).assign(&a.t().dot(&doh));
                    // softmax backward, row-wise
                    let mut ds = Array2::<f64>::zeros((t, t));
                    for i in 0..t {
                        let arow = a.row(i);
                        let darow = da.row(i);
                        let dot = arow.dot(&darow);
                        for j in 0..t {
                            ds[[i, j]] = arow[j] * (darow[j] - dot);
                        }
                    }
                    ds *= scale;
                    dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&ds.dot(&kh));
                    dk.slice_mut(ndarray::s![.., cols]).assign(&ds.t().dot(&qh));
                }
                dwq += &xs.t().dot(&dq);
                dwk += &xs.t().dot(&dk);
                dwv += &xs.t().dot(&dv);
                let dxs = dq.dot(&wqv.t()) + dk.dot(&wkv.t()) + dv.dot(&wvv.t());
                for ci in 0..c {
                    for p in 0..t {
                        dx_full[[bi, ci, p / w, p % w]] = dxs[[p, ci]];
                    }
                }
            }
            acc(nodes, *x, dx_full.into_dyn());
            acc(nodes, *wq, dwq.into_dyn());
            acc(nodes, *wk, dwk.into_dyn());
            acc(nodes, *wv, dwv.into_dyn());
            acc(nodes, *wo, dwo.into_dyn());
        }
    }
}

/// `[B,Cin,H,W] -> [Cin*k*k, B*H*W]` patch matrix for stride-1 same-padding
/// convolution. Each row of the output is one (channel, ky, kx) tap across
/// all output pixels, so the inner copies are contiguous.
fn im2col(x: &ArrayView4<f64>, k: usize, pad: usize) -> Array2<f64> {
    let (batch, cin, h, w) = x.dim();
    let hw = h * w;
    let mut cols = Array2::<f64>::zeros((cin * k * k, batch * hw));
    let xs = x.as_slice().unwrap();
    let cs = cols.as_slice_mut().unwrap();
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_base = row * batch * hw;
                for bi in 0..batch {
                    let xplane = &xs[(bi * cin + c) * hw..][..hw];
                    let out_base = row_base + bi * hw;
                    for y in 0..h {
                        let iy = y + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let x0 = pad.saturating_sub(kx);
                        let x1 = (w + pad - kx).min(w);
                        if x0 >= x1 {
                            continue;
                        }
                        let in_start = iy * w + (x0 + kx - pad);
                        let out_start = out_base + y * w + x0;
                        cs[out_start..out_start + (x1 - x0)]
                            .copy_from_slice(&xplane[in_start..in_start + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the transpose of [`im2col`] back onto the input gradient.
fn col2im(cols: &Array2<f64>, dx: &mut ArrayViewMut4<f64>, k: usize, pad: usize) {
    let (batch, cin, h, w) = dx.dim();
    let hw = h * w;
    let cs = cols.as_slice().unwrap();
    let ds = dx.as_slice_mut().unwrap();
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_base = row * batch * hw;
                for bi in 0..batch {
                    let out_base = row_base + bi * hw;
                    let plane = (bi * cin + c) * hw;
                    for y in 0..h {
                        let iy = y + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let x0 = pad.saturating_sub(kx);
                        let x1 = (w + pad - kx).min(w);
                        if x0 >= x1 {
                            continue;
                        }
                        let in_start = plane + iy * w + (x0 + kx - pad);
                        let out_start = out_base + y * w + x0;
                        for i in 0..x1 - x0 {
                            ds[in_start + i] += cs[out_start + i];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference check of a scalar-valued graph function against
    /// the analytic gradients, for every input tensor.
    fn check_grads(inputs: &[Arr], f: impl Fn(&mut Graph, &[NodeId]) -> NodeId, tol: f64) {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &ids);
        assert_eq!(g.value(out).len(), 1, "check_grads needs a scalar output");
        g.backward(out);
        let analytic: Vec<Arr> = ids
            .iter()
            .map(|&id| g.take_grad(id).unwrap_or_else(|| Arr::zeros(g.value(id).raw_dim())))
            .collect();

        let h = 1e-5;
        for (pi, input) in inputs.iter().enumerate() {
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Arr> = inputs.to_vec();
                    perturbed[pi].as_slice_mut().unwrap()[idx] += delta;
                    let mut g = Graph::new();
                    let ids: Vec<_> = perturbed.iter().map(|x| g.leaf(x.clone())).collect();
                    let out = f(&mut g, &ids);
                    g.scalar(out)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic[pi].as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "input {pi} element {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]);
        check_grads(&[a, b], |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let d = g.sub(s, ids[1]);
            let m = g.mul(d, ids[0]);
            let e = g.exp(m);
            let r = g.relu(e);
            let sc = g.scale(r, 0.7);
            let sh = g.add_scalar(sc, 0.3);
            g.mean_all(sh)
        }, 1e-6);
    }

    #[test]
    fn linear_and_concat_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[4, 3]);
        let w = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[5]);
        let w2 = randn(&mut rng, &[3, 2]);
        check_grads(&[x, w, b, w2], |g, ids| {
            let y1 = g.linear(ids[0], ids[1], ids[2]);
            let y2 = g.matmul(ids[0], ids[3]);
            let cat = g.concat_cols(&[y1, y2]);
            let part = g.slice_cols(cat, 1, 6);
            let r = g.relu(part);
            g.sum_all(r)
        }, 1e-6);
    }

    #[test]
    fn gather_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = randn(&mut rng, &[5, 4]);
        check_grads(&[table], |g, ids| {
            let got = g.gather(ids[0], &[0, 3, 3, 1]);
            let sq = g.mul(got, got);
            g.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn conv_pool_upsample_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[2, 2, 4, 4]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        let w1 = randn(&mut rng, &[2, 3, 1, 1]);
        let b1 = randn(&mut rng, &[2]);
        check_grads(&[x, w, b, w1, b1], |g, ids| {
            let c = g.conv2d(ids[0], ids[1], ids[2]);
            let r = g.relu(c);
            let c2 = g.conv2d(r, ids[3], ids[4]);
            let p = g.avg_pool2(c2);
            let u = g.upsample2(p);
            let s = g.mul(u, u);
            g.mean_all(s)
        }, 1e-6);
    }

    #[test]
    fn channel_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 2, 2, 2]);
        let y = randn(&mut rng, &[2, 1, 2, 2]);
        let e = randn(&mut rng, &[2, 3]);
        let t = randn(&mut rng, &[2, 6]);
        check_grads(&[x, y, e, t], |g, ids| {
            let bc = g.broadcast_spatial(ids[2], 2, 2);
            let cat = g.concat_channels(&[ids[0], ids[1], bc]);
            let tc = g.add_channel(cat, ids[3]);
            let s = g.mul(tc, tc);
            g.sum_all(s)
        }, 1e-6);
    }

    #[test]
    fn batch_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[5, 3]);
        let gamma = randn(&mut rng, &[3]);
        let beta = randn(&mut rng, &[3]);
        check_grads(&[x, gamma, beta], |g, ids| {
            let y = g.batch_norm(ids[0], ids[1], ids[2], 1e-5);
            let s = g.mul(y, y);
            g.mean_all(s)
        }, 1e-4);
    }

    #[test]
    fn self_attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[2, 4, 2, 2]);
        let wq = randn(&mut rng, &[4, 4]);
        let wk = randn(&mut rng, &[4, 4]);
        let wv = randn(&mut rng, &[4, 4]);
        let wo = randn(&mut rng, &[4, 4]);
        check_grads(&[x, wq, wk, wv, wo], |g, ids| {
            let y = g.self_attention(ids[0], ids[1], ids[2], ids[3], ids[4], 2);
            let r = g.add(y, ids[0]);
            let s = g.mul(r, r);
            g.mean_all(s)
        }, 1e-5);
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[2, 3, 5, 5]);
        let w = randn(&mut rng, &[4, 3, 3, 3]);
        let b = randn(&mut rng, &[4]);
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
        let y = g.conv2d(xi, wi, bi);
        let yv = g.value(y).view().into_dimensionality::<Ix4>().unwrap();
        let xv = x.view().into_dimensionality::<Ix4>().unwrap();
        let wv = w.view().into_dimensionality::<Ix4>().unwrap();
        for bidx in 0..2 {
            for o in 0..4 {
                for yy in 0..5 {
                    for xx in 0..5 {
                        let mut s = b[[o]];
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = yy as isize + ky as isize - 1;
                                    let ix = xx as isize + kx as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                        s += xv[[bidx, c, iy as usize, ix as usize]]
                                            * wv[[o, c, ky, kx]];
                                    }
                                }
                            }
                        }
                        let got = yv[[bidx, o, yy, xx]];
                        assert!((got - s).abs() < 1e-10, "{got} vs {s}");
                    }
                }
            }
        }
    }
}
