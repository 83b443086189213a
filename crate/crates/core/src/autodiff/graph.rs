use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use super::scalar::Real;

/// Handle to a tensor in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tx(pub(crate) usize);

enum Op<F: Real> {
    Leaf,
    Add(Tx, Tx),
    Sub(Tx, Tx),
    Mul(Tx, Tx),
    Scale(Tx, F),
    /// `a * s` where `s` is a single-element tensor (a learnable scalar).
    ScaleByScalar(Tx, Tx),
    MatMul(Tx, Tx),
    BatchMatMul(Tx, Tx),
    Transpose2(Tx),
    Permute3(Tx, [usize; 3]),
    Reshape(Tx),
    Concat0(Vec<Tx>),
    SliceRows(Tx, usize, usize),
    /// `[..., D] + [D]`, broadcast over leading axes (rank 2 or 3).
    AddBias(Tx, Tx),
    /// `[B, m, n] + [m, n]`, broadcast over the batch axis.
    AddBroadcast2(Tx, Tx),
    /// `[C, H, W] + [C]`, one offset per channel.
    AddChannels(Tx, Tx),
    /// `[N, D] * [N]`, one factor per row.
    MulRows(Tx, Tx),
    Silu(Tx),
    Sigmoid(Tx),
    /// Softmax over the last axis.
    Softmax(Tx),
    LayerNorm {
        x: Tx,
        gain: Tx,
        bias: Tx,
        eps: F,
    },
    GroupNorm {
        x: Tx,
        gain: Tx,
        bias: Tx,
        groups: usize,
        eps: F,
    },
    Conv2d {
        x: Tx,
        w: Tx,
        b: Tx,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Array2<F>,
    },
    UpsampleNearest2x(Tx),
    Gather(Tx, Vec<usize>),
    SumAll(Tx),
    MeanAll(Tx),
}

struct Node<F: Real> {
    value: ArrayD<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A dynamically built computation graph (Wengert list).
///
/// Nodes are appended in evaluation order, so the reverse of the node list is
/// already a valid topological order for the backward sweep.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: Tx) -> &ArrayD<F> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tx) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    pub fn requires_grad(&self, t: Tx) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, requires_grad: bool) -> Tx {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Tx(self.nodes.len() - 1)
    }

    fn any_grad(&self, ts: &[Tx]) -> bool {
        ts.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Tx {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn add(&mut self, a: Tx, b: Tx) -> Tx {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Tx, b: Tx) -> Tx {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Tx, b: Tx) -> Tx {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Tx, c: F) -> Tx {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn scale_by_scalar(&mut self, a: Tx, s: Tx) -> Tx {
        assert_eq!(self.shape(s), &[1], "scale_by_scalar: scalar must be [1]");
        let c = self.nodes[s.0].value[[0]];
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.any_grad(&[a, s]);
        self.push(v, Op::ScaleByScalar(a, s), rg)
    }

    pub fn matmul(&mut self, a: Tx, b: Tx) -> Tx {
        let av = view2(&self.nodes[a.0].value);
        let bv = view2(&self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dim mismatch");
        let mut c = Array2::<F>::zeros((av.nrows(), bv.ncols()));
        ndarray::linalg::general_mat_mul(F::one(), &av, &bv, F::zero(), &mut c);
        let rg = self.any_grad(&[a, b]);
        self.push(c.into_dyn(), Op::MatMul(a, b), rg)
    }

    pub fn batch_matmul(&mut self, a: Tx, b: Tx) -> Tx {
        let av = view3(&self.nodes[a.0].value);
        let bv = view3(&self.nodes[b.0].value);
        assert_eq!(av.shape()[0], bv.shape()[0], "batch_matmul: batch mismatch");
        assert_eq!(av.shape()[2], bv.shape()[1], "batch_matmul: inner mismatch");
        let (bsz, m, n) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        let mut c = ndarray::Array3::<F>::zeros((bsz, m, n));
        for i in 0..bsz {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let mut ci = c.index_axis_mut(Axis(0), i);
            ndarray::linalg::general_mat_mul(F::one(), &ai, &bi, F::zero(), &mut ci);
        }
        let rg = self.any_grad(&[a, b]);
        self.push(c.into_dyn(), Op::BatchMatMul(a, b), rg)
    }

    pub fn transpose2(&mut self, a: Tx) -> Tx {
        let v = view2(&self.nodes[a.0].value).t().to_owned().into_dyn();
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Transpose2(a), rg)
    }

    pub fn permute3(&mut self, a: Tx, perm: [usize; 3]) -> Tx {
        let v = view3(&self.nodes[a.0].value)
            .permuted_axes(perm)
            .to_owned()
            .into_dyn();
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Permute3(a, perm), rg)
    }

    pub fn reshape(&mut self, a: Tx, shape: &[usize]) -> Tx {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.nodes[a.0].value.len(), "reshape: element count");
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn concat0(&mut self, parts: &[Tx]) -> Tx {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat0");
        let rg = self.any_grad(parts);
        self.push(v, Op::Concat0(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Tx, start: usize, len: usize) -> Tx {
        let av = &self.nodes[a.0].value;
        assert!(start + len <= av.shape()[0], "slice_rows: out of range");
        let v = av
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        let rg = self.any_grad(&[a]);
        self.push(v, Op::SliceRows(a, start, len), rg)
    }

    pub fn add_bias(&mut self, a: Tx, b: Tx) -> Tx {
        let d = *self.shape(a).last().unwrap();
        assert_eq!(self.shape(b), &[d], "add_bias: bias dim mismatch");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let mut v = self.nodes[a.0].value.clone();
        for mut row in v.rows_mut() {
            row += &bv;
        }
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::AddBias(a, b), rg)
    }

    pub fn add_broadcast2(&mut self, a: Tx, b: Tx) -> Tx {
        let ashape = self.shape(a).to_vec();
        assert_eq!(ashape.len(), 3);
        assert_eq!(&ashape[1..], self.shape(b), "add_broadcast2: shape");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut v = self.nodes[a.0].value.clone();
        for mut sl in v.axis_iter_mut(Axis(0)) {
            let mut sl2 = sl.view_mut().into_dimensionality::<Ix2>().unwrap();
            sl2 += &bv;
        }
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::AddBroadcast2(a, b), rg)
    }

    pub fn add_channels(&mut self, a: Tx, c: Tx) -> Tx {
        let ashape = self.shape(a).to_vec();
        assert_eq!(ashape.len(), 3);
        assert_eq!(self.shape(c), &[ashape[0]], "add_channels: shape");
        let cv = self.nodes[c.0].value.clone();
        let mut v = self.nodes[a.0].value.clone();
        for (ch, mut plane) in v.axis_iter_mut(Axis(0)).enumerate() {
            plane += cv[[ch]];
        }
        let rg = self.any_grad(&[a, c]);
        self.push(v, Op::AddChannels(a, c), rg)
    }

    pub fn mul_rows(&mut self, a: Tx, r: Tx) -> Tx {
        let n = self.shape(a)[0];
        assert_eq!(self.shape(r), &[n], "mul_rows: row count mismatch");
        let rv = self.nodes[r.0].value.clone();
        let mut v = self.nodes[a.0].value.clone();
        for (i, mut row) in v.axis_iter_mut(Axis(0)).enumerate() {
            row *= rv[[i]];
        }
        let rg = self.any_grad(&[a, r]);
        self.push(v, Op::MulRows(a, r), rg)
    }

    pub fn silu(&mut self, a: Tx) -> Tx {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Tx) -> Tx {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn softmax(&mut self, a: Tx) -> Tx {
        let mut v = self.nodes[a.0].value.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    pub fn layer_norm(&mut self, x: Tx, gain: Tx, bias: Tx, eps: f64) -> Tx {
        let eps = F::from_f64(eps);
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(gain), &[d]);
        assert_eq!(self.shape(bias), &[d]);
        let gv = self.nodes[gain.0].value.clone();
        let bv = self.nodes[bias.0].value.clone();
        let mut v = self.nodes[x.0].value.clone();
        let dn = F::from_f64(d as f64);
        for mut row in v.rows_mut() {
            let mean = row.sum() / dn;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).fold(F::zero(), |a, b| a + b) / dn;
            let inv = (var + eps).sqrt().recip();
            for (j, e) in row.iter_mut().enumerate() {
                *e = (*e - mean) * inv * gv[[j]] + bv[[j]];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(v, Op::LayerNorm { x, gain, bias, eps }, rg)
    }

    pub fn group_norm(&mut self, x: Tx, gain: Tx, bias: Tx, groups: usize, eps: f64) -> Tx {
        let eps = F::from_f64(eps);
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert_eq!(c % groups, 0, "group_norm: groups must divide channels");
        assert_eq!(self.shape(gain), &[c]);
        assert_eq!(self.shape(bias), &[c]);
        let gv = self.nodes[gain.0].value.clone();
        let bv = self.nodes[bias.0].value.clone();
        let mut v = self.nodes[x.0].value.clone();
        let per = c / groups;
        let n = F::from_f64((per * h * w) as f64);
        for g in 0..groups {
            let mut sl = v.slice_axis_mut(Axis(0), ndarray::Slice::from(g * per..(g + 1) * per));
            let mean = sl.sum() / n;
            let var = sl.iter().map(|&x| (x - mean) * (x - mean)).fold(F::zero(), |a, b| a + b) / n;
            let inv = (var + eps).sqrt().recip();
            for (ci, mut plane) in sl.axis_iter_mut(Axis(0)).enumerate() {
                let ch = g * per + ci;
                plane.mapv_inplace(|x| (x - mean) * inv * gv[[ch]] + bv[[ch]]);
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(
            v,
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                eps,
            },
            rg,
        )
    }

    /// 2-D convolution, `x: [Cin, H, W]`, `w: [Cout, Cin*k*k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Tx, w: Tx, b: Tx, kernel: usize, stride: usize, pad: usize) -> Tx {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "conv2d: input must be [C, H, W]");
        let (cin, h, wid) = (xs[0], xs[1], xs[2]);
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[1], cin * kernel * kernel, "conv2d: weight shape");
        let cout = ws[0];
        assert_eq!(self.shape(b), &[cout], "conv2d: bias shape");
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (wid + 2 * pad - kernel) / stride + 1;
        let cols = im2col(&self.nodes[x.0].value, kernel, stride, pad, oh, ow);
        let wv = view2(&self.nodes[w.0].value);
        let mut y = Array2::<F>::zeros((cout, oh * ow));
        ndarray::linalg::general_mat_mul(F::one(), &wv, &cols.view(), F::zero(), &mut y);
        let bv = self.nodes[b.0].value.clone();
        for (c, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            row += bv[[c]];
        }
        let v = y.into_shape_with_order(IxDyn(&[cout, oh, ow])).unwrap();
        let rg = self.any_grad(&[x, w, b]);
        self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    pub fn upsample_nearest_2x(&mut self, a: Tx) -> Tx {
        let xs = self.shape(a).to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = &self.nodes[a.0].value;
        let mut v = ArrayD::<F>::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let val = xv[[ci, i, j]];
                    v[[ci, 2 * i, 2 * j]] = val;
                    v[[ci, 2 * i, 2 * j + 1]] = val;
                    v[[ci, 2 * i + 1, 2 * j]] = val;
                    v[[ci, 2 * i + 1, 2 * j + 1]] = val;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        self.push(v, Op::UpsampleNearest2x(a), rg)
    }

    pub fn gather(&mut self, table: Tx, ids: &[usize]) -> Tx {
        let tv = view2(&self.nodes[table.0].value);
        let d = tv.ncols();
        let mut v = Array2::<F>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < tv.nrows(), "gather: id out of range");
            v.row_mut(i).assign(&tv.row(id));
        }
        let rg = self.any_grad(&[table]);
        self.push(v.into_dyn(), Op::Gather(table, ids.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: Tx) -> Tx {
        let s = self.nodes[a.0].value.sum();
        let rg = self.any_grad(&[a]);
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![s]).unwrap(),
            Op::SumAll(a),
            rg,
        )
    }

    pub fn mean_all(&mut self, a: Tx) -> Tx {
        let n = F::from_f64(self.nodes[a.0].value.len() as f64);
        let s = self.nodes[a.0].value.sum() / n;
        let rg = self.any_grad(&[a]);
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![s]).unwrap(),
            Op::MeanAll(a),
            rg,
        )
    }

    /// Reverse sweep from `loss` (shape `[1]`). Returns one gradient slot per node.
    pub fn backward(&self, loss: Tx) -> Vec<Option<ArrayD<F>>> {
        assert_eq!(self.shape(loss), &[1], "backward: loss must be scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_shape_vec(IxDyn(&[1]), vec![F::one()]).unwrap());
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn acc(&self, grads: &mut [Option<ArrayD<F>>], t: Tx, contrib: ArrayD<F>) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        match &mut grads[t.0] {
            Some(g) => *g += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn step_backward(&self, idx: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.acc(grads, *a, g * &self.nodes[b.0].value);
                }
                if self.nodes[b.0].requires_grad {
                    self.acc(grads, *b, g * &self.nodes[a.0].value);
                }
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, g.mapv(|x| x * *c));
            }
            Op::ScaleByScalar(a, s) => {
                let c = self.nodes[s.0].value[[0]];
                if self.nodes[a.0].requires_grad {
                    self.acc(grads, *a, g.mapv(|x| x * c));
                }
                if self.nodes[s.0].requires_grad {
                    let ds = (g * &self.nodes[a.0].value).sum();
                    self.acc(
                        grads,
                        *s,
                        ArrayD::from_shape_vec(IxDyn(&[1]), vec![ds]).unwrap(),
                    );
                }
            }
            Op::MatMul(a, b) => {
                let gv = view2(g);
                if self.nodes[a.0].requires_grad {
                    let bv = view2(&self.nodes[b.0].value);
                    let mut da = Array2::<F>::zeros((gv.nrows(), bv.nrows()));
                    ndarray::linalg::general_mat_mul(F::one(), &gv, &bv.t(), F::zero(), &mut da);
                    self.acc(grads, *a, da.into_dyn());
                }
                if self.nodes[b.0].requires_grad {
                    let av = view2(&self.nodes[a.0].value);
                    let mut db = Array2::<F>::zeros((av.ncols(), gv.ncols()));
                    ndarray::linalg::general_mat_mul(F::one(), &av.t(), &gv, F::zero(), &mut db);
                    self.acc(grads, *b, db.into_dyn());
                }
            }
            Op::BatchMatMul(a, b) => {
                let gv = view3(g);
                let bsz = gv.shape()[0];
                if self.nodes[a.0].requires_grad {
                    let bv = view3(&self.nodes[b.0].value);
                    let mut da = ndarray::Array3::<F>::zeros((bsz, gv.shape()[1], bv.shape()[1]));
                    for i in 0..bsz {
                        let gi = gv.index_axis(Axis(0), i);
                        let bi = bv.index_axis(Axis(0), i);
                        let mut di = da.index_axis_mut(Axis(0), i);
                        ndarray::linalg::general_mat_mul(F::one(), &gi, &bi.t(), F::zero(), &mut di);
                    }
                    self.acc(grads, *a, da.into_dyn());
                }
                if self.nodes[b.0].requires_grad {
                    let av = view3(&self.nodes[a.0].value);
                    let mut db = ndarray::Array3::<F>::zeros((bsz, av.shape()[2], gv.shape()[2]));
                    for i in 0..bsz {
                        let gi = gv.index_axis(Axis(0), i);
                        let ai = av.index_axis(Axis(0), i);
                        let mut di = db.index_axis_mut(Axis(0), i);
                        ndarray::linalg::general_mat_mul(F::one(), &ai.t(), &gi, F::zero(), &mut di);
                    }
                    self.acc(grads, *b, db.into_dyn());
                }
            }
            Op::Transpose2(a) => {
                self.acc(grads, *a, view2(g).t().to_owned().into_dyn());
            }
            Op::Permute3(a, perm) => {
                let mut inv = [0usize; 3];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.acc(grads, *a, view3(g).permuted_axes(inv).to_owned().into_dyn());
            }
            Op::Reshape(a) => {
                let target = self.nodes[a.0].value.shape();
                self.acc(
                    grads,
                    *a,
                    g.clone().into_shape_with_order(IxDyn(target)).unwrap(),
                );
            }
            Op::Concat0(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[0];
                    if self.nodes[p.0].requires_grad {
                        let slice = g
                            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
                            .to_owned();
                        self.acc(grads, p, slice);
                    }
                    start += len;
                }
            }
            Op::SliceRows(a, start, len) => {
                let mut da = ArrayD::<F>::zeros(self.nodes[a.0].value.raw_dim());
                da.slice_axis_mut(Axis(0), ndarray::Slice::from(*start..*start + *len))
                    .assign(g);
                self.acc(grads, *a, da);
            }
            Op::AddBias(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.nodes[b.0].requires_grad {
                    let d = *g.shape().last().unwrap();
                    let mut db = Array1::<F>::zeros(d);
                    for row in g.rows() {
                        db += &row;
                    }
                    self.acc(grads, *b, db.into_dyn());
                }
            }
            Op::AddBroadcast2(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.nodes[b.0].requires_grad {
                    let gv = view3(g);
                    let mut db = Array2::<F>::zeros((gv.shape()[1], gv.shape()[2]));
                    for sl in gv.axis_iter(Axis(0)) {
                        db += &sl;
                    }
                    self.acc(grads, *b, db.into_dyn());
                }
            }
            Op::AddChannels(a, c) => {
                self.acc(grads, *a, g.clone());
                if self.nodes[c.0].requires_grad {
                    let gv = view3(g);
                    let dc: Vec<F> = gv.axis_iter(Axis(0)).map(|plane| plane.sum()).collect();
                    self.acc(grads, *c, Array1::from_vec(dc).into_dyn());
                }
            }
            Op::MulRows(a, r) => {
                let rv = &self.nodes[r.0].value;
                if self.nodes[a.0].requires_grad {
                    let mut da = g.clone();
                    for (i, mut row) in da.axis_iter_mut(Axis(0)).enumerate() {
                        row *= rv[[i]];
                    }
                    self.acc(grads, *a, da);
                }
                if self.nodes[r.0].requires_grad {
                    let av = &self.nodes[a.0].value;
                    let gv = view2(g);
                    let av2 = view2(av);
                    let dr: Vec<F> = (0..gv.nrows())
                        .map(|i| {
                            gv.row(i)
                                .iter()
                                .zip(av2.row(i).iter())
                                .map(|(&gg, &aa)| gg * aa)
                                .fold(F::zero(), |acc, x| acc + x)
                        })
                        .collect();
                    self.acc(grads, *r, Array1::from_vec(dr).into_dyn());
                }
            }
            Op::Silu(a) => {
                let da = ndarray::Zip::from(g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&gg, &x| {
                        let s = sigmoid(x);
                        gg * s * (F::one() + x * (F::one() - s))
                    });
                self.acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let da = ndarray::Zip::from(g)
                    .and(y)
                    .map_collect(|&gg, &yy| gg * yy * (F::one() - yy));
                self.acc(grads, *a, da);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let mut da = g * y;
                // per-row: dx = y * (g - sum(g*y))
                let last = da.ndim() - 1;
                let mut sums = da.sum_axis(Axis(last));
                sums.mapv_inplace(|x| x);
                let mut out = ArrayD::<F>::zeros(g.raw_dim());
                for ((mut orow, (grow, yrow)), s) in out
                    .rows_mut()
                    .into_iter()
                    .zip(g.rows().into_iter().zip(y.rows()))
                    .zip(sums.iter())
                {
                    for (o, (&gg, &yy)) in orow.iter_mut().zip(grow.iter().zip(yrow.iter())) {
                        *o = yy * (gg - *s);
                    }
                }
                self.acc(grads, *a, out);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let d = *xv.shape().last().unwrap();
                let dn = F::from_f64(d as f64);
                let mut dx = ArrayD::<F>::zeros(xv.raw_dim());
                let mut dgain = Array1::<F>::zeros(d);
                let mut dbias = Array1::<F>::zeros(d);
                for ((xrow, grow), mut dxrow) in xv
                    .rows()
                    .into_iter()
                    .zip(g.rows())
                    .zip(dx.rows_mut().into_iter())
                {
                    let mean = xrow.sum() / dn;
                    let var = xrow
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .fold(F::zero(), |a, b| a + b)
                        / dn;
                    let inv = (var + *eps).sqrt().recip();
                    let xhat: Vec<F> = xrow.iter().map(|&v| (v - mean) * inv).collect();
                    let gy: Vec<F> = grow
                        .iter()
                        .enumerate()
                        .map(|(j, &gg)| gg * gv[[j]])
                        .collect();
                    let mgy = gy.iter().fold(F::zero(), |a, &b| a + b) / dn;
                    let mgyx = gy
                        .iter()
                        .zip(xhat.iter())
                        .map(|(&a, &b)| a * b)
                        .fold(F::zero(), |a, b| a + b)
                        / dn;
                    for j in 0..d {
                        dxrow[j] = (gy[j] - mgy - xhat[j] * mgyx) * inv;
                        dgain[j] = dgain[j] + grow[j] * xhat[j];
                        dbias[j] = dbias[j] + grow[j];
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gain, dgain.into_dyn());
                self.acc(grads, *bias, dbias.into_dyn());
            }
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                eps,
            } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let shape = xv.shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let per = c / groups;
                let n = F::from_f64((per * h * w) as f64);
                let mut dx = ArrayD::<F>::zeros(xv.raw_dim());
                let mut dgain = Array1::<F>::zeros(c);
                let mut dbias = Array1::<F>::zeros(c);
                for gi in 0..*groups {
                    let range = gi * per..(gi + 1) * per;
                    let xs = xv.slice_axis(Axis(0), ndarray::Slice::from(range.clone()));
                    let gs = g.slice_axis(Axis(0), ndarray::Slice::from(range.clone()));
                    let mean = xs.sum() / n;
                    let var = xs
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .fold(F::zero(), |a, b| a + b)
                        / n;
                    let inv = (var + *eps).sqrt().recip();
                    // accumulate means of gy and gy*xhat over the group
                    let mut mgy = F::zero();
                    let mut mgyx = F::zero();
                    for ci in 0..per {
                        let ch = gi * per + ci;
                        let gplane = gs.index_axis(Axis(0), ci);
                        let xplane = xs.index_axis(Axis(0), ci);
                        for (gg, xx) in gplane.iter().zip(xplane.iter()) {
                            let gy = *gg * gv[[ch]];
                            mgy = mgy + gy;
                            mgyx = mgyx + gy * (*xx - mean) * inv;
                        }
                    }
                    mgy = mgy / n;
                    mgyx = mgyx / n;
                    for ci in 0..per {
                        let ch = gi * per + ci;
                        let gplane = gs.index_axis(Axis(0), ci);
                        let xplane = xs.index_axis(Axis(0), ci);
                        let mut dplane = dx.index_axis_mut(Axis(0), ch);
                        let mut dg = F::zero();
                        let mut db = F::zero();
                        for ((dd, gg), xx) in
                            dplane.iter_mut().zip(gplane.iter()).zip(xplane.iter())
                        {
                            let xhat = (*xx - mean) * inv;
                            let gy = *gg * gv[[ch]];
                            *dd = (gy - mgy - xhat * mgyx) * inv;
                            dg = dg + *gg * xhat;
                            db = db + *gg;
                        }
                        dgain[ch] = dgain[ch] + dg;
                        dbias[ch] = dbias[ch] + db;
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gain, dgain.into_dyn());
                self.acc(grads, *bias, dbias.into_dyn());
            }
            Op::Conv2d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let xs = self.nodes[x.0].value.shape();
                let (cin, h, wid) = (xs[0], xs[1], xs[2]);
                let ys = self.nodes[idx].value.shape();
                let (cout, oh, ow) = (ys[0], ys[1], ys[2]);
                let g2 = g
                    .view()
                    .into_shape_with_order((cout, oh * ow))
                    .unwrap();
                if self.nodes[w.0].requires_grad {
                    let mut dw = Array2::<F>::zeros((cout, cin * kernel * kernel));
                    ndarray::linalg::general_mat_mul(
                        F::one(),
                        &g2,
                        &cols.t(),
                        F::zero(),
                        &mut dw,
                    );
                    self.acc(grads, *w, dw.into_dyn());
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<F> = g2.axis_iter(Axis(0)).map(|r| r.sum()).collect();
                    self.acc(grads, *b, Array1::from_vec(db).into_dyn());
                }
                if self.nodes[x.0].requires_grad {
                    let wv = view2(&self.nodes[w.0].value);
                    let mut dcols = Array2::<F>::zeros((cin * kernel * kernel, oh * ow));
                    ndarray::linalg::general_mat_mul(
                        F::one(),
                        &wv.t(),
                        &g2,
                        F::zero(),
                        &mut dcols,
                    );
                    let dx = col2im(&dcols, cin, h, wid, *kernel, *stride, *pad, oh, ow);
                    self.acc(grads, *x, dx);
                }
            }
            Op::UpsampleNearest2x(a) => {
                let xs = self.nodes[a.0].value.shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut da = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            da[[ci, i, j]] = g[[ci, 2 * i, 2 * j]]
                                + g[[ci, 2 * i, 2 * j + 1]]
                                + g[[ci, 2 * i + 1, 2 * j]]
                                + g[[ci, 2 * i + 1, 2 * j + 1]];
                        }
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::Gather(table, ids) => {
                let tshape = self.nodes[table.0].value.shape();
                let mut dt = Array2::<F>::zeros((tshape[0], tshape[1]));
                let gv = view2(g);
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(id);
                    row += &gv.row(i);
                }
                self.acc(grads, *table, dt.into_dyn());
            }
            Op::SumAll(a) => {
                let c = g[[0]];
                let da = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), c);
                self.acc(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let n = F::from_f64(self.nodes[a.0].value.len() as f64);
                let c = g[[0]] / n;
                let da = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), c);
                self.acc(grads, *a, da);
            }
        }
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn view2<F: Real>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn view3<F: Real>(a: &ArrayD<F>) -> ndarray::ArrayView3<'_, F> {
    a.view().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}

fn im2col<F: Real>(
    x: &ArrayD<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let shape = x.shape();
    let (cin, h, w) = (shape[0], shape[1], shape[2]);
    let mut cols = Array2::<F>::zeros((cin * kernel * kernel, oh * ow));
    let xv = x.view().into_dimensionality::<Ix3>().unwrap();
    for c in 0..cin {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let mut out_row = cols.row_mut(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        out_row[oi * ow + oj] = xv[[c, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Real>(
    dcols: &Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ArrayD<F> {
    let mut dx = ArrayD::<F>::zeros(IxDyn(&[cin, h, w]));
    let mut dxv = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
    for c in 0..cin {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let col_row = dcols.row(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dxv[[c, ii as usize, jj as usize]] =
                            dxv[[c, ii as usize, jj as usize]] + col_row[oi * ow + oj];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_arr(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `build` against the analytic backward pass.
    fn fd_check(inputs: &[ArrayD<f64>], build: impl Fn(&mut Graph<f64>, &[Tx]) -> Tx) {
        let mut g = Graph::<f64>::new();
        let leaves: Vec<Tx> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
        let loss = build(&mut g, &leaves);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (li, input) in inputs.iter().enumerate() {
            let analytic = grads[leaves[li].0]
                .as_ref()
                .unwrap_or_else(|| panic!("missing grad for input {li}"));
            for flat in 0..input.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::<f64>::new();
                    let leaves2: Vec<Tx> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, a)| {
                            let mut a = a.clone();
                            if i == li {
                                a.as_slice_mut().unwrap()[flat] += delta;
                            }
                            g2.leaf(a, false)
                        })
                        .collect();
                    let l = build(&mut g2, &leaves2);
                    g2.value(l)[[0]]
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = analytic.as_slice().unwrap()[flat];
                let denom = num.abs().max(ana.abs()).max(1e-8);
                assert!(
                    (num - ana).abs() / denom < 1e-5,
                    "input {li} elem {flat}: numeric {num} vs analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn fd_elementwise_ops() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let a = rand_arr(&mut rng, &[3, 4]);
        let b = rand_arr(&mut rng, &[3, 4]);
        fd_check(&[a.clone(), b.clone()], |g, l| {
            let s = g.add(l[0], l[1]);
            let m = g.mul(s, l[0]);
            let d = g.sub(m, l[1]);
            let sc = g.scale(d, 0.7);
            let si = g.silu(sc);
            let sg = g.sigmoid(si);
            g.sum_all(sg)
        });
    }

    #[test]
    fn fd_matmul_and_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = rand_arr(&mut rng, &[4, 3]);
        let b = rand_arr(&mut rng, &[3, 5]);
        let bias = rand_arr(&mut rng, &[5]);
        fd_check(&[a, b, bias], |g, l| {
            let y = g.matmul(l[0], l[1]);
            let y = g.add_bias(y, l[2]);
            let y = g.mul(y, y);
            g.mean_all(y)
        });
    }

    #[test]
    fn fd_batch_matmul_permute() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = rand_arr(&mut rng, &[2, 3, 4]);
        let b = rand_arr(&mut rng, &[2, 3, 4]);
        fd_check(&[a, b], |g, l| {
            let bt = g.permute3(l[1], [0, 2, 1]);
            let y = g.batch_matmul(l[0], bt);
            let s = g.softmax(y);
            let y2 = g.batch_matmul(s, l[1]);
            g.sum_all(y2)
        });
    }

    #[test]
    fn fd_softmax_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = rand_arr(&mut rng, &[3, 5]);
        let w = rand_arr(&mut rng, &[3, 5]);
        fd_check(&[a, w], |g, l| {
            let s = g.softmax(l[0]);
            let m = g.mul(s, l[1]);
            g.sum_all(m)
        });
    }

    #[test]
    fn fd_layer_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = rand_arr(&mut rng, &[4, 6]);
        let gain = rand_arr(&mut rng, &[6]);
        let bias = rand_arr(&mut rng, &[6]);
        let w = rand_arr(&mut rng, &[4, 6]);
        fd_check(&[x, gain, bias, w], |g, l| {
            let y = g.layer_norm(l[0], l[1], l[2], 1e-5);
            let m = g.mul(y, l[3]);
            g.sum_all(m)
        });
    }

    #[test]
    fn fd_group_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = rand_arr(&mut rng, &[4, 3, 3]);
        let gain = rand_arr(&mut rng, &[4]);
        let bias = rand_arr(&mut rng, &[4]);
        let w = rand_arr(&mut rng, &[4, 3, 3]);
        fd_check(&[x, gain, bias, w], |g, l| {
            let y = g.group_norm(l[0], l[1], l[2], 2, 1e-5);
            let m = g.mul(y, l[3]);
            g.sum_all(m)
        });
    }

    #[test]
    fn fd_conv2d() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x = rand_arr(&mut rng, &[2, 6, 6]);
        let w = rand_arr(&mut rng, &[3, 2 * 9]);
        let b = rand_arr(&mut rng, &[3]);
        fd_check(&[x.clone(), w.clone(), b.clone()], |g, l| {
            let y = g.conv2d(l[0], l[1], l[2], 3, 1, 1);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        // strided
        fd_check(&[x, w, b], |g, l| {
            let y = g.conv2d(l[0], l[1], l[2], 3, 2, 1);
            g.sum_all(y)
        });
    }

    #[test]
    fn fd_upsample_gather_slice_concat() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = rand_arr(&mut rng, &[2, 3, 3]);
        let table = rand_arr(&mut rng, &[5, 4]);
        fd_check(&[x, table], |g, l| {
            let up = g.upsample_nearest_2x(l[0]);
            let flat = g.reshape(up, &[12, 6]);
            let rows = g.gather(l[1], &[0, 2, 2, 4]);
            let sl = g.slice_rows(flat, 2, 4);
            let cat = g.concat0(&[rows, sl]);
            let sq = g.mul(cat, cat);
            g.sum_all(sq)
        });
    }

    #[test]
    fn fd_rows_channels_scalar() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let a = rand_arr(&mut rng, &[4, 3]);
        let r = rand_arr(&mut rng, &[4]);
        let lam = rand_arr(&mut rng, &[1]);
        let x3 = rand_arr(&mut rng, &[2, 3, 3]);
        let ch = rand_arr(&mut rng, &[2]);
        let m2 = rand_arr(&mut rng, &[3, 3]);
        let b3 = rand_arr(&mut rng, &[2, 3, 3]);
        fd_check(&[a, r, lam, x3, ch, m2, b3], |g, l| {
            let gated = g.mul_rows(l[0], l[1]);
            let scaled = g.scale_by_scalar(gated, l[2]);
            let s1 = g.sum_all(scaled);
            let withc = g.add_channels(l[3], l[4]);
            let withb = g.add_broadcast2(withc, l[5]);
            let prod = g.mul(withb, l[6]);
            let s2 = g.sum_all(prod);
            g.add(s1, s2)
        });
    }

    #[test]
    fn duplicate_parent_square() {
        // mul(a, a) must accumulate both branches: d/da (a*a) = 2a.
        let mut g = Graph::<f64>::new();
        let a = g.leaf(ArrayD::from_elem(IxDyn(&[2]), 3.0), true);
        let sq = g.mul(a, a);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        let da = grads[a.0].as_ref().unwrap();
        assert_eq!(da[[0]], 6.0);
        assert_eq!(da[[1]], 6.0);
    }

    #[test]
    fn no_grad_flows_to_frozen_leaves() {
        let mut g = Graph::<f64>::new();
        let frozen = g.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.0), false);
        let live = g.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0), true);
        let y = g.mul(frozen, live);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert!(grads[frozen.0].is_none());
        assert!(grads[live.0].is_some());
    }
}
