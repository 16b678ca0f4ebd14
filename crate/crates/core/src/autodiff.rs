//! Reverse-mode automatic differentiation on a flat tape of f64 tensors.
//!
//! Values are computed eagerly as nodes are appended. `Graph::backward`
//! emits the gradient computation as *new nodes on the same tape*, so
//! gradients are themselves differentiable — this is what makes the R1
//! penalty (a function of the discriminator's input gradient) trainable
//! with ordinary backprop.
//!
//! Everything is sequential and allocation-order deterministic: the same
//! program on the same inputs produces bit-identical values on every run.

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

pub type Arr = ArrayD<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Geometry of a 2-D patch extraction (shared by unfold and fold).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Rsqrt(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    SumTo(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    PadZero(Var, usize, usize, usize),
    Unfold1d(Var, usize),
    Fold1d(Var, usize),
    Unfold2d(Var, ConvGeom),
    Fold2d(Var, ConvGeom),
    Upsample2x(Var),
    Upsample2xAdj(Var),
    FlipW(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            StopGrad(a) | Neg(a) | AddScalar(a) | MulScalar(a, _) | Sin(a) | Cos(a)
            | Tanh(a) | Sigmoid(a) | Softplus(a) | LeakyRelu(a, _) | Rsqrt(a) | Transpose(a)
            | Reshape(a) | BroadcastTo(a) | SumTo(a) | Slice(a, _, _, _) | PadZero(a, _, _, _)
            | Unfold1d(a, _) | Fold1d(a, _) | Unfold2d(a, _) | Fold2d(a, _) | Upsample2x(a)
            | Upsample2xAdj(a) | FlipW(a) => vec![*a],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Concat(vs, _) => vs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Arr,
}

/// Eagerly-evaluated computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Arr) -> Var {
        // keep every stored value in standard layout so flat indexing and
        // slice views agree with logical order everywhere downstream
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn arr(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.arr(v);
        assert_eq!(a.len(), 1, "scalar_value on non-scalar node");
        *a.iter().next().unwrap()
    }

    // ---- leaves -----------------------------------------------------------

    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Arr::from_elem(IxDyn(&[]), x))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.leaf(Arr::zeros(IxDyn(shape)))
    }

    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.arr(a).clone();
        self.push(Op::StopGrad(a), v)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.arr(a) + self.arr(b);
        debug_assert_eq!(self.arr(a).shape(), self.arr(b).shape());
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.arr(a).shape(), self.arr(b).shape());
        let v = self.arr(a) - self.arr(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.arr(a).shape(), self.arr(b).shape());
        let v = self.arr(a) * self.arr(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.arr(a);
        self.push(Op::Neg(a), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.arr(a) + c;
        self.push(Op::AddScalar(a), v)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.arr(a) * c;
        self.push(Op::MulScalar(a, c), v)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.arr(a).mapv(f64::sin);
        self.push(Op::Sin(a), v)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.arr(a).mapv(f64::cos);
        self.push(Op::Cos(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.arr(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.arr(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.arr(a).mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(Op::Softplus(a), v)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.arr(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn rsqrt(&mut self, a: Var) -> Var {
        let v = self.arr(a).mapv(|x| 1.0 / x.sqrt());
        self.push(Op::Rsqrt(a), v)
    }

    // ---- linear algebra / shape ------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.arr(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.arr(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dim mismatch");
        let v = av.dot(&bv).into_dyn();
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.arr(a).view().into_dimensionality::<Ix2>().unwrap();
        let t = v.t().to_owned().into_dyn();
        self.push(Op::Transpose(a), t)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .arr(a)
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(Op::Reshape(a), v)
    }

    /// Numpy-style broadcast to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .arr(a)
            .broadcast(IxDyn(shape))
            .expect("broadcast_to incompatible shape")
            .to_owned();
        self.push(Op::BroadcastTo(a), v)
    }

    /// Sum down to `shape` (the adjoint of `broadcast_to`).
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = sum_to_impl(self.arr(a), shape);
        self.push(Op::SumTo(a), v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.sum_to(a, &[])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.arr(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.arr(*p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        self.push(Op::Concat(parts.to_vec(), axis), v)
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let v = self
            .arr(a)
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        self.push(Op::Slice(a, axis, start, end), v)
    }

    pub fn pad_zero(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Var {
        let src = self.arr(a);
        let mut shape = src.shape().to_vec();
        shape[axis] += before + after;
        let mut out = Arr::zeros(IxDyn(&shape));
        out.slice_axis_mut(
            Axis(axis),
            Slice::from(before..before + src.shape()[axis]),
        )
        .assign(src);
        self.push(Op::PadZero(a, axis, before, after), out)
    }

    // ---- patch extraction (convolution building blocks) -------------------

    /// [C, L] -> [C*k, L-k+1]; row (c*k + j) column i holds x[c, i + j].
    pub fn unfold1d(&mut self, a: Var, kernel: usize) -> Var {
        let v = unfold1d_impl(self.arr(a), kernel);
        self.push(Op::Unfold1d(a, kernel), v)
    }

    /// Adjoint of `unfold1d`: [C*k, L'] -> [C, out_len] with out_len = L'+k-1.
    pub fn fold1d(&mut self, a: Var, kernel: usize, out_len: usize) -> Var {
        let v = fold1d_impl(self.arr(a), kernel, out_len);
        self.push(Op::Fold1d(a, kernel), v)
    }

    /// [C, H, W] -> [C*k*k, OH*OW] patch matrix (zero padding).
    pub fn unfold2d(&mut self, a: Var, geom: ConvGeom) -> Var {
        let v = unfold2d_impl(self.arr(a), geom);
        self.push(Op::Unfold2d(a, geom), v)
    }

    /// Adjoint of `unfold2d`: scatter-add patches back to [C, H, W].
    pub fn fold2d(&mut self, a: Var, geom: ConvGeom) -> Var {
        let v = fold2d_impl(self.arr(a), geom);
        self.push(Op::Fold2d(a, geom), v)
    }

    /// Bilinear x2 upsample with half-pixel centers: [C,H,W] -> [C,2H,2W].
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let v = upsample2x_impl(self.arr(a));
        self.push(Op::Upsample2x(a), v)
    }

    pub fn upsample2x_adj(&mut self, a: Var) -> Var {
        let v = upsample2x_adj_impl(self.arr(a));
        self.push(Op::Upsample2xAdj(a), v)
    }

    /// Reverse the last axis (horizontal image flip).
    pub fn flip_w(&mut self, a: Var) -> Var {
        let src = self.arr(a);
        let last = src.ndim() - 1;
        let v = src.slice_axis(Axis(last), Slice::new(0, None, -1)).to_owned();
        self.push(Op::FlipW(a), v)
    }

    // ---- composites --------------------------------------------------------

    /// a + s*(b - a) with scalar weight s.
    pub fn lerp(&mut self, a: Var, b: Var, s: f64) -> Var {
        let d = self.sub(b, a);
        let sd = self.mul_scalar(d, s);
        self.add(a, sd)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum_all(m)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode gradients of scalar `y` w.r.t. each var in `wrt`.
    ///
    /// Gradients are appended to the tape as ordinary nodes, so any scalar
    /// formed from them can be differentiated again.
    pub fn backward(&mut self, y: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.arr(y).len(), 1, "backward target must be scalar");
        let yid = y.0;
        let frontier = yid + 1;

        let mut needed = vec![false; frontier];
        needed[yid] = true;
        for id in (0..frontier).rev() {
            if needed[id] {
                for inp in self.nodes[id].op.inputs() {
                    needed[inp.0] = true;
                }
            }
        }

        let mut cot: Vec<Option<Var>> = vec![None; frontier];
        let seed_shape = self.arr(y).raw_dim();
        cot[yid] = Some(self.leaf(Arr::ones(seed_shape)));

        for id in (0..frontier).rev() {
            if !needed[id] {
                continue;
            }
            let g = match cot[id] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            for (inp, contrib) in self.vjp(id, &op, g) {
                cot[inp.0] = Some(match cot[inp.0] {
                    None => contrib,
                    Some(c) => self.add(c, contrib),
                });
            }
        }

        wrt.iter()
            .map(|v| {
                cot.get(v.0).copied().flatten().unwrap_or_else(|| {
                    let sh = self.arr(*v).raw_dim();
                    self.leaf(Arr::zeros(sh))
                })
            })
            .collect()
    }

    /// Cotangent contributions of node `id` (with op `op`, output cotangent `g`)
    /// to each of its inputs. All rules are built from tape ops.
    fn vjp(&mut self, id: usize, op: &Op, g: Var) -> Vec<(Var, Var)> {
        use Op::*;
        let out = Var(id);
        match op {
            Leaf => vec![],
            StopGrad(_) => vec![],
            Add(a, b) => vec![(*a, g), (*b, g)],
            Sub(a, b) => {
                let nb = self.neg(g);
                vec![(*a, g), (*b, nb)]
            }
            Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = self.mul(g, b);
                let db = self.mul(g, a);
                vec![(a, da), (b, db)]
            }
            Neg(a) => {
                let d = self.neg(g);
                vec![(*a, d)]
            }
            AddScalar(a) => vec![(*a, g)],
            MulScalar(a, c) => {
                let d = self.mul_scalar(g, *c);
                vec![(*a, d)]
            }
            Sin(a) => {
                let a = *a;
                let c = self.cos(a);
                let d = self.mul(g, c);
                vec![(a, d)]
            }
            Cos(a) => {
                let a = *a;
                let s = self.sin(a);
                let gs = self.mul(g, s);
                let d = self.neg(gs);
                vec![(a, d)]
            }
            Tanh(a) => {
                let a = *a;
                let yy = self.mul(out, out);
                let gyy = self.mul(g, yy);
                let d = self.sub(g, gyy);
                vec![(a, d)]
            }
            Sigmoid(a) => {
                let a = *a;
                let ones = self.leaf(Arr::ones(self.arr(out).raw_dim()));
                let one_minus = self.sub(ones, out);
                let yy = self.mul(out, one_minus);
                let d = self.mul(g, yy);
                vec![(a, d)]
            }
            Softplus(a) => {
                let a = *a;
                let s = self.sigmoid(a);
                let d = self.mul(g, s);
                vec![(a, d)]
            }
            LeakyRelu(a, slope) => {
                let a = *a;
                let slope = *slope;
                let mask = self.leaf(
                    self.nodes[a.0]
                        .value
                        .mapv(|x| if x > 0.0 { 1.0 } else { slope }),
                );
                let d = self.mul(g, mask);
                vec![(a, d)]
            }
            Rsqrt(a) => {
                // d/dx x^(-1/2) = -1/2 x^(-3/2) = -1/2 y^3
                let a = *a;
                let y2 = self.mul(out, out);
                let y3 = self.mul(y2, out);
                let gy3 = self.mul(g, y3);
                let d = self.mul_scalar(gy3, -0.5);
                vec![(a, d)]
            }
            MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let bt = self.transpose(b);
                let da = self.matmul(g, bt);
                let at = self.transpose(a);
                let db = self.matmul(at, g);
                vec![(a, da), (b, db)]
            }
            Transpose(a) => {
                let d = self.transpose(g);
                vec![(*a, d)]
            }
            Reshape(a) => {
                let sh = self.arr(*a).shape().to_vec();
                let d = self.reshape(g, &sh);
                vec![(*a, d)]
            }
            BroadcastTo(a) => {
                let sh = self.arr(*a).shape().to_vec();
                let d = self.sum_to(g, &sh);
                vec![(*a, d)]
            }
            SumTo(a) => {
                let sh = self.arr(*a).shape().to_vec();
                let d = self.broadcast_to(g, &sh);
                vec![(*a, d)]
            }
            Concat(parts, axis) => {
                let axis = *axis;
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts.clone() {
                    let len = self.arr(p).shape()[axis];
                    let d = self.slice_axis(g, axis, offset, offset + len);
                    res.push((p, d));
                    offset += len;
                }
                res
            }
            Slice(a, axis, start, end) => {
                let (a, axis, start, end) = (*a, *axis, *start, *end);
                let total = self.arr(a).shape()[axis];
                let d = self.pad_zero(g, axis, start, total - end);
                vec![(a, d)]
            }
            PadZero(a, axis, before, _after) => {
                let (a, axis, before) = (*a, *axis, *before);
                let len = self.arr(a).shape()[axis];
                let d = self.slice_axis(g, axis, before, before + len);
                vec![(a, d)]
            }
            Unfold1d(a, k) => {
                let (a, k) = (*a, *k);
                let out_len = self.arr(a).shape()[1];
                let d = self.fold1d(g, k, out_len);
                vec![(a, d)]
            }
            Fold1d(a, k) => {
                let d = self.unfold1d(g, *k);
                vec![(*a, d)]
            }
            Unfold2d(a, geom) => {
                let d = self.fold2d(g, *geom);
                vec![(*a, d)]
            }
            Fold2d(a, geom) => {
                let d = self.unfold2d(g, *geom);
                vec![(*a, d)]
            }
            Upsample2x(a) => {
                let d = self.upsample2x_adj(g);
                vec![(*a, d)]
            }
            Upsample2xAdj(a) => {
                let d = self.upsample2x(g);
                vec![(*a, d)]
            }
            FlipW(a) => {
                let d = self.flip_w(g);
                vec![(*a, d)]
            }
        }
    }
}

// ---- raw kernels -----------------------------------------------------------

fn sum_to_impl(src: &Arr, target: &[usize]) -> Arr {
    let mut cur = src.clone();
    // sum away leading extra axes
    while cur.ndim() > target.len() {
        cur = cur.sum_axis(Axis(0));
    }
    // sum (keepdim) axes where target is 1
    for ax in 0..target.len() {
        if target[ax] == 1 && cur.shape()[ax] != 1 {
            cur = cur.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        } else {
            assert_eq!(
                cur.shape()[ax],
                target[ax],
                "sum_to incompatible shapes {:?} -> {:?}",
                src.shape(),
                target
            );
        }
    }
    cur
}

fn unfold1d_impl(x: &Arr, k: usize) -> Arr {
    let c = x.shape()[0];
    let l = x.shape()[1];
    assert!(l >= k, "unfold1d: sequence shorter than kernel");
    let lo = l - k + 1;
    let xs = x.as_standard_layout();
    let xv = xs.as_slice().unwrap();
    let mut out = vec![0.0; c * k * lo];
    for ci in 0..c {
        for j in 0..k {
            let row = (ci * k + j) * lo;
            let src = ci * l + j;
            out[row..row + lo].copy_from_slice(&xv[src..src + lo]);
        }
    }
    Arr::from_shape_vec(IxDyn(&[c * k, lo]), out).unwrap()
}

fn fold1d_impl(x: &Arr, k: usize, out_len: usize) -> Arr {
    let ck = x.shape()[0];
    let lo = x.shape()[1];
    let c = ck / k;
    assert_eq!(ck % k, 0);
    assert_eq!(out_len, lo + k - 1);
    let xs = x.as_standard_layout();
    let xv = xs.as_slice().unwrap();
    let mut out = vec![0.0; c * out_len];
    for ci in 0..c {
        for j in 0..k {
            let row = (ci * k + j) * lo;
            let dst = ci * out_len + j;
            for i in 0..lo {
                out[dst + i] += xv[row + i];
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[c, out_len]), out).unwrap()
}

fn unfold2d_impl(x: &Arr, geom: ConvGeom) -> Arr {
    let ConvGeom {
        in_ch: c,
        in_h: h,
        in_w: w,
        kernel: k,
        stride: s,
        pad: p,
    } = geom;
    assert_eq!(x.shape(), [c, h, w]);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let xs = x.as_standard_layout();
    let xv = xs.as_slice().unwrap();
    let mut out = vec![0.0; c * k * k * oh * ow];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * (oh * ow);
                for oi in 0..oh {
                    let iy = (oi * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    for oj in 0..ow {
                        let ix = (oj * s + kj) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[row + oi * ow + oj] = xv[src_row + ix as usize];
                    }
                }
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[c * k * k, oh * ow]), out).unwrap()
}

fn fold2d_impl(x: &Arr, geom: ConvGeom) -> Arr {
    let ConvGeom {
        in_ch: c,
        in_h: h,
        in_w: w,
        kernel: k,
        stride: s,
        pad: p,
    } = geom;
    let (oh, ow) = (geom.out_h(), geom.out_w());
    assert_eq!(x.shape(), [c * k * k, oh * ow]);
    let xs = x.as_standard_layout();
    let xv = xs.as_slice().unwrap();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * (oh * ow);
                for oi in 0..oh {
                    let iy = (oi * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    for oj in 0..ow {
                        let ix = (oj * s + kj) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[dst_row + ix as usize] += xv[row + oi * ow + oj];
                    }
                }
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap()
}

/// Source position and lerp weights for one output index at scale x2
/// (half-pixel centers, edges clamped).
fn bilinear_taps(i: usize, n: usize) -> (usize, usize, f64) {
    let src = (i as f64 + 0.5) / 2.0 - 0.5;
    let src = src.clamp(0.0, (n - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

fn upsample2x_impl(x: &Arr) -> Arr {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h2, w2) = (2 * h, 2 * w);
    let xs = x.as_standard_layout();
    let xv = xs.as_slice().unwrap();
    let mut out = vec![0.0; c * h2 * w2];
    for ci in 0..c {
        for i in 0..h2 {
            let (y0, y1, wy) = bilinear_taps(i, h);
            for j in 0..w2 {
                let (x0, x1, wx) = bilinear_taps(j, w);
                let base = ci * h * w;
                let v = (1.0 - wy) * (1.0 - wx) * xv[base + y0 * w + x0]
                    + (1.0 - wy) * wx * xv[base + y0 * w + x1]
                    + wy * (1.0 - wx) * xv[base + y1 * w + x0]
                    + wy * wx * xv[base + y1 * w + x1];
                out[(ci * h2 + i) * w2 + j] = v;
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[c, h2, w2]), out).unwrap()
}

fn upsample2x_adj_impl(g: &Arr) -> Arr {
    let (c, h2, w2) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let gs = g.as_standard_layout();
    let gv = gs.as_slice().unwrap();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for i in 0..h2 {
            let (y0, y1, wy) = bilinear_taps(i, h);
            for j in 0..w2 {
                let (x0, x1, wx) = bilinear_taps(j, w);
                let gval = gv[(ci * h2 + i) * w2 + j];
                let base = ci * h * w;
                out[base + y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * gval;
                out[base + y0 * w + x1] += (1.0 - wy) * wx * gval;
                out[base + y1 * w + x0] += wy * (1.0 - wx) * gval;
                out[base + y1 * w + x1] += wy * wx * gval;
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap()
}
