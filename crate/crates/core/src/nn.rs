//! Network building blocks: a named parameter store plus equalized
//! learning-rate linear and convolution layers.
//!
//! Weights are stored with unit variance and rescaled by 1/sqrt(fan_in)
//! at use time, so all layers see comparable effective learning rates.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Arr, ConvGeom, Graph, Var};
use crate::rng::randn;

/// Flat name -> tensor container holding the trainable state of a model.
///
/// BTreeMap keeps iteration (and therefore gradient accumulation and
/// optimizer updates) in a fixed order, which the determinism contract
/// relies on.
#[derive(Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr) {
        assert!(
            self.params.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Bind every parameter as a leaf on the graph.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.params {
            vars.insert(name.clone(), g.leaf(value.clone()));
        }
        Bound { vars }
    }
}

/// Graph-bound view of a `ParamStore` for one forward/backward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    pub fn vars_in_order(&self) -> Vec<(String, Var)> {
        self.vars.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }
}

pub const LRELU_SLOPE: f64 = 0.2;

/// Fully connected layer with equalized learning rate.
#[derive(Clone)]
pub struct EqLinear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
    pub bias_init: f64,
}

impl EqLinear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        EqLinear {
            name: name.into(),
            in_dim,
            out_dim,
            bias: true,
            bias_init: 0.0,
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn bias_init(mut self, v: f64) -> Self {
        self.bias_init = v;
        self
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        store.insert(
            &format!("{}.weight", self.name),
            randn(rng, &[self.out_dim, self.in_dim]),
        );
        if self.bias {
            store.insert(
                &format!("{}.bias", self.name),
                Arr::from_elem(IxDyn(&[self.out_dim]), self.bias_init),
            );
        }
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.insert(
            &format!("{}.weight", self.name),
            Arr::zeros(IxDyn(&[self.out_dim, self.in_dim])),
        );
        if self.bias {
            store.insert(
                &format!("{}.bias", self.name),
                Arr::from_elem(IxDyn(&[self.out_dim]), self.bias_init),
            );
        }
    }

    /// x: [in_dim] -> [out_dim], or [in_dim, cols] -> [out_dim, cols].
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let vec_in = g.arr(x).ndim() == 1;
        let x2 = if vec_in {
            g.reshape(x, &[self.in_dim, 1])
        } else {
            x
        };
        let w = p.var(&format!("{}.weight", self.name));
        let scale = 1.0 / (self.in_dim as f64).sqrt();
        let w = g.mul_scalar(w, scale);
        let mut y = g.matmul(w, x2);
        if self.bias {
            let b = p.var(&format!("{}.bias", self.name));
            let cols = g.arr(y).shape()[1];
            let b2 = g.reshape(b, &[self.out_dim, 1]);
            let bb = g.broadcast_to(b2, &[self.out_dim, cols]);
            y = g.add(y, bb);
        }
        if vec_in {
            g.reshape(y, &[self.out_dim])
        } else {
            y
        }
    }
}

/// Plain conv2d with equalized learning rate (discriminator side).
#[derive(Clone)]
pub struct EqConv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl EqConv2d {
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        EqConv2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        store.insert(
            &format!("{}.weight", self.name),
            randn(rng, &[self.out_ch, self.in_ch * self.kernel * self.kernel]),
        );
        store.insert(
            &format!("{}.bias", self.name),
            Arr::zeros(IxDyn(&[self.out_ch])),
        );
    }

    pub fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            in_ch: self.in_ch,
            in_h: h,
            in_w: w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    /// x: [in_ch, H, W] -> [out_ch, OH, OW].
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let (h, w) = (g.arr(x).shape()[1], g.arr(x).shape()[2]);
        let geom = self.geom(h, w);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let patches = g.unfold2d(x, geom);
        let wt = p.var(&format!("{}.weight", self.name));
        let scale = 1.0 / ((self.in_ch * self.kernel * self.kernel) as f64).sqrt();
        let wt = g.mul_scalar(wt, scale);
        let y = g.matmul(wt, patches);
        let y = g.reshape(y, &[self.out_ch, oh, ow]);
        let b = p.var(&format!("{}.bias", self.name));
        let b3 = g.reshape(b, &[self.out_ch, 1, 1]);
        let bb = g.broadcast_to(b3, &[self.out_ch, oh, ow]);
        g.add(y, bb)
    }
}

/// Style-modulated conv2d with weight demodulation (generator side).
///
/// The per-sample style vector scales the input channels of the kernel;
/// demodulation rescales each output filter to unit norm before the
/// convolution is applied.
#[derive(Clone)]
pub struct ModConv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub demodulate: bool,
}

impl ModConv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ModConv2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            demodulate: true,
        }
    }

    pub fn no_demod(mut self) -> Self {
        self.demodulate = false;
        self
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        store.insert(
            &format!("{}.weight", self.name),
            randn(rng, &[self.out_ch, self.in_ch, self.kernel, self.kernel]),
        );
        store.insert(
            &format!("{}.bias", self.name),
            Arr::zeros(IxDyn(&[self.out_ch])),
        );
    }

    /// x: [in_ch, H, W], style: [in_ch] -> [out_ch, H', W'] (same spatial, pad k/2).
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, style: Var) -> Var {
        let k = self.kernel;
        let (h, w) = (g.arr(x).shape()[1], g.arr(x).shape()[2]);
        let wt = p.var(&format!("{}.weight", self.name));
        let scale = 1.0 / ((self.in_ch * k * k) as f64).sqrt();
        let wt = g.mul_scalar(wt, scale);

        let s4 = g.reshape(style, &[1, self.in_ch, 1, 1]);
        let sb = g.broadcast_to(s4, &[self.out_ch, self.in_ch, k, k]);
        let mut wmod = g.mul(wt, sb);

        if self.demodulate {
            let w2 = g.mul(wmod, wmod);
            let sums = g.sum_to(w2, &[self.out_ch, 1, 1, 1]);
            let sums = g.add_scalar(sums, 1e-8);
            let d = g.rsqrt(sums);
            let db = g.broadcast_to(d, &[self.out_ch, self.in_ch, k, k]);
            wmod = g.mul(wmod, db);
        }

        let geom = ConvGeom {
            in_ch: self.in_ch,
            in_h: h,
            in_w: w,
            kernel: k,
            stride: 1,
            pad: k / 2,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let patches = g.unfold2d(x, geom);
        let w2d = g.reshape(wmod, &[self.out_ch, self.in_ch * k * k]);
        let y = g.matmul(w2d, patches);
        let y = g.reshape(y, &[self.out_ch, oh, ow]);
        let b = p.var(&format!("{}.bias", self.name));
        let b3 = g.reshape(b, &[self.out_ch, 1, 1]);
        let bb = g.broadcast_to(b3, &[self.out_ch, oh, ow]);
        g.add(y, bb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn linear_shapes_and_scaling() {
        let mut rng = seeded(1);
        let mut store = ParamStore::new();
        let layer = EqLinear::new("fc", 4, 3);
        layer.init(&mut store, &mut rng);

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.leaf(Arr::from_elem(IxDyn(&[4]), 1.0));
        let y = layer.forward(&mut g, &p, x);
        assert_eq!(g.arr(y).shape(), &[3]);

        // manual: y_i = sum_j w_ij / sqrt(4) * 1
        let w = store.get("fc.weight");
        for i in 0..3 {
            let expect: f64 = (0..4).map(|j| w[[i, j]] / 2.0).sum();
            assert!((g.arr(y)[[i]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_output_shapes() {
        let mut rng = seeded(2);
        let mut store = ParamStore::new();
        let conv = EqConv2d::new("c", 3, 8, 3, 2);
        conv.init(&mut store, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.leaf(Arr::zeros(IxDyn(&[3, 8, 8])));
        let y = conv.forward(&mut g, &p, x);
        assert_eq!(g.arr(y).shape(), &[8, 4, 4]);
    }

    #[test]
    fn modconv_demodulation_normalizes_filters() {
        let mut rng = seeded(3);
        let mut store = ParamStore::new();
        let conv = ModConv2d::new("m", 4, 6, 3);
        conv.init(&mut store, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        // delta input probes the effective kernel norm per output channel
        let mut xv = Arr::zeros(IxDyn(&[4, 5, 5]));
        xv[[0, 2, 2]] = 1.0;
        let x = g.leaf(xv);
        let style = g.leaf(Arr::from_elem(IxDyn(&[4]), 1.3));
        let y = conv.forward(&mut g, &p, x, style);
        assert_eq!(g.arr(y).shape(), &[6, 5, 5]);
        // with demodulation the full kernel has unit L2 norm per out channel;
        // the delta only sees the in-channel-0 slice, so just check finiteness
        // here and norm in the dedicated assertion below.
        let wt = store.get("m.weight");
        let scale = 1.0 / ((4.0 * 9.0) as f64).sqrt();
        for o in 0..6 {
            let mut norm2 = 0.0;
            for i in 0..4 {
                for a in 0..3 {
                    for b in 0..3 {
                        let wm = wt[[o, i, a, b]] * scale * 1.3;
                        norm2 += wm * wm;
                    }
                }
            }
            let d = 1.0 / (norm2 + 1e-8).sqrt();
            // demodulated norm = norm2 * d^2 ~ 1
            assert!((norm2 * d * d - 1.0).abs() < 1e-6);
        }
    }
}
