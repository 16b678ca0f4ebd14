//! Holistic sparse-video discriminator.
//!
//! Each frame is embedded independently by a strided conv backbone into a
//! [C, s, s] feature grid (s = 16 for resolutions >= 32). The k grids are
//! concatenated channel-wise, a conv head reduces them to a video feature
//! vector e(h) and an unconditional logit b(h), and time conditioning is
//! applied projection-style: y = b(h) + <p_delta, e(h)> where p_delta
//! embeds the k-1 time distances between the input frames.

use ndarray::IxDyn;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Arr, Graph, Var};
use crate::config::DiscCfg;
use crate::error::{Error, Result};
use crate::nn::{Bound, EqConv2d, EqLinear, ParamStore, LRELU_SLOPE};

const HEAD_HIDDEN: usize = 128;

pub struct Discriminator {
    pub cfg: DiscCfg,
    pub resolution: usize,
    from_rgb: EqConv2d,
    down: Vec<EqConv2d>,
    head_conv1: EqConv2d,
    head_conv2: EqConv2d,
    head_fc: EqLinear,
    head_e: EqLinear,
    head_b: EqLinear,
    delta_fc1: EqLinear,
    delta_fc2: EqLinear,
    feat_ch: usize,
    grid: usize,
}

impl Discriminator {
    pub fn new(cfg: &DiscCfg, resolution: usize) -> Self {
        let grid = resolution.min(16);
        let n_down = (resolution / grid).trailing_zeros() as usize;
        let nf = |i: usize| (cfg.fmaps << i).min(512);
        let from_rgb = EqConv2d::new("disc.fromrgb", 3, nf(0), 1, 1);
        let down: Vec<EqConv2d> = (0..n_down)
            .map(|i| EqConv2d::new(format!("disc.down{i}"), nf(i), nf(i + 1), 3, 2))
            .collect();
        let feat_ch = nf(n_down);
        let hc1 = (feat_ch * 2).min(512);
        let hc2 = (feat_ch * 2).min(512);
        let head_conv1 = EqConv2d::new("disc.head_conv1", cfg.k * feat_ch, hc1, 3, 2);
        let head_conv2 = EqConv2d::new("disc.head_conv2", hc1, hc2, 3, 2);
        let flat = hc2 * (grid / 4) * (grid / 4);
        Discriminator {
            cfg: cfg.clone(),
            resolution,
            from_rgb,
            down,
            head_conv1,
            head_conv2,
            head_fc: EqLinear::new("disc.head_fc", flat, HEAD_HIDDEN),
            head_e: EqLinear::new("disc.head_e", HEAD_HIDDEN, (cfg.k - 1) * cfg.d_pe),
            head_b: EqLinear::new("disc.head_b", HEAD_HIDDEN, 1),
            delta_fc1: EqLinear::new("disc.delta_fc1", cfg.d_pe, cfg.d_pe),
            delta_fc2: EqLinear::new("disc.delta_fc2", cfg.d_pe, cfg.d_pe),
            feat_ch,
            grid,
        }
    }

    /// Channel count of one frame's feature grid.
    pub fn feature_channels(&self) -> usize {
        self.feat_ch
    }

    pub fn feature_grid(&self) -> usize {
        self.grid
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        self.from_rgb.init(store, rng);
        for d in &self.down {
            d.init(store, rng);
        }
        self.head_conv1.init(store, rng);
        self.head_conv2.init(store, rng);
        self.head_fc.init(store, rng);
        self.head_e.init(store, rng);
        self.head_b.init(store, rng);
        self.delta_fc1.init(store, rng);
        self.delta_fc2.init(store, rng);
    }

    /// Per-frame feature extractor D_b: [3, res, res] -> [C, s, s].
    pub fn extract_features(&self, g: &mut Graph, p: &Bound, frame: Var) -> Var {
        let mut x = self.from_rgb.forward(g, p, frame);
        x = g.leaky_relu(x, LRELU_SLOPE);
        for d in &self.down {
            x = d.forward(g, p, x);
            x = g.leaky_relu(x, LRELU_SLOPE);
        }
        x
    }

    /// Fixed sinusoidal encoding of one time distance (geometric period
    /// ladder over 4..1024 frames).
    pub fn sinusoidal_encoding(&self, delta: f64) -> Arr {
        let d = self.cfg.d_pe;
        let pairs = d / 2;
        let mut out = vec![0.0; d];
        for j in 0..pairs {
            let frac = if pairs == 1 {
                0.0
            } else {
                j as f64 / (pairs - 1) as f64
            };
            let period = 4.0 * (1024.0f64 / 4.0).powf(frac);
            let arg = std::f64::consts::TAU * delta / period;
            out[2 * j] = arg.sin();
            out[2 * j + 1] = arg.cos();
        }
        Arr::from_shape_vec(IxDyn(&[d]), out).unwrap()
    }

    /// p_delta: each distance is encoded, passed through the shared 2-layer
    /// MLP and the per-slot embeddings are concatenated in frame order.
    pub fn embed_deltas(&self, g: &mut Graph, p: &Bound, deltas: &[f64]) -> Result<Var> {
        if deltas.len() != self.cfg.k - 1 {
            return Err(Error::invalid(format!(
                "expected {} time distances for k = {}, got {}",
                self.cfg.k - 1,
                self.cfg.k,
                deltas.len()
            )));
        }
        if let Some(bad) = deltas.iter().find(|d| **d <= 0.0) {
            return Err(Error::invalid(format!(
                "time distances must be strictly positive, got {bad}"
            )));
        }
        let slots: Vec<Var> = deltas
            .iter()
            .map(|&d| {
                let enc = g.leaf(self.sinusoidal_encoding(d));
                let h = self.delta_fc1.forward(g, p, enc);
                let h = g.leaky_relu(h, LRELU_SLOPE);
                self.delta_fc2.forward(g, p, h)
            })
            .collect();
        Ok(g.concat(&slots, 0))
    }

    /// Conv head over the concatenated per-frame features: returns the
    /// video feature vector e(h) and the unconditional logit b(h).
    pub fn video_head(&self, g: &mut Graph, p: &Bound, per_frame: &[Var]) -> Result<(Var, Var)> {
        if per_frame.len() != self.cfg.k {
            return Err(Error::invalid(format!(
                "discriminator is built for k = {} frames, got {}",
                self.cfg.k,
                per_frame.len()
            )));
        }
        let h = g.concat(per_frame, 0);
        let mut x = self.head_conv1.forward(g, p, h);
        x = g.leaky_relu(x, LRELU_SLOPE);
        x = self.head_conv2.forward(g, p, x);
        x = g.leaky_relu(x, LRELU_SLOPE);
        let flat_len = g.arr(x).len();
        let flat = g.reshape(x, &[flat_len]);
        let mut feat = self.head_fc.forward(g, p, flat);
        feat = g.leaky_relu(feat, LRELU_SLOPE);
        let e = self.head_e.forward(g, p, feat);
        let b = self.head_b.forward(g, p, feat);
        let b = g.reshape(b, &[]);
        Ok((e, b))
    }

    /// Full logit for k frame vars and their time distances.
    pub fn discriminate(
        &self,
        g: &mut Graph,
        p: &Bound,
        frames: &[Var],
        deltas: &[f64],
    ) -> Result<Var> {
        let feats: Vec<Var> = frames
            .iter()
            .map(|f| self.extract_features(g, p, *f))
            .collect();
        let (e, b) = self.video_head(g, p, &feats)?;
        if !self.cfg.time_conditioning {
            // deltas are still validated so both paths share the contract
            if deltas.len() != self.cfg.k - 1 {
                return Err(Error::invalid(format!(
                    "expected {} time distances, got {}",
                    self.cfg.k - 1,
                    deltas.len()
                )));
            }
            return Ok(b);
        }
        let p_delta = self.embed_deltas(g, p, deltas)?;
        let proj = g.dot(p_delta, e);
        Ok(g.add(b, proj))
    }

    /// Per-pixel gradient magnitude of the logit, one [h, w] map per frame,
    /// each normalized to [0, 1].
    pub fn gradient_map(
        &self,
        store: &ParamStore,
        frames: &[Arr],
        deltas: &[f64],
    ) -> Result<Vec<Arr>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let frame_vars: Vec<Var> = frames.iter().map(|f| g.leaf(f.clone())).collect();
        let y = self.discriminate(&mut g, &p, &frame_vars, deltas)?;
        let grads = g.backward(y, &frame_vars);
        let mut maps = Vec::with_capacity(grads.len());
        for gv in grads {
            let ga = g.arr(gv);
            let (h, w) = (ga.shape()[1], ga.shape()[2]);
            let mut map = Arr::zeros(IxDyn(&[h, w]));
            for y in 0..h {
                for x in 0..w {
                    let mut sq = 0.0;
                    for c in 0..3 {
                        sq += ga[[c, y, x]] * ga[[c, y, x]];
                    }
                    map[[y, x]] = sq.sqrt();
                }
            }
            let max = map.iter().fold(0.0f64, |m, v| m.max(*v));
            if max > 0.0 {
                map.mapv_inplace(|v| v / max);
            }
            maps.push(map);
        }
        Ok(maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, seeded};

    fn tiny_disc(res: usize) -> (Discriminator, ParamStore) {
        let cfg = DiscCfg {
            fmaps: 4,
            k: 3,
            time_conditioning: true,
            d_pe: 8,
        };
        let d = Discriminator::new(&cfg, res);
        let mut store = ParamStore::new();
        d.init(&mut store, &mut seeded(1));
        (d, store)
    }

    #[test]
    fn backbone_shape_64_to_16_with_two_strided_stages() {
        let (d, store) = tiny_disc(64);
        assert_eq!(d.down.len(), 2);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.leaf(randn(&mut seeded(2), &[3, 64, 64]));
        let h = d.extract_features(&mut g, &p, f);
        assert_eq!(g.arr(h).shape(), &[d.feature_channels(), 16, 16]);
    }

    #[test]
    fn paper_scale_concat_shape() {
        // channels reach 512 at the 16x16 grid; concat is [k*512, 16, 16]
        let cfg = DiscCfg {
            fmaps: 128,
            k: 3,
            time_conditioning: true,
            d_pe: 16,
        };
        let d = Discriminator::new(&cfg, 64);
        assert_eq!(d.feature_channels(), 512);
        assert_eq!(d.feature_grid(), 16);
        assert_eq!(d.cfg.k * d.feature_channels(), 3 * 512);
    }

    #[test]
    fn zero_weights_zero_features_and_zero_logit() {
        let (d, mut store) = tiny_disc(16);
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            let shape = store.get(&name).shape().to_vec();
            *store.get_mut(&name) = Arr::zeros(IxDyn(&shape));
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.leaf(randn(&mut seeded(3), &[3, 16, 16]));
        let h = d.extract_features(&mut g, &p, f);
        assert!(g.arr(h).iter().all(|x| *x == 0.0));

        let frames: Vec<Var> = (0..3)
            .map(|i| g.leaf(randn(&mut seeded(4 + i), &[3, 16, 16])))
            .collect();
        let y = d.discriminate(&mut g, &p, &frames, &[1.0, 3.0]).unwrap();
        assert_eq!(g.scalar_value(y), 0.0);
    }

    #[test]
    fn per_frame_independence() {
        let (d, store) = tiny_disc(16);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let a = randn(&mut seeded(5), &[3, 16, 16]);
        let fa = g.leaf(a.clone());
        let ha = d.extract_features(&mut g, &p, fa);
        let first = g.arr(ha).clone();

        // same frame next to very different neighbours: feature unchanged
        let fa2 = g.leaf(a);
        let ha2 = d.extract_features(&mut g, &p, fa2);
        assert_eq!(first, *g.arr(ha2));
    }

    #[test]
    fn delta_embedding_contracts() {
        let (d, store) = tiny_disc(16);
        let mut g = Graph::new();
        let p = store.bind(&mut g);

        // k = 2 -> p_delta has length d_pe
        let cfg2 = DiscCfg {
            fmaps: 4,
            k: 2,
            time_conditioning: true,
            d_pe: 8,
        };
        let d2 = Discriminator::new(&cfg2, 16);
        let mut store2 = ParamStore::new();
        d2.init(&mut store2, &mut seeded(7));
        let mut g2 = Graph::new();
        let p2 = store2.bind(&mut g2);
        let e = d2.embed_deltas(&mut g2, &p2, &[5.0]).unwrap();
        assert_eq!(g2.arr(e).len(), 8);

        // identical deltas produce identical per-slot embeddings
        let e = d.embed_deltas(&mut g, &p, &[7.0, 7.0]).unwrap();
        let v = g.arr(e);
        for i in 0..8 {
            assert_eq!(v[[i]], v[[8 + i]]);
        }

        // non-positive delta rejected
        assert!(d.embed_deltas(&mut g, &p, &[1.0, 0.0]).is_err());
        assert!(d.embed_deltas(&mut g, &p, &[-2.0, 1.0]).is_err());

        // wrong arity rejected
        assert!(d.embed_deltas(&mut g, &p, &[1.0]).is_err());
    }

    #[test]
    fn delta_1_vs_32_not_collapsed() {
        let (d, store) = tiny_disc(16);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let slot = |g: &mut Graph, p: &Bound, delta: f64| -> Vec<f64> {
            let e = d.embed_deltas(g, p, &[delta, delta]).unwrap();
            g.arr(e).iter().take(8).copied().collect()
        };
        let a = slot(&mut g, &p, 1.0);
        let b = slot(&mut g, &p, 32.0);
        let dotp: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = dotp / (na * nb);
        assert!(cos < 0.99, "embedding collapse: cos = {cos}");
    }

    #[test]
    fn conditioning_disabled_ignores_deltas() {
        let cfg = DiscCfg {
            fmaps: 4,
            k: 3,
            time_conditioning: false,
            d_pe: 8,
        };
        let d = Discriminator::new(&cfg, 16);
        let mut store = ParamStore::new();
        d.init(&mut store, &mut seeded(8));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let frames: Vec<Var> = (0..3)
            .map(|i| g.leaf(randn(&mut seeded(9 + i), &[3, 16, 16])))
            .collect();
        let y1 = d.discriminate(&mut g, &p, &frames, &[1.0, 2.0]).unwrap();
        let y2 = d.discriminate(&mut g, &p, &frames, &[9.0, 22.0]).unwrap();
        assert_eq!(g.scalar_value(y1), g.scalar_value(y2));
    }

    #[test]
    fn projection_is_affine_in_the_embedding() {
        let (d, store) = tiny_disc(16);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let frames: Vec<Var> = (0..3)
            .map(|i| g.leaf(randn(&mut seeded(20 + i), &[3, 16, 16])))
            .collect();
        let feats: Vec<Var> = frames
            .iter()
            .map(|f| d.extract_features(&mut g, &p, *f))
            .collect();
        let (e, b) = d.video_head(&mut g, &p, &feats).unwrap();
        let p1 = d.embed_deltas(&mut g, &p, &[2.0, 5.0]).unwrap();
        let y_at = |g: &mut Graph, scale: f64| -> f64 {
            let ps = g.mul_scalar(p1, scale);
            let proj = g.dot(ps, e);
            let y = g.add(b, proj);
            g.scalar_value(y)
        };
        let y0 = y_at(&mut g, 0.0);
        let y1 = y_at(&mut g, 1.0);
        let y2 = y_at(&mut g, 2.0);
        assert!(
            ((y2 - y1) - (y1 - y0)).abs() < 1e-9,
            "projection must be affine: {y0} {y1} {y2}"
        );
    }

    #[test]
    fn logit_pixel_gradients_match_finite_differences() {
        let (d, store) = tiny_disc(8);
        let frames: Vec<Arr> = (0..3).map(|i| randn(&mut seeded(30 + i), &[3, 8, 8])).collect();
        let deltas = [2.0, 3.0];

        let value = |fr: &[Arr]| -> f64 {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let fv: Vec<Var> = fr.iter().map(|f| g.leaf(f.clone())).collect();
            let y = d.discriminate(&mut g, &p, &fv, &deltas).unwrap();
            g.scalar_value(y)
        };

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let fv: Vec<Var> = frames.iter().map(|f| g.leaf(f.clone())).collect();
        let y = d.discriminate(&mut g, &p, &fv, &deltas).unwrap();
        let grads = g.backward(y, &fv);

        let eps = 1e-6;
        for fi in 0..3 {
            let ga = g.arr(grads[fi]).clone();
            for idx in [0usize, 17, 63, 150] {
                let mut fp = frames.clone();
                fp[fi].as_slice_mut().unwrap()[idx] += eps;
                let mut fm = frames.clone();
                fm[fi].as_slice_mut().unwrap()[idx] -= eps;
                let num = (value(&fp) - value(&fm)) / (2.0 * eps);
                let a = ga.as_slice().unwrap()[idx];
                let denom = a.abs().max(num.abs()).max(1e-3);
                assert!(
                    (a - num).abs() / denom < 1e-4,
                    "frame {fi} pixel {idx}: {a} vs {num}"
                );
            }
        }
    }

    #[test]
    fn gradient_maps_normalized_and_counted() {
        let (d, store) = tiny_disc(16);
        let frames: Vec<Arr> = (0..3).map(|i| randn(&mut seeded(40 + i), &[3, 16, 16])).collect();
        let maps = d.gradient_map(&store, &frames, &[1.0, 4.0]).unwrap();
        assert_eq!(maps.len(), 3);
        for m in &maps {
            assert_eq!(m.shape(), &[16, 16]);
            assert!(m.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            assert!(m.iter().any(|v| *v > 0.0));
        }

        // zero weights -> all-zero maps
        let mut zstore = ParamStore::new();
        d.init(&mut zstore, &mut seeded(41));
        for name in zstore.names().map(String::from).collect::<Vec<_>>() {
            let shape = zstore.get(&name).shape().to_vec();
            *zstore.get_mut(&name) = Arr::zeros(IxDyn(&shape));
        }
        let maps = d.gradient_map(&zstore, &frames, &[1.0, 4.0]).unwrap();
        for m in &maps {
            assert!(m.iter().all(|v| *v == 0.0));
        }
    }
}
