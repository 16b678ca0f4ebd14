//! Continuous motion codes.
//!
//! A video's motion is represented by a lattice of Gaussian noise tokens
//! spaced `spacing` frames apart. A padding-less 1-D convolution stack maps
//! them to per-anchor features u_i; per-segment wave parameters turn those
//! into a sine embedding; and segment stitching makes the embedding
//! continuous and aperiodic:
//!
//!   v(t) = v~(t) - lerp(v~(t_l), v~(t_r), s) + lerp(a_l, a_r, s)
//!
//! with s the normalized position inside the segment, v~ the raw sine code
//! computed from the left anchor's features, and a = W_a u the alignment
//! vector that v(t) attains exactly at anchors.

use ndarray::IxDyn;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Arr, Graph, Var};
use crate::config::{MotionCfg, MotionRepr};
use crate::error::{Error, Result};
use crate::nn::{Bound, EqLinear, ParamStore, LRELU_SLOPE};
use crate::rng::{randn, seeded};

/// Equidistant Gaussian noise tokens on the time lattice, with
/// `lead_tokens` extra tokens at negative logical times feeding the
/// padding-less convolutions.
#[derive(Debug, Clone)]
pub struct MotionNoiseGrid {
    /// [num_tokens, dim]; row j sits at logical time (j - lead_tokens) * spacing.
    pub tokens: Arr,
    pub spacing: f64,
    pub lead_tokens: usize,
}

impl MotionNoiseGrid {
    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Anchor count: tokens at logical times 0, spacing, 2*spacing, ...
    pub fn num_logical(&self) -> usize {
        self.num_tokens() - self.lead_tokens
    }

    pub fn anchor_time(&self, i: usize) -> f64 {
        i as f64 * self.spacing
    }

    /// Largest time the grid can embed (exclusive).
    pub fn max_time(&self) -> f64 {
        (self.num_logical() - 1) as f64 * self.spacing
    }

    pub fn covers(&self, t: f64) -> bool {
        t >= 0.0 && t < self.max_time()
    }
}

/// Sample a noise grid covering [0, t_max].
///
/// The anchor count is the smallest n with t_max < n*spacing, giving n+1
/// logical tokens; `lead_tokens` extra tokens are prepended. Tokens are
/// drawn row by row, so grids sampled from the same seed share a prefix:
/// extending the horizon never changes earlier tokens.
pub fn sample_noise_grid(
    seed: u64,
    t_max: f64,
    spacing: f64,
    lead_tokens: usize,
    dim: usize,
) -> Result<MotionNoiseGrid> {
    if spacing <= 0.0 {
        return Err(Error::invalid(format!(
            "noise grid spacing must be positive, got {spacing}"
        )));
    }
    if t_max < 0.0 {
        return Err(Error::invalid(format!("t_max must be >= 0, got {t_max}")));
    }
    let n = (t_max / spacing).floor() as usize + 1;
    let num_logical = n + 1;
    let total = num_logical + lead_tokens;
    let mut rng = seeded(seed);
    let tokens = randn(&mut rng, &[total, dim]);
    Ok(MotionNoiseGrid {
        tokens,
        spacing,
        lead_tokens,
    })
}

/// Linearly spaced period scaling for the bounded wave frequencies.
///
/// sigma_i = 2*pi / (omega_min + (i/N) * (omega_max - omega_min)), N = dim-1,
/// so the endpoints 2*pi/omega_min and 2*pi/omega_max are attained exactly.
#[derive(Debug, Clone)]
pub struct PeriodScaling {
    pub sigma: Vec<f64>,
    pub omega_min: f64,
    pub omega_max: f64,
}

impl PeriodScaling {
    pub fn linear(dim: usize, omega_min: f64, omega_max: f64) -> Self {
        assert!(dim >= 1 && omega_min > 0.0 && omega_max >= omega_min);
        let n = (dim - 1).max(1) as f64;
        let sigma = (0..dim)
            .map(|i| {
                let frac = if dim == 1 { 0.0 } else { i as f64 / n };
                2.0 * std::f64::consts::PI / (omega_min + frac * (omega_max - omega_min))
            })
            .collect();
        PeriodScaling {
            sigma,
            omega_min,
            omega_max,
        }
    }

    pub fn as_arr(&self) -> Arr {
        Arr::from_shape_vec(IxDyn(&[self.sigma.len()]), self.sigma.clone()).unwrap()
    }
}

/// Wave parameters of one segment, evaluated at the left anchor.
#[derive(Debug, Clone)]
pub struct SegmentWaveParams {
    pub alpha: Vec<f64>,
    pub omega: Vec<f64>,
    pub rho: Vec<f64>,
    pub align: Vec<f64>,
}

/// Raw sine code of Eq-style wave parameters at absolute time t.
pub fn raw_code(wp: &SegmentWaveParams, t: f64) -> Vec<f64> {
    wp.alpha
        .iter()
        .zip(&wp.omega)
        .zip(&wp.rho)
        .map(|((a, o), r)| a * (o * t + r).sin())
        .collect()
}

/// Stitched code at time t inside segment [t_l, t_r]: the pure formula on
/// plain values, shared by the tested scalar example and the full pipeline.
pub fn stitched_code(
    wp: &SegmentWaveParams,
    t: f64,
    t_l: f64,
    t_r: f64,
    align_l: &[f64],
    align_r: &[f64],
) -> Vec<f64> {
    let s = (t - t_l) / (t_r - t_l);
    let vt = raw_code(wp, t);
    let vl = raw_code(wp, t_l);
    let vr = raw_code(wp, t_r);
    (0..vt.len())
        .map(|i| {
            let lerp_raw = vl[i] + s * (vr[i] - vl[i]);
            let lerp_align = align_l[i] + s * (align_r[i] - align_l[i]);
            vt[i] - lerp_raw + lerp_align
        })
        .collect()
}

/// In-graph wave parameter vars of one anchor.
pub struct WaveVars {
    pub alpha: Var,
    pub omega: Var,
    pub rho: Var,
    pub align: Var,
}

/// Motion pipeline: conv mapping network plus the four projection heads.
#[derive(Clone)]
pub struct MotionPipeline {
    pub cfg: MotionCfg,
    convs: Vec<ConvLayer>,
    head_alpha: EqLinear,
    head_omega: EqLinear,
    head_rho: EqLinear,
    head_align: EqLinear,
    scaling: PeriodScaling,
}

#[derive(Clone)]
struct ConvLayer {
    name: String,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
}

impl ConvLayer {
    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        store.insert(
            &format!("{}.weight", self.name),
            randn(rng, &[self.out_ch, self.in_ch * self.kernel]),
        );
        store.insert(
            &format!("{}.bias", self.name),
            Arr::zeros(IxDyn(&[self.out_ch])),
        );
    }

    /// x: [in_ch, L] -> [out_ch, L - kernel + 1]; no padding.
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let patches = g.unfold1d(x, self.kernel);
        let w = p.var(&format!("{}.weight", self.name));
        let scale = 1.0 / ((self.in_ch * self.kernel) as f64).sqrt();
        let w = g.mul_scalar(w, scale);
        let y = g.matmul(w, patches);
        let cols = g.arr(y).shape()[1];
        let b = p.var(&format!("{}.bias", self.name));
        let b2 = g.reshape(b, &[self.out_ch, 1]);
        let bb = g.broadcast_to(b2, &[self.out_ch, cols]);
        g.add(y, bb)
    }
}

impl MotionPipeline {
    pub fn new(cfg: &MotionCfg) -> Self {
        let d = cfg.dim;
        let convs = (0..cfg.layers)
            .map(|i| ConvLayer {
                name: format!("motion.conv{i}"),
                in_ch: d,
                out_ch: d,
                kernel: cfg.kernel_size,
            })
            .collect();
        let mk = |n: &str| EqLinear::new(format!("motion.{n}"), d, d).no_bias();
        MotionPipeline {
            cfg: cfg.clone(),
            convs,
            head_alpha: mk("alpha"),
            head_omega: mk("omega"),
            head_rho: mk("rho"),
            head_align: mk("align"),
            scaling: PeriodScaling::linear(d, cfg.omega_min, cfg.omega_max),
        }
    }

    pub fn scaling(&self) -> &PeriodScaling {
        &self.scaling
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        for c in &self.convs {
            c.init(store, rng);
        }
        self.head_alpha.init(store, rng);
        self.head_omega.init(store, rng);
        self.head_rho.init(store, rng);
        self.head_align.init(store, rng);
    }

    /// Default lead-token count: exactly the tokens the conv stack consumes.
    pub fn default_lead_tokens(&self) -> usize {
        self.cfg.conv_consumed()
    }

    pub fn sample_grid(&self, seed: u64, t_max: f64) -> Result<MotionNoiseGrid> {
        sample_noise_grid(
            seed,
            t_max,
            self.cfg.spacing,
            self.default_lead_tokens(),
            self.cfg.dim,
        )
    }

    /// Conv features for every position: [dim, num_tokens - consumed].
    ///
    /// Feature column f corresponds to the token window ending at token
    /// index f + consumed, i.e. the feature only sees tokens at logical
    /// times <= its own anchor.
    pub fn features(&self, g: &mut Graph, p: &Bound, grid: &MotionNoiseGrid) -> Result<Var> {
        let consumed = self.cfg.conv_consumed();
        if grid.num_tokens() < consumed + 1 {
            return Err(Error::invalid(format!(
                "motion mapping needs at least {} tokens ({} layers of kernel {} without padding), got {}",
                consumed + 1,
                self.cfg.layers,
                self.cfg.kernel_size,
                grid.num_tokens()
            )));
        }
        if grid.dim() != self.cfg.dim {
            return Err(Error::invalid(format!(
                "grid dim {} does not match motion dim {}",
                grid.dim(),
                self.cfg.dim
            )));
        }
        let tokens = g.leaf(grid.tokens.clone());
        self.features_from_var(g, p, tokens)
    }

    /// Same as `features` but for an already-bound token var (gradient path
    /// into the noise tokens stays live).
    pub fn features_from_var(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        let mut x = g.transpose(tokens); // [dim, L]
        for c in &self.convs {
            x = c.forward(g, p, x);
            x = g.leaky_relu(x, LRELU_SLOPE);
        }
        Ok(x)
    }

    /// Index of the feature column for logical anchor i.
    pub fn feature_index(&self, grid: &MotionNoiseGrid, anchor: usize) -> Result<usize> {
        let consumed = self.cfg.conv_consumed();
        let idx = anchor as isize + grid.lead_tokens as isize - consumed as isize;
        if idx < 0 {
            return Err(Error::invalid(format!(
                "anchor {anchor} not covered: grid has {} lead tokens but the conv stack consumes {consumed}",
                grid.lead_tokens
            )));
        }
        Ok(idx as usize)
    }

    fn feature_col(&self, g: &mut Graph, features: Var, idx: usize) -> Var {
        let d = self.cfg.dim;
        let col = g.slice_axis(features, 1, idx, idx + 1);
        g.reshape(col, &[d])
    }

    /// In-graph wave parameters from one anchor's features.
    pub fn wave_params(&self, g: &mut Graph, p: &Bound, u: Var) -> WaveVars {
        let alpha = self.head_alpha.forward(g, p, u);
        let rho = self.head_rho.forward(g, p, u);
        let align = self.head_align.forward(g, p, u);
        let raw_omega = self.head_omega.forward(g, p, u);
        let t = g.tanh(raw_omega);
        let t1 = g.add_scalar(t, 1.0);
        let sigma = g.leaf(self.scaling.as_arr());
        let omega = g.mul(t1, sigma);
        WaveVars {
            alpha,
            omega,
            rho,
            align,
        }
    }

    /// Segment index l with t in [l*spacing, (l+1)*spacing).
    pub fn segment_of(&self, grid: &MotionNoiseGrid, t: f64) -> Result<usize> {
        if !grid.covers(t) {
            return Err(Error::out_of_range(format!(
                "t = {t} outside grid coverage [0, {})",
                grid.max_time()
            )));
        }
        Ok((t / self.cfg.spacing).floor() as usize)
    }

    /// In-graph motion code v(t) for the configured representation.
    pub fn motion_code_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        grid: &MotionNoiseGrid,
        features: Var,
        t: f64,
    ) -> Result<Var> {
        let l = self.segment_of(grid, t)?;
        let fl = self.feature_index(grid, l)?;
        let fr = self.feature_index(grid, l + 1)?;
        let n_feat = g.arr(features).shape()[1];
        if fr >= n_feat {
            return Err(Error::out_of_range(format!(
                "feature column {fr} out of range ({n_feat} features)"
            )));
        }
        let u_l = self.feature_col(g, features, fl);
        let u_r = self.feature_col(g, features, fr);
        let t_l = grid.anchor_time(l);
        let t_r = grid.anchor_time(l + 1);
        let s = (t - t_l) / (t_r - t_l);

        match self.cfg.representation {
            MotionRepr::Interp => Ok(g.lerp(u_l, u_r, s)),
            MotionRepr::Acyclic => {
                let wp = self.wave_params(g, p, u_l);
                let align_r = self.head_align.forward(g, p, u_r);
                let raw_at = |g: &mut Graph, tt: f64| {
                    let wt = g.mul_scalar(wp.omega, tt);
                    let arg = g.add(wt, wp.rho);
                    let sn = g.sin(arg);
                    g.mul(wp.alpha, sn)
                };
                let vt = raw_at(g, t);
                let vl = raw_at(g, t_l);
                let vr = raw_at(g, t_r);
                let lerp_raw = g.lerp(vl, vr, s);
                let lerp_align = g.lerp(wp.align, align_r, s);
                let d = g.sub(vt, lerp_raw);
                Ok(g.add(d, lerp_align))
            }
        }
    }

    /// Value-level motion code: builds a throwaway graph.
    pub fn motion_code(
        &self,
        store: &ParamStore,
        grid: &MotionNoiseGrid,
        t: f64,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let features = self.features(&mut g, &p, grid)?;
        let v = self.motion_code_graph(&mut g, &p, grid, features, t)?;
        Ok(g.arr(v).iter().copied().collect())
    }

    /// Value-level feature sequence: [dim, n_features] column-per-anchor.
    pub fn motion_mapping(&self, store: &ParamStore, grid: &MotionNoiseGrid) -> Result<Arr> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = self.features(&mut g, &p, grid)?;
        Ok(g.arr(f).clone())
    }

    /// Value-level wave parameters at one anchor's features.
    pub fn wave_params_value(&self, store: &ParamStore, u: &[f64]) -> SegmentWaveParams {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let uv = g.leaf(Arr::from_shape_vec(IxDyn(&[u.len()]), u.to_vec()).unwrap());
        let wp = self.wave_params(&mut g, &p, uv);
        SegmentWaveParams {
            alpha: g.arr(wp.alpha).iter().copied().collect(),
            omega: g.arr(wp.omega).iter().copied().collect(),
            rho: g.arr(wp.rho).iter().copied().collect(),
            align: g.arr(wp.align).iter().copied().collect(),
        }
    }
}
