//! Content/motion-decomposed frame synthesizer.
//!
//! A content code z_c maps through an MLP to the latent w, shared by every
//! frame of a video. Each frame is produced independently from (w, v_t):
//! the motion code is tiled over the learned 4x4 constant tensor,
//! concatenated channel-wise, and decoded by a modulated upsampling conv
//! stack into a tanh-bounded RGB frame. Nothing ever looks at another
//! frame, so generation is non-autoregressive by construction.

use ndarray::IxDyn;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Arr, Graph, Var};
use crate::config::{Config, GenCfg};
use crate::error::{Error, Result};
use crate::motion::{MotionNoiseGrid, MotionPipeline};
use crate::nn::{Bound, EqLinear, ModConv2d, ParamStore, LRELU_SLOPE};
use crate::rng::randn;

struct Stage {
    conv: ModConv2d,
    affine: EqLinear,
    upsample: bool,
}

/// Frame synthesizer (mapping network + synthesis network).
pub struct Generator {
    pub cfg: GenCfg,
    pub motion_dim: usize,
    mapping: Vec<EqLinear>,
    stages: Vec<Stage>,
    to_rgb: ModConv2d,
    to_rgb_affine: EqLinear,
    const_ch: usize,
}

impl Generator {
    pub fn new(cfg: &GenCfg, motion_dim: usize) -> Self {
        let mapping = (0..cfg.mapping_layers)
            .map(|i| EqLinear::new(format!("gen.map{i}"), cfg.w_dim, cfg.w_dim))
            .collect();

        let n_up = (cfg.resolution as f64 / 4.0).log2() as usize;
        let nf = |i: usize| (cfg.fmaps >> i).max(8);
        let const_ch = cfg.fmaps;
        let mut stages = Vec::new();
        let mut in_ch = const_ch + motion_dim;
        for i in 0..=n_up {
            let out_ch = nf(i);
            stages.push(Stage {
                conv: ModConv2d::new(format!("gen.conv{i}"), in_ch, out_ch, 3),
                affine: EqLinear::new(format!("gen.affine{i}"), cfg.w_dim, in_ch).bias_init(1.0),
                upsample: i > 0,
            });
            in_ch = out_ch;
        }
        Generator {
            cfg: cfg.clone(),
            motion_dim,
            mapping,
            stages,
            to_rgb: ModConv2d::new("gen.torgb", in_ch, 3, 1).no_demod(),
            to_rgb_affine: EqLinear::new("gen.torgb_affine", cfg.w_dim, in_ch).bias_init(1.0),
            const_ch,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        store.insert("gen.const", randn(rng, &[self.const_ch, 4, 4]));
        for m in &self.mapping {
            m.init(store, rng);
        }
        for s in &self.stages {
            s.conv.init(store, rng);
            s.affine.init(store, rng);
        }
        self.to_rgb.init(store, rng);
        self.to_rgb_affine.init(store, rng);
    }

    /// Content mapping w = F_c(z_c).
    pub fn mapping(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        let mut h = z;
        for m in &self.mapping {
            h = m.forward(g, p, h);
            h = g.leaky_relu(h, LRELU_SLOPE);
        }
        h
    }

    /// Per-layer styles derived from w; the w-side activations that feed the
    /// synthesis path.
    pub fn styles(&self, g: &mut Graph, p: &Bound, w: Var) -> Vec<Var> {
        let mut styles: Vec<Var> = self
            .stages
            .iter()
            .map(|s| s.affine.forward(g, p, w))
            .collect();
        styles.push(self.to_rgb_affine.forward(g, p, w));
        styles
    }

    /// Synthesize one frame from (w, v); [3, res, res] in (-1, 1).
    pub fn synthesize(&self, g: &mut Graph, p: &Bound, w: Var, v: Var) -> Var {
        let styles = self.styles(g, p, w);
        self.synthesize_with_styles(g, p, &styles, v)
    }

    pub fn synthesize_with_styles(
        &self,
        g: &mut Graph,
        p: &Bound,
        styles: &[Var],
        v: Var,
    ) -> Var {
        let c = p.var("gen.const");
        let v3 = g.reshape(v, &[self.motion_dim, 1, 1]);
        let vt = g.broadcast_to(v3, &[self.motion_dim, 4, 4]);
        let mut x = g.concat(&[c, vt], 0);
        for (stage, style) in self.stages.iter().zip(styles) {
            if stage.upsample {
                x = g.upsample2x(x);
            }
            x = stage.conv.forward(g, p, x, *style);
            x = g.leaky_relu(x, LRELU_SLOPE);
        }
        let rgb = self.to_rgb.forward(g, p, x, styles[self.stages.len()]);
        g.tanh(rgb)
    }
}

/// Full video generator: motion pipeline plus frame synthesizer sharing one
/// parameter store.
pub struct VideoGenerator {
    pub motion: MotionPipeline,
    pub gen: Generator,
}

/// In-graph handles of one generated video.
pub struct VideoGraph {
    pub w: Var,
    pub frames: Vec<Var>,
}

impl VideoGenerator {
    pub fn new(cfg: &Config) -> Self {
        VideoGenerator {
            motion: MotionPipeline::new(&cfg.motion),
            gen: Generator::new(&cfg.gen, cfg.motion.dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        self.motion.init(store, rng);
        self.gen.init(store, rng);
    }

    /// Build the whole video in-graph: w computed once, every frame an
    /// independent function of (w, v_t).
    pub fn generate_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        z_c: Var,
        grid: &MotionNoiseGrid,
        timestamps: &[f64],
    ) -> Result<VideoGraph> {
        for &t in timestamps {
            if !grid.covers(t) {
                return Err(Error::out_of_range(format!(
                    "timestamp {t} outside grid coverage [0, {})",
                    grid.max_time()
                )));
            }
        }
        let w = self.gen.mapping(g, p, z_c);
        let styles = self.gen.styles(g, p, w);
        let features = self.motion.features(g, p, grid)?;
        let mut frames = Vec::with_capacity(timestamps.len());
        for &t in timestamps {
            let v = self.motion.motion_code_graph(g, p, grid, features, t)?;
            frames.push(self.gen.synthesize_with_styles(g, p, &styles, v));
        }
        Ok(VideoGraph { w, frames })
    }

    /// Value-level convenience: frames as [3, res, res] arrays.
    pub fn generate_video(
        &self,
        store: &ParamStore,
        z_c: &[f64],
        grid: &MotionNoiseGrid,
        timestamps: &[f64],
    ) -> Result<Vec<Arr>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let z = g.leaf(Arr::from_shape_vec(IxDyn(&[z_c.len()]), z_c.to_vec()).unwrap());
        let video = self.generate_graph(&mut g, &p, z, grid, timestamps)?;
        Ok(video.frames.iter().map(|f| g.arr(*f).clone()).collect())
    }
}
