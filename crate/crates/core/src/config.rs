//! Declarative run configuration: a flat key=value text format with
//! section prefixes (motion., gen., disc., sample., train., eval.).
//!
//! Every run writes its resolved configuration next to its outputs, so a
//! config file plus a seed reproduces a run exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum MotionRepr {
    /// Segment-stitched sine encoding (the full mechanism).
    Acyclic,
    /// Piecewise-linear interpolation of motion features (ablation).
    Interp,
}

impl MotionRepr {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "acyclic" => Ok(MotionRepr::Acyclic),
            "interp" => Ok(MotionRepr::Interp),
            // accepted for compatibility; recurrent motion codes are not
            // implemented, so this resolves to the default representation
            "lstm-free-ablation-off" => Ok(MotionRepr::Acyclic),
            other => Err(Error::Config(format!(
                "motion.representation must be one of acyclic|interp|lstm-free-ablation-off, got {other}"
            ))),
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            MotionRepr::Acyclic => "acyclic",
            MotionRepr::Interp => "interp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OffsetPolicy {
    Random,
    First,
}

impl OffsetPolicy {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(OffsetPolicy::Random),
            "first" => Ok(OffsetPolicy::First),
            other => Err(Error::Config(format!(
                "eval.offset_policy must be random|first, got {other}"
            ))),
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            OffsetPolicy::Random => "random",
            OffsetPolicy::First => "first",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MotionCfg {
    /// Anchor spacing in frames (delta^z).
    pub spacing: f64,
    /// Shortest wave period in frames.
    pub omega_min: f64,
    /// Longest wave period in frames.
    pub omega_max: f64,
    /// Motion dimensionality (noise, features and codes share it).
    pub dim: usize,
    pub kernel_size: usize,
    pub layers: usize,
    pub representation: MotionRepr,
}

impl Default for MotionCfg {
    fn default() -> Self {
        MotionCfg {
            spacing: 16.0,
            omega_min: 8.0,
            omega_max: 1024.0,
            dim: 512,
            kernel_size: 11,
            layers: 2,
            representation: MotionRepr::Acyclic,
        }
    }
}

impl MotionCfg {
    /// Tokens consumed by the padding-less conv stack.
    pub fn conv_consumed(&self) -> usize {
        self.layers * (self.kernel_size - 1)
    }
}

#[derive(Debug, Clone)]
pub struct GenCfg {
    pub resolution: usize,
    /// Channel count of the 4x4 stage; later stages halve it (floor 8).
    pub fmaps: usize,
    pub w_dim: usize,
    /// Depth of the content mapping MLP.
    pub mapping_layers: usize,
}

impl Default for GenCfg {
    fn default() -> Self {
        GenCfg {
            resolution: 64,
            fmaps: 64,
            w_dim: 512,
            mapping_layers: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscCfg {
    /// Channel count after fromRGB; doubles per downsampling stage (cap 512).
    pub fmaps: usize,
    /// Frames per video fed to the discriminator.
    pub k: usize,
    pub time_conditioning: bool,
    /// Per-slot dimensionality of the time-distance embedding.
    pub d_pe: usize,
}

impl Default for DiscCfg {
    fn default() -> Self {
        DiscCfg {
            fmaps: 16,
            k: 3,
            time_conditioning: true,
            d_pe: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleCfg {
    pub k: usize,
    /// Horizon T: timestamps are drawn from [0, T-1].
    pub t_max: usize,
    pub max_span: usize,
}

impl Default for SampleCfg {
    fn default() -> Self {
        SampleCfg {
            k: 3,
            t_max: 1024,
            max_span: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainCfg {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// R1 loss coefficient (gamma).
    pub r1_gamma: f64,
    /// Apply the penalty as (gamma/2)*||grad||^2 when true, gamma*||grad||^2
    /// otherwise.
    pub r1_half: bool,
    /// Apply R1 every this many discriminator steps.
    pub r1_interval: usize,
    pub flip_prob: f64,
    /// Maximum absolute integer translation of the video-consistent shift
    /// augmentation (0 disables it).
    pub translate_max: usize,
    pub checkpoint_every: usize,
    pub sample_every: usize,
    /// Metric-eval cadence; the FVD/FID proxies are also always computed at
    /// step 0 and at the end.
    pub eval_every: usize,
    pub log_every: usize,
    /// Fake clips per metric evaluation during training.
    pub eval_num_fake: usize,
    pub eval_clip_len: usize,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            steps: 2000,
            batch: 4,
            seed: 1,
            lr: 2.5e-3,
            beta1: 0.0,
            beta2: 0.99,
            r1_gamma: 0.2,
            r1_half: true,
            r1_interval: 1,
            flip_prob: 0.5,
            translate_max: 0,
            checkpoint_every: 1000,
            sample_every: 500,
            eval_every: 500,
            log_every: 10,
            eval_num_fake: 64,
            eval_clip_len: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalCfg {
    pub clip_len: usize,
    pub num_fake: usize,
    pub offset_policy: OffsetPolicy,
    pub subsample_stride: usize,
    /// Use every non-overlapping clip of each real video instead of one.
    pub all_clips: bool,
    /// JPEG round-trip quality applied to fake frames before feature
    /// extraction; 0 disables.
    pub jpeg_quality: u8,
    pub seed: u64,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            clip_len: 16,
            num_fake: 256,
            offset_policy: OffsetPolicy::Random,
            subsample_stride: 1,
            all_clips: false,
            jpeg_quality: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    pub motion: MotionCfg,
    pub gen: GenCfg,
    pub disc: DiscCfg,
    pub sample: SampleCfg,
    pub train: TrainCfg,
    pub eval: EvalCfg,
}

const VALID_KEYS: &[&str] = &[
    "motion.spacing",
    "motion.omega_min",
    "motion.omega_max",
    "motion.dim",
    "motion.kernel_size",
    "motion.layers",
    "motion.representation",
    "gen.resolution",
    "gen.fmaps",
    "gen.w_dim",
    "gen.mapping_layers",
    "disc.fmaps",
    "disc.k",
    "disc.time_conditioning",
    "disc.d_pe",
    "sample.k",
    "sample.t_max",
    "sample.max_span",
    "train.steps",
    "train.batch",
    "train.seed",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.r1_gamma",
    "train.r1_half",
    "train.r1_interval",
    "train.flip_prob",
    "train.translate_max",
    "train.checkpoint_every",
    "train.sample_every",
    "train.eval_every",
    "train.log_every",
    "train.eval_num_fake",
    "train.eval_clip_len",
    "eval.clip_len",
    "eval.num_fake",
    "eval.offset_policy",
    "eval.subsample_stride",
    "eval.all_clips",
    "eval.jpeg_quality",
    "eval.seed",
];

fn parse_num<T: std::str::FromStr>(key: &str, val: &str) -> Result<T> {
    val.trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("cannot parse value `{val}` for key {key}")))
}

fn parse_bool(key: &str, val: &str) -> Result<bool> {
    match val.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!(
            "key {key} expects a boolean, got {other}"
        ))),
    }
}

impl Config {
    pub fn set(&mut self, key: &str, val: &str) -> Result<()> {
        match key {
            "motion.spacing" => self.motion.spacing = parse_num(key, val)?,
            "motion.omega_min" => self.motion.omega_min = parse_num(key, val)?,
            "motion.omega_max" => self.motion.omega_max = parse_num(key, val)?,
            "motion.dim" => self.motion.dim = parse_num(key, val)?,
            "motion.kernel_size" => self.motion.kernel_size = parse_num(key, val)?,
            "motion.layers" => self.motion.layers = parse_num(key, val)?,
            "motion.representation" => self.motion.representation = MotionRepr::parse(val.trim())?,
            "gen.resolution" => self.gen.resolution = parse_num(key, val)?,
            "gen.fmaps" => self.gen.fmaps = parse_num(key, val)?,
            "gen.w_dim" => self.gen.w_dim = parse_num(key, val)?,
            "gen.mapping_layers" => self.gen.mapping_layers = parse_num(key, val)?,
            "disc.fmaps" => self.disc.fmaps = parse_num(key, val)?,
            "disc.k" => self.disc.k = parse_num(key, val)?,
            "disc.time_conditioning" => self.disc.time_conditioning = parse_bool(key, val)?,
            "disc.d_pe" => self.disc.d_pe = parse_num(key, val)?,
            "sample.k" => self.sample.k = parse_num(key, val)?,
            "sample.t_max" => self.sample.t_max = parse_num(key, val)?,
            "sample.max_span" => self.sample.max_span = parse_num(key, val)?,
            "train.steps" => self.train.steps = parse_num(key, val)?,
            "train.batch" => self.train.batch = parse_num(key, val)?,
            "train.seed" => self.train.seed = parse_num(key, val)?,
            "train.lr" => self.train.lr = parse_num(key, val)?,
            "train.beta1" => self.train.beta1 = parse_num(key, val)?,
            "train.beta2" => self.train.beta2 = parse_num(key, val)?,
            "train.r1_gamma" => self.train.r1_gamma = parse_num(key, val)?,
            "train.r1_half" => self.train.r1_half = parse_bool(key, val)?,
            "train.r1_interval" => self.train.r1_interval = parse_num(key, val)?,
            "train.flip_prob" => self.train.flip_prob = parse_num(key, val)?,
            "train.translate_max" => self.train.translate_max = parse_num(key, val)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(key, val)?,
            "train.sample_every" => self.train.sample_every = parse_num(key, val)?,
            "train.eval_every" => self.train.eval_every = parse_num(key, val)?,
            "train.log_every" => self.train.log_every = parse_num(key, val)?,
            "train.eval_num_fake" => self.train.eval_num_fake = parse_num(key, val)?,
            "train.eval_clip_len" => self.train.eval_clip_len = parse_num(key, val)?,
            "eval.clip_len" => self.eval.clip_len = parse_num(key, val)?,
            "eval.num_fake" => self.eval.num_fake = parse_num(key, val)?,
            "eval.offset_policy" => self.eval.offset_policy = OffsetPolicy::parse(val.trim())?,
            "eval.subsample_stride" => self.eval.subsample_stride = parse_num(key, val)?,
            "eval.all_clips" => self.eval.all_clips = parse_bool(key, val)?,
            "eval.jpeg_quality" => self.eval.jpeg_quality = parse_num(key, val)?,
            "eval.seed" => self.eval.seed = parse_num(key, val)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}`; valid keys:\n  {}",
                    VALID_KEYS.join("\n  ")
                )))
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            cfg.set(key.trim(), val)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.motion.spacing <= 0.0 {
            return Err(Error::Config("motion.spacing must be positive".into()));
        }
        if self.motion.dim < 1 {
            return Err(Error::Config("motion.dim must be >= 1".into()));
        }
        if self.motion.omega_min <= 0.0 || self.motion.omega_max < self.motion.omega_min {
            return Err(Error::Config(
                "need 0 < motion.omega_min <= motion.omega_max".into(),
            ));
        }
        if self.motion.kernel_size < 1 || self.motion.layers < 1 {
            return Err(Error::Config(
                "motion.kernel_size and motion.layers must be >= 1".into(),
            ));
        }
        if !self.gen.resolution.is_power_of_two() || self.gen.resolution < 8 {
            return Err(Error::Config(
                "gen.resolution must be a power of two >= 8".into(),
            ));
        }
        if self.disc.k < 2 {
            return Err(Error::Config("disc.k must be >= 2".into()));
        }
        if self.disc.d_pe % 2 != 0 {
            return Err(Error::Config("disc.d_pe must be even".into()));
        }
        if self.sample.k < 2 {
            return Err(Error::Config("sample.k must be >= 2".into()));
        }
        if self.sample.max_span < self.sample.k - 1 || self.sample.max_span >= self.sample.t_max {
            return Err(Error::Config(
                "need sample.k - 1 <= sample.max_span < sample.t_max".into(),
            ));
        }
        if self.eval.subsample_stride < 1 {
            return Err(Error::Config("eval.subsample_stride must be >= 1".into()));
        }
        if self.eval.jpeg_quality > 100 {
            return Err(Error::Config("eval.jpeg_quality must be 0..=100".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it back yields an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "motion.spacing={}", self.motion.spacing);
        let _ = writeln!(s, "motion.omega_min={}", self.motion.omega_min);
        let _ = writeln!(s, "motion.omega_max={}", self.motion.omega_max);
        let _ = writeln!(s, "motion.dim={}", self.motion.dim);
        let _ = writeln!(s, "motion.kernel_size={}", self.motion.kernel_size);
        let _ = writeln!(s, "motion.layers={}", self.motion.layers);
        let _ = writeln!(
            s,
            "motion.representation={}",
            self.motion.representation.as_str()
        );
        let _ = writeln!(s, "gen.resolution={}", self.gen.resolution);
        let _ = writeln!(s, "gen.fmaps={}", self.gen.fmaps);
        let _ = writeln!(s, "gen.w_dim={}", self.gen.w_dim);
        let _ = writeln!(s, "gen.mapping_layers={}", self.gen.mapping_layers);
        let _ = writeln!(s, "disc.fmaps={}", self.disc.fmaps);
        let _ = writeln!(s, "disc.k={}", self.disc.k);
        let _ = writeln!(s, "disc.time_conditioning={}", self.disc.time_conditioning);
        let _ = writeln!(s, "disc.d_pe={}", self.disc.d_pe);
        let _ = writeln!(s, "sample.k={}", self.sample.k);
        let _ = writeln!(s, "sample.t_max={}", self.sample.t_max);
        let _ = writeln!(s, "sample.max_span={}", self.sample.max_span);
        let _ = writeln!(s, "train.steps={}", self.train.steps);
        let _ = writeln!(s, "train.batch={}", self.train.batch);
        let _ = writeln!(s, "train.seed={}", self.train.seed);
        let _ = writeln!(s, "train.lr={}", self.train.lr);
        let _ = writeln!(s, "train.beta1={}", self.train.beta1);
        let _ = writeln!(s, "train.beta2={}", self.train.beta2);
        let _ = writeln!(s, "train.r1_gamma={}", self.train.r1_gamma);
        let _ = writeln!(s, "train.r1_half={}", self.train.r1_half);
        let _ = writeln!(s, "train.r1_interval={}", self.train.r1_interval);
        let _ = writeln!(s, "train.flip_prob={}", self.train.flip_prob);
        let _ = writeln!(s, "train.translate_max={}", self.train.translate_max);
        let _ = writeln!(s, "train.checkpoint_every={}", self.train.checkpoint_every);
        let _ = writeln!(s, "train.sample_every={}", self.train.sample_every);
        let _ = writeln!(s, "train.eval_every={}", self.train.eval_every);
        let _ = writeln!(s, "train.log_every={}", self.train.log_every);
        let _ = writeln!(s, "train.eval_num_fake={}", self.train.eval_num_fake);
        let _ = writeln!(s, "train.eval_clip_len={}", self.train.eval_clip_len);
        let _ = writeln!(s, "eval.clip_len={}", self.eval.clip_len);
        let _ = writeln!(s, "eval.num_fake={}", self.eval.num_fake);
        let _ = writeln!(s, "eval.offset_policy={}", self.eval.offset_policy.as_str());
        let _ = writeln!(s, "eval.subsample_stride={}", self.eval.subsample_stride);
        let _ = writeln!(s, "eval.all_clips={}", self.eval.all_clips);
        let _ = writeln!(s, "eval.jpeg_quality={}", self.eval.jpeg_quality);
        let _ = writeln!(s, "eval.seed={}", self.eval.seed);
        s
    }

    /// Small configuration for fast tests and the toy training experiments.
    pub fn desk() -> Config {
        let mut cfg = Config::default();
        cfg.motion.dim = 16;
        cfg.gen.resolution = 32;
        cfg.gen.fmaps = 32;
        cfg.gen.w_dim = 32;
        cfg.disc.fmaps = 8;
        cfg.disc.d_pe = 32;
        cfg.sample.t_max = 64;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_canonical_text() {
        let mut cfg = Config::default();
        cfg.motion.dim = 24;
        cfg.eval.offset_policy = OffsetPolicy::First;
        cfg.disc.time_conditioning = false;
        let text = cfg.to_text();
        let back = Config::parse_str(&text).unwrap();
        assert_eq!(back.motion.dim, 24);
        assert_eq!(back.eval.offset_policy, OffsetPolicy::First);
        assert!(!back.disc.time_conditioning);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = Config::parse_str("motion.spcing=16\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown key"));
        assert!(msg.contains("motion.spacing"));
        assert!(msg.contains("eval.jpeg_quality"));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = Config::parse_str("# a comment\n\nmotion.dim=8\n").unwrap();
        assert_eq!(cfg.motion.dim, 8);
    }

    #[test]
    fn lstm_token_accepted() {
        let cfg = Config::parse_str("motion.representation=lstm-free-ablation-off\n").unwrap();
        assert_eq!(cfg.motion.representation, MotionRepr::Acyclic);
    }

    #[test]
    fn invalid_sampler_bounds_rejected() {
        let err = Config::parse_str("sample.max_span=2000\n").unwrap_err();
        assert!(err.to_string().contains("max_span"));
    }
}
