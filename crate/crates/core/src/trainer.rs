//! Adversarial training: non-saturating loss, R1 gradient penalty on real
//! inputs, video-consistent augmentation, Adam, checkpointing and metric
//! logging.
//!
//! One training step runs a discriminator update (real batch + fake batch,
//! R1 on the reals) followed by a generator update. All randomness flows
//! from two explicit ChaCha streams (data/augmentation and noise), so a
//! (seed, step) pair pins every number in the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Arr, Graph, Var};
use crate::checkpoint::{self, Entry};
use crate::config::Config;
use crate::data::{Dataset, VideoClip};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::evaluation;
use crate::generator::VideoGenerator;
use crate::nn::ParamStore;
use crate::rng::{derived, randn_vec};
use crate::sampler;

// ---- optimizer ---------------------------------------------------------------

/// Adam with bias correction; moments keyed by parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Arr>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(grad.raw_dim()));
            let param = store.get_mut(name);
            let (ms, vs, ps, gs) = (
                m.as_slice_memory_order_mut().unwrap(),
                v.as_slice_memory_order_mut().unwrap(),
                param.as_slice_memory_order_mut().unwrap(),
                grad.as_slice_memory_order().unwrap(),
            );
            for i in 0..gs.len() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gs[i];
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    fn pack(&self, entries: &mut BTreeMap<String, Entry>, prefix: &str) {
        entries.insert(
            format!("{prefix}.t"),
            Entry::Bytes(self.t.to_le_bytes().to_vec()),
        );
        for (name, m) in &self.m {
            entries.insert(format!("{prefix}.m.{name}"), Entry::Tensor(m.clone()));
        }
        for (name, v) in &self.v {
            entries.insert(format!("{prefix}.v.{name}"), Entry::Tensor(v.clone()));
        }
    }

    fn unpack(
        entries: &BTreeMap<String, Entry>,
        prefix: &str,
        lr: f64,
        beta1: f64,
        beta2: f64,
    ) -> Result<Self> {
        let mut opt = Adam::new(lr, beta1, beta2);
        if let Some(Entry::Bytes(b)) = entries.get(&format!("{prefix}.t")) {
            opt.t = u64::from_le_bytes(
                b.as_slice()
                    .try_into()
                    .map_err(|_| Error::Load("bad optimizer step".to_string()))?,
            );
        }
        for (name, entry) in entries {
            if let Some(short) = name.strip_prefix(&format!("{prefix}.m.")) {
                if let Entry::Tensor(t) = entry {
                    opt.m.insert(short.to_string(), t.clone());
                }
            } else if let Some(short) = name.strip_prefix(&format!("{prefix}.v.")) {
                if let Entry::Tensor(t) = entry {
                    opt.v.insert(short.to_string(), t.clone());
                }
            }
        }
        Ok(opt)
    }
}

// ---- video-consistent augmentation -------------------------------------------

/// One augmentation decision, shared by every frame of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugDraw {
    pub flip: bool,
    pub dx: isize,
    pub dy: isize,
}

pub fn sample_aug(flip_prob: f64, translate_max: usize, rng: &mut ChaCha12Rng) -> AugDraw {
    let flip = rng.gen_bool(flip_prob);
    let (dx, dy) = if translate_max > 0 {
        let m = translate_max as isize;
        (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
    } else {
        (0, 0)
    };
    AugDraw { flip, dx, dy }
}

fn shift_axis_value(frame: &Arr, axis: usize, by: isize) -> Arr {
    if by == 0 {
        return frame.clone();
    }
    let mut out = Arr::zeros(frame.raw_dim());
    let n = frame.shape()[axis] as isize;
    for c in 0..frame.shape()[0] {
        for y in 0..frame.shape()[1] {
            for x in 0..frame.shape()[2] {
                let mut idx = [c as isize, y as isize, x as isize];
                idx[axis] -= by;
                if idx[axis] < 0 || idx[axis] >= n {
                    continue;
                }
                out[[c, y, x]] = frame[[idx[0] as usize, idx[1] as usize, idx[2] as usize]];
            }
        }
    }
    out
}

/// Apply a draw to one frame (zero fill outside the shifted support).
pub fn apply_aug_value(frame: &Arr, draw: AugDraw) -> Arr {
    let mut f = if draw.flip {
        let w = frame.shape()[2];
        let mut out = Arr::zeros(frame.raw_dim());
        for c in 0..3 {
            for y in 0..frame.shape()[1] {
                for x in 0..w {
                    out[[c, y, x]] = frame[[c, y, w - 1 - x]];
                }
            }
        }
        out
    } else {
        frame.clone()
    };
    if draw.dx != 0 {
        f = shift_axis_value(&f, 2, draw.dx);
    }
    if draw.dy != 0 {
        f = shift_axis_value(&f, 1, draw.dy);
    }
    f
}

/// In-graph version of `apply_aug_value` (flip and shift are linear, so
/// gradients flow through augmented fakes back into the generator).
pub fn apply_aug_graph(g: &mut Graph, frame: Var, draw: AugDraw) -> Var {
    let mut f = if draw.flip { g.flip_w(frame) } else { frame };
    for (axis, by) in [(2usize, draw.dx), (1usize, draw.dy)] {
        if by == 0 {
            continue;
        }
        let n = g.arr(f).shape()[axis];
        let (before, after) = if by > 0 {
            (by as usize, 0)
        } else {
            (0, (-by) as usize)
        };
        let padded = g.pad_zero(f, axis, before, after);
        let start = after;
        f = g.slice_axis(padded, axis, start, start + n);
    }
    f
}

/// One draw per clip, applied identically to all frames.
pub fn augment_video_consistent(
    frames: &[Arr],
    flip_prob: f64,
    translate_max: usize,
    rng: &mut ChaCha12Rng,
) -> (Vec<Arr>, AugDraw) {
    let draw = sample_aug(flip_prob, translate_max, rng);
    (
        frames.iter().map(|f| apply_aug_value(f, draw)).collect(),
        draw,
    )
}

// ---- losses -------------------------------------------------------------------

pub struct DLossParts {
    pub adv: f64,
    pub r1: f64,
    pub total: f64,
}

/// Value-level discriminator loss on one real and one fake clip:
/// softplus(-D(real)) + softplus(D(fake)) plus the R1 penalty on the real
/// input pixels.
pub fn d_loss_value(
    disc: &Discriminator,
    d_store: &ParamStore,
    real: &VideoClip,
    fake: &VideoClip,
    r1_gamma: f64,
    r1_half: bool,
) -> Result<DLossParts> {
    let mut g = Graph::new();
    let p = d_store.bind(&mut g);
    let real_vars: Vec<Var> = real.frames.iter().map(|f| g.leaf(f.clone())).collect();
    let fake_vars: Vec<Var> = fake.frames.iter().map(|f| g.leaf(f.clone())).collect();
    let y_real = disc.discriminate(&mut g, &p, &real_vars, &real.deltas())?;
    let y_fake = disc.discriminate(&mut g, &p, &fake_vars, &fake.deltas())?;

    let neg_real = g.neg(y_real);
    let l_real = g.softplus(neg_real);
    let l_fake = g.softplus(y_fake);
    let adv = g.add(l_real, l_fake);

    let grads = g.backward(y_real, &real_vars);
    let mut r1 = g.scalar(0.0);
    for gv in grads {
        let sq = g.mul(gv, gv);
        let s = g.sum_all(sq);
        r1 = g.add(r1, s);
    }
    let coeff = if r1_half { r1_gamma / 2.0 } else { r1_gamma };
    let r1_term = g.mul_scalar(r1, coeff);
    let total = g.add(adv, r1_term);
    let parts = DLossParts {
        adv: g.scalar_value(adv),
        r1: g.scalar_value(r1_term),
        total: g.scalar_value(total),
    };
    if !parts.total.is_finite() {
        return Err(Error::Divergence(format!(
            "NaN in discriminator loss (adv {}, r1 {})",
            parts.adv, parts.r1
        )));
    }
    Ok(parts)
}

/// Value-level generator loss softplus(-D(fake)).
pub fn g_loss_value(disc: &Discriminator, d_store: &ParamStore, fake: &VideoClip) -> Result<f64> {
    let mut g = Graph::new();
    let p = d_store.bind(&mut g);
    let fake_vars: Vec<Var> = fake.frames.iter().map(|f| g.leaf(f.clone())).collect();
    let y = disc.discriminate(&mut g, &p, &fake_vars, &fake.deltas())?;
    let ny = g.neg(y);
    let l = g.softplus(ny);
    let v = g.scalar_value(l);
    if !v.is_finite() {
        return Err(Error::Divergence("NaN in generator loss".to_string()));
    }
    Ok(v)
}

// ---- trainer -------------------------------------------------------------------

pub struct Trainer {
    pub cfg: Config,
    pub vg: VideoGenerator,
    pub disc: Discriminator,
    pub g_store: ParamStore,
    pub d_store: ParamStore,
    opt_g: Adam,
    opt_d: Adam,
    pub step: usize,
    rng_data: ChaCha12Rng,
    rng_noise: ChaCha12Rng,
}

pub struct StepStats {
    pub d_loss: f64,
    pub g_loss: f64,
    pub r1: f64,
}

pub struct TrainSummary {
    pub steps: usize,
    pub fvd_init: f64,
    pub fvd_final: f64,
    pub fid_final: f64,
    pub real_frames_seen: usize,
    pub steps_per_sec: f64,
}

fn pack_rng(rng: &ChaCha12Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(56);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn unpack_rng(bytes: &[u8]) -> Result<ChaCha12Rng> {
    if bytes.len() != 56 {
        return Err(Error::Load("bad rng state length".to_string()));
    }
    let seed: [u8; 32] = bytes[0..32].try_into().unwrap();
    let stream = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
    let word_pos = u128::from_le_bytes(bytes[40..56].try_into().unwrap());
    let mut rng = <ChaCha12Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        if cfg.disc.k != cfg.sample.k {
            return Err(Error::Config(format!(
                "disc.k = {} must equal sample.k = {}",
                cfg.disc.k, cfg.sample.k
            )));
        }
        let vg = VideoGenerator::new(cfg);
        let disc = Discriminator::new(&cfg.disc, cfg.gen.resolution);
        let mut g_store = ParamStore::new();
        let mut d_store = ParamStore::new();
        vg.init(&mut g_store, &mut derived(cfg.train.seed, 10));
        disc.init(&mut d_store, &mut derived(cfg.train.seed, 11));
        Ok(Trainer {
            opt_g: Adam::new(cfg.train.lr, cfg.train.beta1, cfg.train.beta2),
            opt_d: Adam::new(cfg.train.lr, cfg.train.beta1, cfg.train.beta2),
            vg,
            disc,
            g_store,
            d_store,
            step: 0,
            rng_data: derived(cfg.train.seed, 1),
            rng_noise: derived(cfg.train.seed, 2),
            cfg: cfg.clone(),
        })
    }

    /// Serialize weights, optimizer moments, rng streams, step counter and
    /// the resolved config.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut entries = BTreeMap::new();
        checkpoint::pack_store(&mut entries, "G", &self.g_store);
        checkpoint::pack_store(&mut entries, "D", &self.d_store);
        self.opt_g.pack(&mut entries, "optG");
        self.opt_d.pack(&mut entries, "optD");
        entries.insert(
            "state.step".to_string(),
            Entry::Bytes((self.step as u64).to_le_bytes().to_vec()),
        );
        entries.insert(
            "state.rng_data".to_string(),
            Entry::Bytes(pack_rng(&self.rng_data)),
        );
        entries.insert(
            "state.rng_noise".to_string(),
            Entry::Bytes(pack_rng(&self.rng_noise)),
        );
        entries.insert(
            "state.config".to_string(),
            Entry::Bytes(self.cfg.to_text().into_bytes()),
        );
        checkpoint::save(path, &entries)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        let cfg_text = match entries.get("state.config") {
            Some(Entry::Bytes(b)) => String::from_utf8(b.clone())
                .map_err(|_| Error::Load("bad config text".to_string()))?,
            _ => return Err(Error::Load("checkpoint missing state.config".to_string())),
        };
        let cfg = Config::parse_str(&cfg_text)?;
        let g_store = checkpoint::unpack_store(&entries, "G")?;
        let d_store = checkpoint::unpack_store(&entries, "D")?;
        let opt_g = Adam::unpack(
            &entries,
            "optG",
            cfg.train.lr,
            cfg.train.beta1,
            cfg.train.beta2,
        )?;
        let opt_d = Adam::unpack(
            &entries,
            "optD",
            cfg.train.lr,
            cfg.train.beta1,
            cfg.train.beta2,
        )?;
        let step = match entries.get("state.step") {
            Some(Entry::Bytes(b)) => u64::from_le_bytes(
                b.as_slice()
                    .try_into()
                    .map_err(|_| Error::Load("bad step".to_string()))?,
            ) as usize,
            _ => 0,
        };
        let rng_data = match entries.get("state.rng_data") {
            Some(Entry::Bytes(b)) => unpack_rng(b)?,
            _ => return Err(Error::Load("checkpoint missing rng state".to_string())),
        };
        let rng_noise = match entries.get("state.rng_noise") {
            Some(Entry::Bytes(b)) => unpack_rng(b)?,
            _ => return Err(Error::Load("checkpoint missing rng state".to_string())),
        };
        let vg = VideoGenerator::new(&cfg);
        let disc = Discriminator::new(&cfg.disc, cfg.gen.resolution);
        Ok(Trainer {
            vg,
            disc,
            g_store,
            d_store,
            opt_g,
            opt_d,
            step,
            rng_data,
            rng_noise,
            cfg,
        })
    }

    /// Generator weights only (the `generate`/`eval` entry point).
    pub fn save_generator(&self, path: &Path) -> Result<()> {
        let mut entries = BTreeMap::new();
        checkpoint::pack_store(&mut entries, "G", &self.g_store);
        entries.insert(
            "state.config".to_string(),
            Entry::Bytes(self.cfg.to_text().into_bytes()),
        );
        checkpoint::save(path, &entries)
    }

    fn sample_fake_spec(&mut self) -> Result<(Vec<f64>, u64, Vec<usize>)> {
        let set = sampler::sample_timestamps(&self.cfg.sample, &mut self.rng_noise)?;
        let grid_seed: u64 = self.rng_noise.gen();
        let z = randn_vec(&mut self.rng_noise, self.cfg.gen.w_dim);
        Ok((z, grid_seed, set.ts))
    }

    /// Generate a fake clip with the current generator (no gradients kept).
    fn make_fake_clip(&mut self) -> Result<VideoClip> {
        let (z, grid_seed, ts) = self.sample_fake_spec()?;
        let t_max = *ts.last().unwrap() as f64;
        let grid = self.vg.motion.sample_grid(grid_seed, t_max)?;
        let tsf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let frames = self.vg.generate_video(&self.g_store, &z, &grid, &tsf)?;
        Ok(VideoClip {
            frames,
            timestamps: ts,
            video: None,
        })
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepStats> {
        let batch = self.cfg.train.batch;
        let k = self.cfg.sample.k;
        let flip_p = self.cfg.train.flip_prob;
        let tmax = self.cfg.train.translate_max;
        let apply_r1 = self.cfg.train.r1_interval > 0
            && self.step % self.cfg.train.r1_interval == 0
            && self.cfg.train.r1_gamma > 0.0;

        // ---- D step
        let mut real_clips = Vec::with_capacity(batch);
        for _ in 0..batch {
            let clip = sampler::sample_real_clip(dataset, &self.cfg.sample, &mut self.rng_data)?;
            let (frames, _) =
                augment_video_consistent(&clip.frames, flip_p, tmax, &mut self.rng_data);
            real_clips.push(VideoClip { frames, ..clip });
        }
        let mut fake_clips = Vec::with_capacity(batch);
        for _ in 0..batch {
            let clip = self.make_fake_clip()?;
            let (frames, _) =
                augment_video_consistent(&clip.frames, flip_p, tmax, &mut self.rng_data);
            fake_clips.push(VideoClip { frames, ..clip });
        }

        let (d_loss, r1_value) = {
            let g = &mut Graph::new();
            let p = self.d_store.bind(g);
            let mut real_frame_vars: Vec<Var> = Vec::with_capacity(batch * k);
            let mut sum_real_logits = g.scalar(0.0);
            let mut adv = g.scalar(0.0);
            for clip in &real_clips {
                let vars: Vec<Var> = clip.frames.iter().map(|f| g.leaf(f.clone())).collect();
                let y = self.disc.discriminate(g, &p, &vars, &clip.deltas())?;
                sum_real_logits = g.add(sum_real_logits, y);
                let ny = g.neg(y);
                let l = g.softplus(ny);
                adv = g.add(adv, l);
                real_frame_vars.extend(vars);
            }
            for clip in &fake_clips {
                let vars: Vec<Var> = clip.frames.iter().map(|f| g.leaf(f.clone())).collect();
                let y = self.disc.discriminate(g, &p, &vars, &clip.deltas())?;
                let l = g.softplus(y);
                adv = g.add(adv, l);
            }
            let adv_mean = g.mul_scalar(adv, 1.0 / batch as f64);

            let mut total = adv_mean;
            let mut r1_scalar = 0.0;
            if apply_r1 {
                // one backward over the summed real logits yields all
                // per-clip input gradients at once (clips are independent)
                let grads = g.backward(sum_real_logits, &real_frame_vars);
                let mut r1 = g.scalar(0.0);
                for gv in grads {
                    let sq = g.mul(gv, gv);
                    let s = g.sum_all(sq);
                    r1 = g.add(r1, s);
                }
                let r1_mean = g.mul_scalar(r1, 1.0 / batch as f64);
                let coeff = if self.cfg.train.r1_half {
                    self.cfg.train.r1_gamma / 2.0
                } else {
                    self.cfg.train.r1_gamma
                };
                let r1_term = g.mul_scalar(r1_mean, coeff);
                r1_scalar = g.scalar_value(r1_term);
                total = g.add(total, r1_term);
            }

            let loss = g.scalar_value(total);
            self.check_finite(loss, "discriminator")?;
            let order = p.vars_in_order();
            let wrt: Vec<Var> = order.iter().map(|(_, v)| *v).collect();
            let grads = g.backward(total, &wrt);
            let mut grad_map = BTreeMap::new();
            for ((name, _), gv) in order.iter().zip(grads) {
                grad_map.insert(name.clone(), g.arr(gv).clone());
            }
            self.opt_d.step(&mut self.d_store, &grad_map);
            (loss, r1_scalar)
        };

        // ---- G step
        let g_loss = {
            let mut specs = Vec::with_capacity(batch);
            for _ in 0..batch {
                specs.push(self.sample_fake_spec()?);
            }
            let draws: Vec<AugDraw> = (0..batch)
                .map(|_| sample_aug(flip_p, tmax, &mut self.rng_data))
                .collect();

            let g = &mut Graph::new();
            let pg = self.g_store.bind(g);
            let pd = self.d_store.bind(g);
            let mut loss = g.scalar(0.0);
            for ((z, grid_seed, ts), draw) in specs.into_iter().zip(draws) {
                let t_last = *ts.last().unwrap() as f64;
                let grid = self.vg.motion.sample_grid(grid_seed, t_last)?;
                let tsf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
                let zv = g.leaf(Arr::from_shape_vec(IxDyn(&[z.len()]), z).unwrap());
                let video = self.vg.generate_graph(g, &pg, zv, &grid, &tsf)?;
                let frames: Vec<Var> = video
                    .frames
                    .iter()
                    .map(|f| apply_aug_graph(g, *f, draw))
                    .collect();
                let deltas: Vec<f64> = ts.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
                let y = self.disc.discriminate(g, &pd, &frames, &deltas)?;
                let ny = g.neg(y);
                let l = g.softplus(ny);
                loss = g.add(loss, l);
            }
            let loss_mean = g.mul_scalar(loss, 1.0 / batch as f64);
            let loss_value = g.scalar_value(loss_mean);
            self.check_finite(loss_value, "generator")?;
            let order = pg.vars_in_order();
            let wrt: Vec<Var> = order.iter().map(|(_, v)| *v).collect();
            let grads = g.backward(loss_mean, &wrt);
            let mut grad_map = BTreeMap::new();
            for ((name, _), gv) in order.iter().zip(grads) {
                grad_map.insert(name.clone(), g.arr(gv).clone());
            }
            self.opt_g.step(&mut self.g_store, &grad_map);
            loss_value
        };

        self.step += 1;
        Ok(StepStats {
            d_loss,
            g_loss,
            r1: r1_value,
        })
    }

    fn check_finite(&self, loss: f64, which: &str) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "NaN/inf in {which} loss at step {}",
                self.step
            )));
        }
        if loss.abs() > 1e3 {
            return Err(Error::Divergence(format!(
                "{which} loss {loss} exceeded 1e3 at step {}",
                self.step
            )));
        }
        Ok(())
    }

    /// FVD/FID proxies of the current generator against the dataset.
    pub fn eval_proxies(&self, dataset: &Dataset, eval_seed: u64) -> Result<(f64, f64)> {
        let mut ecfg = self.cfg.eval.clone();
        ecfg.num_fake = self.cfg.train.eval_num_fake;
        ecfg.clip_len = self.cfg.train.eval_clip_len;
        ecfg.seed = eval_seed;
        let ts: Vec<f64> = (0..ecfg.clip_len).map(|t| t as f64).collect();
        let t_max = *ts.last().unwrap();
        let make = |i: usize| -> Result<Vec<Arr>> {
            let mut rng = derived(eval_seed, 40_000 + i as u64);
            let z = randn_vec(&mut rng, self.cfg.gen.w_dim);
            let grid_seed: u64 = rng.gen();
            let grid = self.vg.motion.sample_grid(grid_seed, t_max)?;
            self.vg.generate_video(&self.g_store, &z, &grid, &ts)
        };
        let fvd = evaluation::compute_fvd(dataset, &ecfg, &mut |i| make(i))?.score;
        let fid = evaluation::compute_fid_from_videos(dataset, &ecfg, &mut |i| make(i))?.score;
        Ok((fvd, fid))
    }

    /// Render a small grid of generated frames for visual inspection.
    pub fn sample_grid_image(&self, path: &Path) -> Result<()> {
        let res = self.cfg.gen.resolution;
        let rows = 2usize;
        let cols = 4usize;
        let mut canvas = image::RgbImage::new((cols * res) as u32, (rows * res) as u32);
        for r in 0..rows {
            let mut rng = derived(0xD15P1A1, (self.step * rows + r) as u64);
            let z = randn_vec(&mut rng, self.cfg.gen.w_dim);
            let grid_seed: u64 = rng.gen();
            let ts: Vec<f64> = (0..cols).map(|c| c as f64 * 4.0).collect();
            let grid = self.vg.motion.sample_grid(grid_seed, ts[cols - 1])?;
            let frames = self.vg.generate_video(&self.g_store, &z, &grid, &ts)?;
            for (c, frame) in frames.iter().enumerate() {
                let img = crate::data::frame_to_image(frame);
                for y in 0..res {
                    for x in 0..res {
                        canvas.put_pixel(
                            (c * res + x) as u32,
                            (r * res + y) as u32,
                            *img.get_pixel(x as u32, y as u32),
                        );
                    }
                }
            }
        }
        canvas.save(path)?;
        Ok(())
    }
}

/// Full training run with logging, checkpoints and metric evaluation.
pub fn train(cfg: &Config, dataset: &Dataset, out: &Path) -> Result<TrainSummary> {
    if dataset.num_videos() == 0 {
        return Err(Error::invalid("dataset is empty"));
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;

    let mut trainer = Trainer::new(cfg)?;
    run_loop(&mut trainer, dataset, out)
}

/// Continue a checkpointed run.
pub fn resume(ckpt: &Path, dataset: &Dataset, out: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out)?;
    let mut trainer = Trainer::load_checkpoint(ckpt)?;
    std::fs::write(out.join("config.txt"), trainer.cfg.to_text())?;
    run_loop(&mut trainer, dataset, out)
}

fn run_loop(trainer: &mut Trainer, dataset: &Dataset, out: &Path) -> Result<TrainSummary> {
    let cfg = trainer.cfg.clone();
    let mut log = String::from("step,d_loss,g_loss,r1,fvd_proxy,fid_proxy\n");
    let t0 = std::time::Instant::now();

    let (mut fvd, mut fid) = trainer.eval_proxies(dataset, cfg.eval.seed)?;
    let fvd_init = fvd;
    eprintln!("step {}: fvd_proxy {fvd:.4} fid_proxy {fid:.4}", trainer.step);

    let start_step = trainer.step;
    while trainer.step < cfg.train.steps {
        let stats = match trainer.train_step(dataset) {
            Ok(s) => s,
            Err(e) => {
                // keep the wreckage inspectable
                let _ = trainer.save_checkpoint(&out.join("ckpt_abort.svck"));
                let _ = std::fs::write(out.join("metrics.csv"), &log);
                return Err(e);
            }
        };
        let step = trainer.step;
        if step % cfg.train.eval_every == 0 || step == cfg.train.steps {
            let pair = trainer.eval_proxies(dataset, cfg.eval.seed)?;
            fvd = pair.0;
            fid = pair.1;
        }
        if step % cfg.train.log_every == 0 || step == cfg.train.steps {
            let _ = writeln!(
                log,
                "{step},{:.6},{:.6},{:.6},{:.6},{:.6}",
                stats.d_loss, stats.g_loss, stats.r1, fvd, fid
            );
        }
        if step % cfg.train.sample_every == 0 {
            trainer.sample_grid_image(&out.join(format!("samples_{step:06}.png")))?;
        }
        if step % cfg.train.checkpoint_every == 0 || step == cfg.train.steps {
            trainer.save_checkpoint(&out.join(format!("ckpt_{step:06}.svck")))?;
            trainer.save_checkpoint(&out.join("ckpt_latest.svck"))?;
        }
        if step % (cfg.train.log_every * 10) == 0 {
            let elapsed = t0.elapsed().as_secs_f64();
            let sps = (step - start_step) as f64 / elapsed.max(1e-9);
            let frames_seen = step * cfg.train.batch * cfg.sample.k;
            eprintln!(
                "step {step}: d {:.4} g {:.4} r1 {:.4} | {:.2} steps/s | {frames_seen} real frames seen by D",
                stats.d_loss, stats.g_loss, stats.r1, sps
            );
        }
    }

    let pair = trainer.eval_proxies(dataset, cfg.eval.seed)?;
    fvd = pair.0;
    fid = pair.1;
    trainer.save_checkpoint(&out.join("ckpt_latest.svck"))?;
    std::fs::write(out.join("metrics.csv"), &log)?;

    let elapsed = t0.elapsed().as_secs_f64();
    let steps_done = trainer.step - start_step;
    Ok(TrainSummary {
        steps: trainer.step,
        fvd_init,
        fvd_final: fvd,
        fid_final: fid,
        real_frames_seen: trainer.step * cfg.train.batch * cfg.sample.k,
        steps_per_sec: steps_done as f64 / elapsed.max(1e-9),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::rng::{randn, seeded};

    fn toy_config() -> Config {
        let mut cfg = Config::desk();
        cfg.motion.dim = 8;
        cfg.motion.kernel_size = 3;
        cfg.gen.resolution = 32;
        cfg.gen.fmaps = 8;
        cfg.gen.w_dim = 8;
        cfg.disc.fmaps = 4;
        cfg.disc.d_pe = 8;
        cfg.sample.t_max = 40;
        cfg.train.batch = 2;
        cfg.train.eval_num_fake = 4;
        cfg
    }

    fn toy_dataset() -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        make_synthetic(SyntheticKind::BouncingBall, 2, 40, 32, 3, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        (dir, ds)
    }

    fn random_clip(res: usize, k: usize, seed: u64) -> VideoClip {
        let frames: Vec<Arr> = (0..k).map(|i| randn(&mut seeded(seed + i as u64), &[3, res, res])).collect();
        VideoClip {
            frames,
            timestamps: (0..k).map(|i| i * 3).collect(),
            video: None,
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Arr::from_elem(IxDyn(&[2]), 5.0));
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..500 {
            let x = store.get("x").clone();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), &x * 2.0);
            opt.step(&mut store, &grads);
        }
        assert!(store.get("x").iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn flip_twice_is_identity_and_consistent_across_frames() {
        let frames: Vec<Arr> = (0..3).map(|i| randn(&mut seeded(40 + i), &[3, 8, 8])).collect();
        let draw = AugDraw {
            flip: true,
            dx: 0,
            dy: 0,
        };
        let once: Vec<Arr> = frames.iter().map(|f| apply_aug_value(f, draw)).collect();
        let twice: Vec<Arr> = once.iter().map(|f| apply_aug_value(f, draw)).collect();
        for (a, b) in frames.iter().zip(&twice) {
            assert_eq!(a, b);
        }

        // translation: identical per-frame difference pattern
        let draw = AugDraw {
            flip: false,
            dx: 2,
            dy: -1,
        };
        let shifted: Vec<Arr> = frames.iter().map(|f| apply_aug_value(f, draw)).collect();
        for (f, s) in frames.iter().zip(&shifted) {
            // content moved by (dx, dy): check a probe pixel
            for y in 2..7 {
                for x in 2..6 {
                    assert_eq!(s[[0, y, x]], f[[0, y + 1, x - 2]]);
                }
            }
            let _ = s;
        }
    }

    #[test]
    fn flip_rate_matches_probability() {
        let mut rng = seeded(7);
        let n = 10_000;
        let mut flips = 0usize;
        for _ in 0..n {
            if sample_aug(0.5, 0, &mut rng).flip {
                flips += 1;
            }
        }
        // binomial(10^4, 0.5): mean 5000, sd 50; allow 4 sigma
        assert!(
            (flips as f64 - 5000.0).abs() < 200.0,
            "flip count {flips} too far from 5000"
        );
    }

    #[test]
    fn graph_aug_matches_value_aug() {
        let frame = randn(&mut seeded(50), &[3, 8, 8]);
        for draw in [
            AugDraw { flip: true, dx: 0, dy: 0 },
            AugDraw { flip: false, dx: 2, dy: -1 },
            AugDraw { flip: true, dx: -1, dy: 2 },
        ] {
            let direct = apply_aug_value(&frame, draw);
            let mut g = Graph::new();
            let v = g.leaf(frame.clone());
            let out = apply_aug_graph(&mut g, v, draw);
            assert_eq!(*g.arr(out), direct, "{draw:?}");
        }
    }

    #[test]
    fn zero_discriminator_gives_2ln2_and_ln2() {
        let cfg = toy_config();
        let disc = Discriminator::new(&cfg.disc, cfg.gen.resolution);
        let mut store = ParamStore::new();
        disc.init(&mut store, &mut seeded(1));
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            let shape = store.get(&name).shape().to_vec();
            *store.get_mut(&name) = Arr::zeros(IxDyn(&shape));
        }
        let real = random_clip(32, 3, 60);
        let fake = random_clip(32, 3, 70);
        let parts = d_loss_value(&disc, &store, &real, &fake, 0.2, true).unwrap();
        assert!((parts.adv - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(parts.r1, 0.0);

        let gl = g_loss_value(&disc, &store, &fake).unwrap();
        assert!((gl - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn r1_term_is_gamma_half_times_gradient_norm() {
        let cfg = toy_config();
        let disc = Discriminator::new(&cfg.disc, cfg.gen.resolution);
        let mut store = ParamStore::new();
        disc.init(&mut store, &mut seeded(2));
        let real = random_clip(32, 3, 80);
        let fake = random_clip(32, 3, 90);

        // measure the squared pixel-gradient norm independently
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let vars: Vec<Var> = real.frames.iter().map(|f| g.leaf(f.clone())).collect();
        let y = disc.discriminate(&mut g, &p, &vars, &real.deltas()).unwrap();
        let grads = g.backward(y, &vars);
        let norm2: f64 = grads
            .iter()
            .map(|gv| g.arr(*gv).iter().map(|x| x * x).sum::<f64>())
            .sum();

        let parts = d_loss_value(&disc, &store, &real, &fake, 0.2, true).unwrap();
        assert!(
            (parts.r1 - 0.1 * norm2).abs() < 1e-9 * norm2.max(1.0),
            "r1 {} vs 0.1*||grad||^2 {}",
            parts.r1,
            0.1 * norm2
        );
        assert!(parts.r1 >= 0.0);

        // gamma convention switch
        let parts_full = d_loss_value(&disc, &store, &real, &fake, 0.2, false).unwrap();
        assert!((parts_full.r1 - 2.0 * parts.r1).abs() < 1e-12 * norm2.max(1.0));
    }

    /// d(d_loss)/d(theta) including the R1 double-backward term matches
    /// finite differences.
    #[test]
    fn d_loss_weight_gradients_match_finite_differences() {
        let mut cfg = toy_config();
        cfg.gen.resolution = 8;
        let disc = Discriminator::new(&cfg.disc, 8);
        let mut store = ParamStore::new();
        disc.init(&mut store, &mut seeded(3));
        let real = random_clip(8, 3, 100);
        let fake = random_clip(8, 3, 110);

        let loss = |st: &ParamStore| -> f64 {
            d_loss_value(&disc, st, &real, &fake, 0.2, true).unwrap().total
        };

        // analytic: replicate the training-step graph
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let real_vars: Vec<Var> = real.frames.iter().map(|f| g.leaf(f.clone())).collect();
        let fake_vars: Vec<Var> = fake.frames.iter().map(|f| g.leaf(f.clone())).collect();
        let y_real = disc.discriminate(&mut g, &p, &real_vars, &real.deltas()).unwrap();
        let y_fake = disc.discriminate(&mut g, &p, &fake_vars, &fake.deltas()).unwrap();
        let nr = g.neg(y_real);
        let lr_ = g.softplus(nr);
        let lf = g.softplus(y_fake);
        let adv = g.add(lr_, lf);
        let grads_x = g.backward(y_real, &real_vars);
        let mut r1 = g.scalar(0.0);
        for gv in grads_x {
            let sq = g.mul(gv, gv);
            let s = g.sum_all(sq);
            r1 = g.add(r1, s);
        }
        let r1t = g.mul_scalar(r1, 0.1);
        let total = g.add(adv, r1t);
        let order = p.vars_in_order();
        let wrt: Vec<Var> = order.iter().map(|(_, v)| *v).collect();
        let grads = g.backward(total, &wrt);

        let eps = 1e-5;
        for ((name, _), gv) in order.iter().zip(&grads) {
            let analytic = g.arr(*gv).clone();
            let len = analytic.len();
            // probe a few entries per tensor
            for i in (0..len).step_by((len / 3).max(1)) {
                let mut sp = store.clone();
                sp.get_mut(name).as_slice_memory_order_mut().unwrap()[i] += eps;
                let mut sm = store.clone();
                sm.get_mut(name).as_slice_memory_order_mut().unwrap()[i] -= eps;
                let num = (loss(&sp) - loss(&sm)) / (2.0 * eps);
                let a = analytic.as_slice_memory_order().unwrap()[i];
                let denom = a.abs().max(num.abs()).max(1e-2);
                assert!(
                    (a - num).abs() / denom < 1e-4,
                    "{name}[{i}]: analytic {a} vs numeric {num}"
                );
            }
        }
    }

    /// Toy 4-parameter generator: finite-difference check of the
    /// generator loss gradient through the discriminator.
    #[test]
    fn g_loss_gradient_on_four_parameter_toy() {
        let cfg = toy_config();
        let disc = Discriminator::new(&cfg.disc, 8);
        let mut store = ParamStore::new();
        disc.init(&mut store, &mut seeded(4));

        let patterns: Vec<Arr> = (0..4).map(|i| randn(&mut seeded(200 + i), &[3, 8, 8])).collect();
        let theta0 = [0.3, -0.2, 0.15, 0.4];
        let deltas = [2.0, 3.0];

        let loss_of = |theta: &[f64]| -> f64 {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let frames: Vec<Var> = (0..3)
                .map(|fi| {
                    let mut acc = g.zeros(&[3, 8, 8]);
                    for (t, pat) in theta.iter().zip(&patterns) {
                        let pv = g.leaf(pat.clone());
                        let scaled = g.mul_scalar(pv, *t * (fi + 1) as f64);
                        acc = g.add(acc, scaled);
                    }
                    g.tanh(acc)
                })
                .collect();
            let y = disc.discriminate(&mut g, &p, &frames, &deltas).unwrap();
            let ny = g.neg(y);
            let l = g.softplus(ny);
            g.scalar_value(l)
        };

        // analytic via theta as leaves
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let theta_vars: Vec<Var> = theta0
            .iter()
            .map(|t| g.leaf(Arr::from_elem(IxDyn(&[]), *t)))
            .collect();
        let frames: Vec<Var> = (0..3)
            .map(|fi| {
                let mut acc = g.zeros(&[3, 8, 8]);
                for (tv, pat) in theta_vars.iter().zip(&patterns) {
                    let pv = g.leaf(pat.clone());
                    let t3 = g.broadcast_to(*tv, &[3, 8, 8]);
                    let tp = g.mul(t3, pv);
                    let scaled = g.mul_scalar(tp, (fi + 1) as f64);
                    acc = g.add(acc, scaled);
                }
                g.tanh(acc)
            })
            .collect();
        let y = disc.discriminate(&mut g, &p, &frames, &deltas).unwrap();
        let ny = g.neg(y);
        let l = g.softplus(ny);
        let grads = g.backward(l, &theta_vars);

        let eps = 1e-6;
        for i in 0..4 {
            let mut tp = theta0;
            tp[i] += eps;
            let mut tm = theta0;
            tm[i] -= eps;
            let num = (loss_of(&tp) - loss_of(&tm)) / (2.0 * eps);
            let a = g.scalar_value(grads[i]);
            let denom = a.abs().max(num.abs()).max(1e-3);
            assert!(
                (a - num).abs() / denom < 1e-4,
                "theta[{i}]: analytic {a} vs numeric {num}"
            );
        }
    }

    #[test]
    fn optimizers_own_disjoint_parameters() {
        let cfg = toy_config();
        let trainer = Trainer::new(&cfg).unwrap();
        let g_names: std::collections::BTreeSet<String> =
            trainer.g_store.names().map(String::from).collect();
        let d_names: std::collections::BTreeSet<String> =
            trainer.d_store.names().map(String::from).collect();
        assert!(g_names.is_disjoint(&d_names));
        assert!(!g_names.is_empty() && !d_names.is_empty());
    }

    #[test]
    fn training_steps_run_and_are_deterministic() {
        let cfg = toy_config();
        let (_tmp, ds) = toy_dataset();
        let run = || -> Vec<(f64, f64)> {
            let mut t = Trainer::new(&cfg).unwrap();
            (0..4)
                .map(|_| {
                    let s = t.train_step(&ds).unwrap();
                    (s.d_loss, s.g_loss)
                })
                .collect()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed must reproduce losses bit-exactly");
        assert!(a.iter().all(|(d, g)| d.is_finite() && g.is_finite()));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let cfg = toy_config();
        let (_tmp, ds) = toy_dataset();
        let dir = tempfile::tempdir().unwrap();

        // uninterrupted: 6 steps
        let mut full = Trainer::new(&cfg).unwrap();
        let mut full_losses = Vec::new();
        for _ in 0..6 {
            let s = full.train_step(&ds).unwrap();
            full_losses.push((s.d_loss, s.g_loss));
        }

        // interrupted at step 3
        let mut a = Trainer::new(&cfg).unwrap();
        for _ in 0..3 {
            a.train_step(&ds).unwrap();
        }
        let ckpt = dir.path().join("mid.svck");
        a.save_checkpoint(&ckpt).unwrap();
        let mut b = Trainer::load_checkpoint(&ckpt).unwrap();
        assert_eq!(b.step, 3);
        for i in 3..6 {
            let s = b.train_step(&ds).unwrap();
            assert_eq!(
                (s.d_loss, s.g_loss),
                full_losses[i],
                "resumed step {i} diverged"
            );
        }
    }

    #[test]
    fn empty_dataset_rejected_and_k_mismatch_rejected() {
        let mut cfg = toy_config();
        cfg.disc.k = 4;
        assert!(Trainer::new(&cfg).is_err());
    }
}
