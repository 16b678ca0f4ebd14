//! Sparse timestamp sampling.
//!
//! A clip of k frames is placed by first drawing the span t_k - t_1
//! uniformly from the integers [k-1, max_span], then the offset t_1
//! uniformly from [0, T-1-span], then the k-2 interior timestamps
//! uniformly without replacement from the open interval (t_1, t_k).
//! Real and fake clips share this code path, so the discriminator cannot
//! tell them apart by timing statistics.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::config::SampleCfg;
use crate::data::{Dataset, VideoClip};
use crate::error::{Error, Result};

/// Sorted unique integer timestamps t_1 < ... < t_k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestampSet {
    pub ts: Vec<usize>,
}

impl TimestampSet {
    pub fn span(&self) -> usize {
        self.ts[self.ts.len() - 1] - self.ts[0]
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.ts.windows(2).map(|w| (w[1] - w[0]) as f64).collect()
    }
}

fn validate(cfg: &SampleCfg, horizon: usize) -> Result<()> {
    if cfg.k < 2 {
        return Err(Error::invalid(format!("k must be >= 2, got {}", cfg.k)));
    }
    if cfg.max_span < cfg.k - 1 {
        return Err(Error::invalid(format!(
            "max_span {} cannot place k = {} distinct frames (needs span >= {})",
            cfg.max_span,
            cfg.k,
            cfg.k - 1
        )));
    }
    if horizon <= cfg.max_span {
        return Err(Error::invalid(format!(
            "horizon {horizon} must exceed max_span {}",
            cfg.max_span
        )));
    }
    Ok(())
}

/// Draw one timestamp set over the horizon [0, T-1] from `cfg`.
pub fn sample_timestamps(cfg: &SampleCfg, rng: &mut ChaCha12Rng) -> Result<TimestampSet> {
    sample_timestamps_in(cfg, cfg.t_max, rng)
}

/// Same law with an explicit horizon (used for real clips, where the
/// horizon is the video length).
pub fn sample_timestamps_in(
    cfg: &SampleCfg,
    horizon: usize,
    rng: &mut ChaCha12Rng,
) -> Result<TimestampSet> {
    validate(cfg, horizon)?;
    let span = rng.gen_range(cfg.k - 1..=cfg.max_span);
    let offset = rng.gen_range(0..=horizon - 1 - span);
    let mut ts = Vec::with_capacity(cfg.k);
    ts.push(offset);
    if cfg.k > 2 {
        // interior points: k-2 distinct values strictly inside the span
        let mut candidates: Vec<usize> = (offset + 1..offset + span).collect();
        for pick in 0..cfg.k - 2 {
            let j = rng.gen_range(pick..candidates.len());
            candidates.swap(pick, j);
        }
        let mut interior: Vec<usize> = candidates[..cfg.k - 2].to_vec();
        interior.sort_unstable();
        ts.extend(interior);
    }
    ts.push(offset + span);
    Ok(TimestampSet { ts })
}

/// Pick a video uniformly and sample a sparse clip from it.
///
/// Videos shorter than max_span + 1 frames are skipped with a warning and
/// another video is drawn.
pub fn sample_real_clip(
    dataset: &Dataset,
    cfg: &SampleCfg,
    rng: &mut ChaCha12Rng,
) -> Result<VideoClip> {
    let min_len = cfg.max_span + 1;
    if (0..dataset.num_videos()).all(|v| dataset.video_len(v) < min_len) {
        return Err(Error::invalid(format!(
            "no video is long enough for sampling (need >= {min_len} frames)"
        )));
    }
    loop {
        let video = rng.gen_range(0..dataset.num_videos());
        let len = dataset.video_len(video);
        if len < min_len {
            eprintln!(
                "warning: video {video} has {len} frames (< {min_len}); skipping and resampling"
            );
            continue;
        }
        let set = sample_timestamps_in(cfg, len, rng)?;
        let frames = set
            .ts
            .iter()
            .map(|&t| dataset.frame(video, t))
            .collect::<Result<Vec<_>>>()?;
        return Ok(VideoClip {
            frames,
            timestamps: set.ts,
            video: Some(video),
        });
    }
}
