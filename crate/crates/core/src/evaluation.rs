//! Fréchet-distance evaluation harness.
//!
//! Scores are Fréchet distances between Gaussian fits of clip (or frame)
//! features from a small *frozen* random-projection extractor shipped with
//! the repository. They are internally comparable across runs of this
//! artifact and deliberately not comparable to any published FVD/FID
//! numbers: the extractor, not the formula, dominates the scale of such
//! scores.
//!
//! Protocol (matching the documented hazards it exists to expose): real
//! statistics use a single clip per video at a random offset at native
//! frame rate; fake statistics use `num_fake` generated clips starting at
//! t = 0. The hazardous protocol variants (first-frame offsets, all clips
//! per video, frame subsampling, JPEG round-trip of fakes) are all
//! switchable through `EvalCfg`.

use std::sync::OnceLock;

use ndarray::IxDyn;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Arr;
use crate::config::{EvalCfg, OffsetPolicy};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::derived;

pub const FEATURE_DIM: usize = 64;
const PHI_DIM: usize = 64;
const PATCH: usize = 16;
const INPUT_DIM: usize = 3 * PATCH * PATCH;
pub const MAX_CLIP_LEN: usize = 128;

/// SHA-256 of the shipped extractor weights (version 1).
pub const EXTRACTOR_V1_SHA256: &str =
    "e6bc15a8a41485a711a6a7c47547fb96f1efdf5a88ac0b8118e87597046aa8f7";

static EXTRACTOR_BYTES: &[u8] = include_bytes!("../assets/extractor_v1.bin");

/// (mu, Sigma) feature statistics.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    /// Row-major [dim, dim], symmetric.
    pub sigma: Arr,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite()) && self.sigma.iter().all(|v| v.is_finite())
    }
}

/// Kahan-compensated accumulator so statistics are order-independent far
/// below the documented 1e-10.
#[derive(Clone)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn new() -> Self {
        Kahan { sum: 0.0, c: 0.0 }
    }
    fn add(&mut self, v: f64) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Fit (mu, Sigma) to feature rows; covariance uses the unbiased n-1
/// normalization. With fewer than dim+1 rows a warning is printed and a
/// 1e-6 diagonal jitter keeps the covariance usable.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 feature rows to fit a Gaussian, got {n}"
        )));
    }
    let dim = features[0].len();
    let mut mu_acc = vec![Kahan::new(); dim];
    for row in features {
        for (a, v) in mu_acc.iter_mut().zip(row) {
            a.add(*v);
        }
    }
    let mu: Vec<f64> = mu_acc.iter().map(|a| a.sum / n as f64).collect();

    let mut cov_acc = vec![Kahan::new(); dim * dim];
    for row in features {
        let centered: Vec<f64> = row.iter().zip(&mu).map(|(v, m)| v - m).collect();
        for i in 0..dim {
            for j in i..dim {
                cov_acc[i * dim + j].add(centered[i] * centered[j]);
            }
        }
    }
    let mut sigma = Arr::zeros(IxDyn(&[dim, dim]));
    for i in 0..dim {
        for j in i..dim {
            let v = cov_acc[i * dim + j].sum / (n - 1) as f64;
            sigma[[i, j]] = v;
            sigma[[j, i]] = v;
        }
    }
    if n < dim + 1 {
        eprintln!(
            "warning: only {n} samples for a {dim}-dim covariance; adding 1e-6 diagonal jitter"
        );
        for i in 0..dim {
            sigma[[i, i]] += 1e-6;
        }
    }
    Ok(GaussianStats { mu, sigma })
}

fn to_dmatrix(a: &Arr) -> nalgebra::DMatrix<f64> {
    let n = a.shape()[0];
    nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]])
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// are clamped at zero.
fn sqrtm_psd(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let sqrt_vals: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .collect();
    let d = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sqrt_vals));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet (Wasserstein-2) distance between two Gaussians:
/// ||mu_a - mu_b||^2 + Tr(Sigma_a + Sigma_b - 2 (Sigma_a Sigma_b)^(1/2)).
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid("non-finite Gaussian statistics"));
    }
    let mean_term: f64 = a
        .mu
        .iter()
        .zip(&b.mu)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = to_dmatrix(&a.sigma);
    let sb = to_dmatrix(&b.sigma);
    // Tr((Sa Sb)^1/2) = Tr((Sb^1/2 Sa Sb^1/2)^1/2), which keeps everything
    // symmetric for the eigen solver
    let rb = sqrtm_psd(&sb);
    let inner = &rb * &sa * &rb;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d2 = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(d2.max(0.0))
}

// ---- frozen feature extractor ------------------------------------------------

/// Fixed random-projection feature network standing in for a pretrained
/// video embedder. Weights ship as a versioned blob; loading verifies the
/// checksum so scores stay comparable across machines and runs.
pub struct FrozenExtractor {
    w1: Vec<f64>,      // [PHI_DIM, INPUT_DIM]
    b1: Vec<f64>,      // [PHI_DIM]
    c: Vec<f64>,       // [MAX_CLIP_LEN, PHI_DIM] temporal coefficients
    w2: Vec<f64>,      // [FEATURE_DIM, 3*PHI_DIM]
    b2: Vec<f64>,      // [FEATURE_DIM]
    w2s: Vec<f64>,     // [FEATURE_DIM, PHI_DIM] spatial-only head
    b2s: Vec<f64>,     // [FEATURE_DIM]
}

const BLOB_LEN: usize = PHI_DIM * INPUT_DIM
    + PHI_DIM
    + MAX_CLIP_LEN * PHI_DIM
    + FEATURE_DIM * 3 * PHI_DIM
    + FEATURE_DIM
    + FEATURE_DIM * PHI_DIM
    + FEATURE_DIM;

impl FrozenExtractor {
    /// The deterministic procedure that produced the shipped blob
    /// (kept so the asset can be audited and regenerated bit-exactly).
    pub fn generate_blob() -> Vec<u8> {
        let mut rng = derived(0x5eed_fea7, 1);
        let mut vals = Vec::with_capacity(BLOB_LEN);
        let mut norm = |n: usize, scale: f64, vals: &mut Vec<f64>| {
            for _ in 0..n {
                let x: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut rng,
                );
                vals.push(x * scale);
            }
        };
        norm(PHI_DIM * INPUT_DIM, 1.0 / (INPUT_DIM as f64).sqrt(), &mut vals);
        norm(PHI_DIM, 0.1, &mut vals);
        norm(MAX_CLIP_LEN * PHI_DIM, 1.0, &mut vals);
        norm(
            FEATURE_DIM * 3 * PHI_DIM,
            1.0 / (3.0 * PHI_DIM as f64).sqrt(),
            &mut vals,
        );
        norm(FEATURE_DIM, 0.1, &mut vals);
        norm(FEATURE_DIM * PHI_DIM, 1.0 / (PHI_DIM as f64).sqrt(), &mut vals);
        norm(FEATURE_DIM, 0.1, &mut vals);
        let mut bytes = Vec::with_capacity(vals.len() * 8);
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != BLOB_LEN * 8 {
            return Err(Error::Load(format!(
                "extractor blob has {} bytes, expected {}",
                bytes.len(),
                BLOB_LEN * 8
            )));
        }
        let mut vals = Vec::with_capacity(BLOB_LEN);
        for chunk in bytes.chunks_exact(8) {
            vals.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let mut take = {
            let mut offset = 0usize;
            move |n: usize| {
                let out = vals[offset..offset + n].to_vec();
                offset += n;
                out
            }
        };
        Ok(FrozenExtractor {
            w1: take(PHI_DIM * INPUT_DIM),
            b1: take(PHI_DIM),
            c: take(MAX_CLIP_LEN * PHI_DIM),
            w2: take(FEATURE_DIM * 3 * PHI_DIM),
            b2: take(FEATURE_DIM),
            w2s: take(FEATURE_DIM * PHI_DIM),
            b2s: take(FEATURE_DIM),
        })
    }

    /// Shared instance loaded from the embedded blob with checksum
    /// verification.
    pub fn shared() -> &'static FrozenExtractor {
        static INSTANCE: OnceLock<FrozenExtractor> = OnceLock::new();
        INSTANCE.get_or_init(|| {
            let digest = hex_digest(EXTRACTOR_BYTES);
            assert_eq!(
                digest, EXTRACTOR_V1_SHA256,
                "extractor blob checksum mismatch; the asset is corrupt"
            );
            FrozenExtractor::from_bytes(EXTRACTOR_BYTES).expect("embedded blob is well-formed")
        })
    }

    /// Average-pool a [3, res, res] frame to the 16x16 input patch and
    /// flatten channel-major.
    fn pool_frame(frame: &Arr) -> Result<Vec<f64>> {
        let res = frame.shape()[1];
        if frame.shape() != [3, res, res] || res < PATCH || res % PATCH != 0 {
            return Err(Error::invalid(format!(
                "frame shape {:?} not poolable to {PATCH}x{PATCH}",
                frame.shape()
            )));
        }
        let f = res / PATCH;
        let mut out = vec![0.0; INPUT_DIM];
        let inv = 1.0 / (f * f) as f64;
        for c in 0..3 {
            for y in 0..PATCH {
                for x in 0..PATCH {
                    let mut acc = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += frame[[c, y * f + dy, x * f + dx]];
                        }
                    }
                    out[(c * PATCH + y) * PATCH + x] = acc * inv;
                }
            }
        }
        Ok(out)
    }

    fn phi(&self, frame: &Arr) -> Result<Vec<f64>> {
        let x = Self::pool_frame(frame)?;
        let mut out = vec![0.0; PHI_DIM];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w1[i * INPUT_DIM..(i + 1) * INPUT_DIM];
            let mut acc = self.b1[i];
            for (w, v) in row.iter().zip(&x) {
                acc += w * v;
            }
            *o = acc.tanh();
        }
        Ok(out)
    }

    /// Clip feature: mixes a frame average, temporally-weighted frame
    /// features and first-difference motion energy, so temporal order and
    /// motion both matter.
    pub fn video_features(&self, clip: &[Arr]) -> Result<Vec<f64>> {
        let len = clip.len();
        if len == 0 || len > MAX_CLIP_LEN {
            return Err(Error::invalid(format!(
                "clip length {len} outside 1..={MAX_CLIP_LEN}"
            )));
        }
        let phis: Vec<Vec<f64>> = clip.iter().map(|f| self.phi(f)).collect::<Result<_>>()?;
        let inv = 1.0 / len as f64;
        let mut z = vec![0.0; 3 * PHI_DIM];
        for (t, phi) in phis.iter().enumerate() {
            let ct = &self.c[t * PHI_DIM..(t + 1) * PHI_DIM];
            for j in 0..PHI_DIM {
                z[j] += phi[j] * inv;
                z[PHI_DIM + j] += ct[j] * phi[j] * inv;
            }
        }
        if len > 1 {
            let invd = 1.0 / (len - 1) as f64;
            for t in 0..len - 1 {
                for j in 0..PHI_DIM {
                    z[2 * PHI_DIM + j] += (phis[t + 1][j] - phis[t][j]).abs() * invd;
                }
            }
        }
        let mut out = vec![0.0; FEATURE_DIM];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w2[i * 3 * PHI_DIM..(i + 1) * 3 * PHI_DIM];
            let mut acc = self.b2[i];
            for (w, v) in row.iter().zip(&z) {
                acc += w * v;
            }
            *o = acc.tanh();
        }
        Ok(out)
    }

    /// Spatial-only per-frame feature (the FID path).
    pub fn frame_features(&self, frame: &Arr) -> Result<Vec<f64>> {
        let phi = self.phi(frame)?;
        let mut out = vec![0.0; FEATURE_DIM];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w2s[i * PHI_DIM..(i + 1) * PHI_DIM];
            let mut acc = self.b2s[i];
            for (w, v) in row.iter().zip(&phi) {
                acc += w * v;
            }
            *o = acc.tanh();
        }
        Ok(out)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

// ---- protocol ---------------------------------------------------------------

/// JPEG-encode and decode a frame at the given quality.
pub fn jpeg_roundtrip(frame: &Arr, quality: u8) -> Result<Arr> {
    let img = crate::data::frame_to_image(frame);
    let mut buf = Vec::new();
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    enc.encode_image(&img)?;
    let back = image::load_from_memory(&buf)?.to_rgb8();
    Ok(crate::data::image_to_frame(&back))
}

/// Enumerate real clips per the protocol: one random-offset clip per video
/// (or the first-frames / all-clips hazard variants), at the native frame
/// rate unless a subsample stride is set.
pub fn real_clips(ds: &Dataset, cfg: &EvalCfg) -> Result<Vec<Vec<Arr>>> {
    let needed = cfg.clip_len * cfg.subsample_stride;
    let mut rng = derived(cfg.seed, 7001);
    let mut clips = Vec::new();
    for v in 0..ds.num_videos() {
        let len = ds.video_len(v);
        if len < needed {
            return Err(Error::invalid(format!(
                "video {v} has {len} frames; the protocol needs {needed} \
                 (clip_len {} x stride {})",
                cfg.clip_len, cfg.subsample_stride
            )));
        }
        if cfg.all_clips {
            let mut start = 0;
            while start + needed <= len {
                clips.push(ds.clip(v, start, cfg.clip_len, cfg.subsample_stride)?);
                start += needed;
            }
        } else {
            let max_offset = len - needed;
            let offset = match cfg.offset_policy {
                OffsetPolicy::First => 0,
                OffsetPolicy::Random => rng.gen_range(0..=max_offset),
            };
            clips.push(ds.clip(v, offset, cfg.clip_len, cfg.subsample_stride)?);
        }
    }
    Ok(clips)
}

pub struct ScoreReport {
    pub score: f64,
    pub real_count: usize,
    pub fake_count: usize,
    pub feature_dim: usize,
    /// Frames that entered the statistics on each side.
    pub real_frames: usize,
    pub fake_frames: usize,
}

/// FVD between the dataset and `num_fake` generated clips.
///
/// `fake_source(i)` must yield the i-th generated clip of length
/// `cfg.clip_len` whose first frame sits at t = 0.
pub fn compute_fvd(
    ds: &Dataset,
    cfg: &EvalCfg,
    fake_source: &mut dyn FnMut(usize) -> Result<Vec<Arr>>,
) -> Result<ScoreReport> {
    let ex = FrozenExtractor::shared();
    let real = real_clips(ds, cfg)?;
    let real_feats: Vec<Vec<f64>> = real
        .iter()
        .map(|c| ex.video_features(c))
        .collect::<Result<_>>()?;

    let mut fake_feats = Vec::with_capacity(cfg.num_fake);
    let mut fake_frames = 0usize;
    for i in 0..cfg.num_fake {
        let mut clip = fake_source(i)?;
        if clip.len() != cfg.clip_len {
            return Err(Error::invalid(format!(
                "fake clip {i} has {} frames, protocol expects {}",
                clip.len(),
                cfg.clip_len
            )));
        }
        if cfg.jpeg_quality > 0 {
            clip = clip
                .iter()
                .map(|f| jpeg_roundtrip(f, cfg.jpeg_quality))
                .collect::<Result<_>>()?;
        }
        fake_frames += clip.len();
        fake_feats.push(ex.video_features(&clip)?);
    }

    let ga = fit_gaussian(&real_feats)?;
    let gb = fit_gaussian(&fake_feats)?;
    Ok(ScoreReport {
        score: frechet_distance(&ga, &gb)?,
        real_count: real_feats.len(),
        fake_count: fake_feats.len(),
        feature_dim: FEATURE_DIM,
        real_frames: real.iter().map(|c| c.len()).sum(),
        fake_frames,
    })
}

/// FID from video frames: every frame of every clip enters the per-frame
/// statistics on both sides.
pub fn compute_fid_from_videos(
    ds: &Dataset,
    cfg: &EvalCfg,
    fake_source: &mut dyn FnMut(usize) -> Result<Vec<Arr>>,
) -> Result<ScoreReport> {
    let ex = FrozenExtractor::shared();
    let real = real_clips(ds, cfg)?;
    let mut real_feats = Vec::new();
    for clip in &real {
        for f in clip {
            real_feats.push(ex.frame_features(f)?);
        }
    }
    let mut fake_feats = Vec::new();
    for i in 0..cfg.num_fake {
        let mut clip = fake_source(i)?;
        if cfg.jpeg_quality > 0 {
            clip = clip
                .iter()
                .map(|f| jpeg_roundtrip(f, cfg.jpeg_quality))
                .collect::<Result<_>>()?;
        }
        for f in &clip {
            fake_feats.push(ex.frame_features(f)?);
        }
    }
    let ga = fit_gaussian(&real_feats)?;
    let gb = fit_gaussian(&fake_feats)?;
    Ok(ScoreReport {
        score: frechet_distance(&ga, &gb)?,
        real_count: real.len(),
        fake_count: cfg.num_fake,
        feature_dim: FEATURE_DIM,
        real_frames: real_feats.len(),
        fake_frames: fake_feats.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::rng::{randn, seeded};
    use rand_distr::Distribution;

    #[test]
    fn blob_matches_generator_and_checksum() {
        let digest = hex_digest(EXTRACTOR_BYTES);
        assert_eq!(digest, EXTRACTOR_V1_SHA256);
        assert_eq!(FrozenExtractor::generate_blob(), EXTRACTOR_BYTES);
    }

    #[test]
    fn frechet_identical_stats_zero() {
        let feats: Vec<Vec<f64>> = (0..100)
            .map(|i| {
                let mut rng = seeded(100 + i);
                (0..8)
                    .map(|_| rand_distr::StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let g1 = fit_gaussian(&feats).unwrap();
        let g2 = fit_gaussian(&feats).unwrap();
        let d = frechet_distance(&g1, &g2).unwrap();
        assert!(d < 1e-6, "FVD(X,X) = {d}");
    }

    #[test]
    fn frechet_mean_shift_equals_squared_norm() {
        let mut rng = seeded(5);
        let feats: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                (0..4)
                    .map(|_| rand_distr::StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let g1 = fit_gaussian(&feats).unwrap();
        let shift = [0.5, -1.0, 2.0, 0.25];
        let shifted: Vec<Vec<f64>> = feats
            .iter()
            .map(|r| r.iter().zip(&shift).map(|(v, s)| v + s).collect())
            .collect();
        let g2 = fit_gaussian(&shifted).unwrap();
        let d = frechet_distance(&g1, &g2).unwrap();
        let expect: f64 = shift.iter().map(|s| s * s).sum();
        assert!((d - expect).abs() < 1e-9, "{d} vs {expect}");
    }

    /// 1-D closed form: (mu1-mu2)^2 + (s1-s2)^2 for standard deviations s.
    #[test]
    fn frechet_1d_closed_form() {
        let (mu1, s1) = (0.3, 0.9);
        let (mu2, s2) = (-1.1, 1.7);
        let a = GaussianStats {
            mu: vec![mu1],
            sigma: Arr::from_elem(IxDyn(&[1, 1]), s1 * s1),
        };
        let b = GaussianStats {
            mu: vec![mu2],
            sigma: Arr::from_elem(IxDyn(&[1, 1]), s2 * s2),
        };
        let d = frechet_distance(&a, &b).unwrap();
        let expect = (mu1 - mu2) * (mu1 - mu2) + (s1 - s2) * (s1 - s2);
        assert!((d - expect).abs() < 1e-12, "{d} vs {expect}");
    }

    #[test]
    fn frechet_symmetric_and_nonnegative() {
        let mut rng = seeded(6);
        let mk = |rng: &mut rand_chacha::ChaCha12Rng| {
            let feats: Vec<Vec<f64>> = (0..50)
                .map(|_| {
                    (0..6)
                        .map(|_| rand_distr::StandardNormal.sample(rng))
                        .collect()
                })
                .collect();
            fit_gaussian(&feats).unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let dab = frechet_distance(&a, &b).unwrap();
        let dba = frechet_distance(&b, &a).unwrap();
        assert!(dab >= 0.0);
        assert!((dab - dba).abs() < 1e-8, "{dab} vs {dba}");
    }

    #[test]
    fn nonfinite_stats_rejected() {
        let a = GaussianStats {
            mu: vec![f64::NAN],
            sigma: Arr::from_elem(IxDyn(&[1, 1]), 1.0),
        };
        let b = GaussianStats {
            mu: vec![0.0],
            sigma: Arr::from_elem(IxDyn(&[1, 1]), 1.0),
        };
        assert!(frechet_distance(&a, &b).is_err());
    }

    #[test]
    fn extractor_deterministic_and_bias_path() {
        let ex = FrozenExtractor::shared();
        let clip: Vec<Arr> = (0..4).map(|i| randn(&mut seeded(50 + i), &[3, 32, 32])).collect();
        let f1 = ex.video_features(&clip).unwrap();
        let f2 = ex.video_features(&clip).unwrap();
        assert_eq!(f1, f2);

        // all-zero clip: feature equals the pure bias path
        let zeros: Vec<Arr> = (0..4).map(|_| Arr::zeros(IxDyn(&[3, 32, 32]))).collect();
        let fz = ex.video_features(&zeros).unwrap();
        let phi_b: Vec<f64> = ex.b1.iter().map(|b| b.tanh()).collect();
        // z1 = phi_b, z2 = mean_t c_t .* phi_b, z3 = 0
        let mut z = vec![0.0; 3 * PHI_DIM];
        for j in 0..PHI_DIM {
            z[j] = phi_b[j];
            let mut acc = 0.0;
            for t in 0..4 {
                acc += ex.c[t * PHI_DIM + j];
            }
            z[PHI_DIM + j] = acc / 4.0 * phi_b[j];
        }
        for i in 0..FEATURE_DIM {
            let row = &ex.w2[i * 3 * PHI_DIM..(i + 1) * 3 * PHI_DIM];
            let mut acc = ex.b2[i];
            for (w, v) in row.iter().zip(&z) {
                acc += w * v;
            }
            assert!((fz[i] - acc.tanh()).abs() < 1e-6);
        }
    }

    #[test]
    fn temporal_shuffle_changes_features() {
        // moving sprite: order matters
        let clip: Vec<Arr> = (0..8)
            .map(|t| {
                crate::data::render_frame(SyntheticKind::BouncingBall, 3, 0, 32, t)
            })
            .collect();
        let ex = FrozenExtractor::shared();
        let f = ex.video_features(&clip).unwrap();
        let mut shuffled = clip.clone();
        shuffled.swap(0, 5);
        shuffled.swap(2, 7);
        let fs = ex.video_features(&shuffled).unwrap();
        let diff: f64 = f.iter().zip(&fs).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "shuffle-insensitive features, diff = {diff}");
    }

    #[test]
    fn wrong_clip_length_rejected() {
        let ex = FrozenExtractor::shared();
        assert!(ex.video_features(&[]).is_err());
        let long: Vec<Arr> = (0..129).map(|_| Arr::zeros(IxDyn(&[3, 32, 32]))).collect();
        assert!(ex.video_features(&long).is_err());
    }

    fn tiny_dataset(kind: SyntheticKind, count: usize, seed: u64) -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        make_synthetic(kind, count, 40, 32, seed, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        (dir, ds)
    }

    fn small_cfg(num_fake: usize) -> EvalCfg {
        EvalCfg {
            clip_len: 16,
            num_fake,
            offset_policy: OffsetPolicy::Random,
            subsample_stride: 1,
            all_clips: false,
            jpeg_quality: 0,
            seed: 3,
        }
    }

    #[test]
    fn fvd_self_is_zero_and_noise_increases_it() {
        let (_tmp, ds) = tiny_dataset(SyntheticKind::BouncingBall, 24, 9);
        let cfg = small_cfg(24);

        // fakes = the very same real clips
        let clips = real_clips(&ds, &cfg).unwrap();
        let mut exact = |i: usize| -> Result<Vec<Arr>> { Ok(clips[i % clips.len()].clone()) };
        let r = compute_fvd(&ds, &cfg, &mut exact).unwrap();
        assert!(r.score < 1e-4, "FVD(X,X) = {}", r.score);
        assert_eq!(r.real_count, 24);
        assert_eq!(r.fake_count, 24);

        // growing iid pixel noise monotonically increases the score
        let mut scores = Vec::new();
        for (ai, amp) in [0.05, 0.1, 0.2].iter().enumerate() {
            let mut noisy = |i: usize| -> Result<Vec<Arr>> {
                let mut rng = seeded(800 + (ai * 1000 + i) as u64);
                Ok(clips[i % clips.len()]
                    .iter()
                    .map(|f| {
                        let noise = randn(&mut rng, &[3, 32, 32]);
                        f + &(noise * *amp)
                    })
                    .collect())
            };
            let r = compute_fvd(&ds, &cfg, &mut noisy).unwrap();
            scores.push(r.score);
        }
        assert!(
            scores[0] < scores[1] && scores[1] < scores[2],
            "noise monotonicity violated: {scores:?}"
        );
    }

    #[test]
    fn offset_policy_changes_score_with_distinct_intro_frames() {
        // construct a hazard dataset: distinct intro look at the start of
        // each video (bright first frames), like intro cards
        let dir = tempfile::tempdir().unwrap();
        make_synthetic(SyntheticKind::DriftingGradient, 12, 48, 32, 21, dir.path()).unwrap();
        // overwrite the first 8 frames of each video with a flat bright card
        for v in 0..12 {
            for t in 0..8 {
                let path = dir
                    .path()
                    .join(format!("video{v:05}"))
                    .join(format!("{t:06}.png"));
                let img = image::RgbImage::from_pixel(32, 32, image::Rgb([250, 250, 250]));
                img.save(&path).unwrap();
            }
        }
        let ds = Dataset::load(dir.path()).unwrap();

        let mut cfg = small_cfg(12);
        cfg.seed = 5;
        let clips_random = real_clips(&ds, &cfg).unwrap();
        let mut src = |i: usize| -> Result<Vec<Arr>> { Ok(clips_random[i % 12].clone()) };
        let score_random = compute_fvd(&ds, &cfg, &mut src).unwrap().score;

        let mut cfg_first = cfg.clone();
        cfg_first.offset_policy = OffsetPolicy::First;
        let mut src2 = |i: usize| -> Result<Vec<Arr>> { Ok(clips_random[i % 12].clone()) };
        let score_first = compute_fvd(&ds, &cfg_first, &mut src2).unwrap().score;
        assert!(
            (score_random - score_first).abs() > 1e-6,
            "offset policy had no effect: {score_random} vs {score_first}"
        );
    }

    #[test]
    fn jpeg_roundtrip_flag_changes_score() {
        let (_tmp, ds) = tiny_dataset(SyntheticKind::BouncingBall, 12, 33);
        let cfg = small_cfg(12);
        let clips = real_clips(&ds, &cfg).unwrap();
        let mut src = |i: usize| -> Result<Vec<Arr>> { Ok(clips[i % 12].clone()) };
        let clean = compute_fvd(&ds, &cfg, &mut src).unwrap().score;

        let mut cfg_jpeg = cfg.clone();
        cfg_jpeg.jpeg_quality = 75;
        let mut src2 = |i: usize| -> Result<Vec<Arr>> { Ok(clips[i % 12].clone()) };
        let jpegged = compute_fvd(&ds, &cfg_jpeg, &mut src2).unwrap().score;
        assert!(
            jpegged > clean + 1e-9,
            "JPEG artifacts should move the score: {clean} vs {jpegged}"
        );
    }

    #[test]
    fn fid_self_zero_and_diversity_caveat() {
        let (_tmp, ds) = tiny_dataset(SyntheticKind::BouncingBall, 16, 44);
        let cfg = small_cfg(16);
        let clips = real_clips(&ds, &cfg).unwrap();
        let mut src = |i: usize| -> Result<Vec<Arr>> { Ok(clips[i % 16].clone()) };
        let r = compute_fid_from_videos(&ds, &cfg, &mut src).unwrap();
        assert!(r.score < 1e-4, "FID(X,X) = {}", r.score);
        assert_eq!(r.feature_dim, FEATURE_DIM);
        assert_eq!(r.real_frames, 16 * 16);

        // frames of one clip are less diverse than first frames of many
        // clips: the two sampling schemes give a nonzero FID between them
        let one_clip_frames: Vec<Vec<f64>> = clips[0]
            .iter()
            .map(|f| FrozenExtractor::shared().frame_features(f).unwrap())
            .collect();
        let first_frames: Vec<Vec<f64>> = clips
            .iter()
            .map(|c| FrozenExtractor::shared().frame_features(&c[0]).unwrap())
            .collect();
        let g1 = fit_gaussian(&one_clip_frames).unwrap();
        let g2 = fit_gaussian(&first_frames).unwrap();
        let d = frechet_distance(&g1, &g2).unwrap();
        assert!(d > 1e-4, "sampling schemes indistinguishable: {d}");
    }

    #[test]
    fn stride_hazard_changes_real_statistics() {
        let (_tmp, ds) = tiny_dataset(SyntheticKind::BouncingBall, 12, 55);
        let mut cfg = small_cfg(12);
        cfg.clip_len = 8;
        let base = real_clips(&ds, &cfg).unwrap();
        cfg.subsample_stride = 4;
        let strided = real_clips(&ds, &cfg).unwrap();
        let ex = FrozenExtractor::shared();
        let f1: Vec<Vec<f64>> = base.iter().map(|c| ex.video_features(c).unwrap()).collect();
        let f2: Vec<Vec<f64>> = strided
            .iter()
            .map(|c| ex.video_features(c).unwrap())
            .collect();
        let d = frechet_distance(&fit_gaussian(&f1).unwrap(), &fit_gaussian(&f2).unwrap())
            .unwrap();
        assert!(d > 1e-6, "stride should change the statistics");
    }
}
