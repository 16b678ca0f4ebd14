//! Synthetic video datasets and the on-disk dataset format.
//!
//! Layout: `<root>/manifest.json` plus one directory of zero-padded PNG
//! frames per video (`<root>/<video_id>/000000.png`, ...). Frames are
//! stored losslessly; pixels map linearly between u8 [0, 255] and
//! real [-1, 1]. Ingestion never resizes: resolution mismatches are hard
//! errors.

use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Arr;
use crate::error::{Error, Result};
use crate::rng::derived;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: String,
    pub frame_count: usize,
    pub resolution: usize,
    pub fps: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub videos: Vec<ManifestVideo>,
}

/// k frames of one video plus their integer timestamps.
#[derive(Debug, Clone)]
pub struct VideoClip {
    /// Each frame is [3, res, res] in [-1, 1].
    pub frames: Vec<Arr>,
    pub timestamps: Vec<usize>,
    /// Source video index for real clips; None for generated ones.
    pub video: Option<usize>,
}

impl VideoClip {
    /// Time distances between consecutive frames (all strictly positive).
    pub fn deltas(&self) -> Vec<f64> {
        self.timestamps
            .windows(2)
            .map(|w| (w[1] - w[0]) as f64)
            .collect()
    }
}

pub fn pixel_to_real(v: u8) -> f64 {
    v as f64 / 255.0 * 2.0 - 1.0
}

pub fn real_to_pixel(p: f64) -> u8 {
    (((p + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// Frame tensor [3, h, w] -> RGB image buffer.
pub fn frame_to_image(frame: &Arr) -> image::RgbImage {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                real_to_pixel(frame[[0, y, x]]),
                real_to_pixel(frame[[1, y, x]]),
                real_to_pixel(frame[[2, y, x]]),
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img
}

pub fn image_to_frame(img: &image::RgbImage) -> Arr {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut frame = Arr::zeros(IxDyn(&[3, h, w]));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                frame[[c, y, x]] = pixel_to_real(px.0[c]);
            }
        }
    }
    frame
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    BouncingBall,
    DriftingGradient,
    BlinkingSprite,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bouncing-ball" => Ok(SyntheticKind::BouncingBall),
            "drifting-gradient" => Ok(SyntheticKind::DriftingGradient),
            "blinking-sprite" => Ok(SyntheticKind::BlinkingSprite),
            other => Err(Error::invalid(format!(
                "unknown dataset kind `{other}`; expected bouncing-ball|drifting-gradient|blinking-sprite"
            ))),
        }
    }
}

/// Reflect an unbounded coordinate into [lo, hi] (elastic bounce).
pub fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let period = 2.0 * span;
    let mut y = (x - lo) % period;
    if y < 0.0 {
        y += period;
    }
    lo + if y <= span { y } else { period - y }
}

/// Per-video parameters of the bouncing-ball renderer, derived
/// deterministically from (seed, video index) so tests can recompute the
/// trajectory in closed form.
#[derive(Debug, Clone)]
pub struct BallParams {
    pub x0: f64,
    pub y0: f64,
    pub vx: f64,
    pub vy: f64,
    pub radius: f64,
    pub color: [f64; 3],
}

impl BallParams {
    pub fn derive(seed: u64, video: usize, resolution: usize) -> Self {
        let mut rng = derived(seed, 1000 + video as u64);
        let r = resolution as f64 / 8.0;
        let lo = r;
        let hi = resolution as f64 - 1.0 - r;
        let x0 = rng.gen_range(lo..hi);
        let y0 = rng.gen_range(lo..hi);
        let speed = |rng: &mut rand_chacha::ChaCha12Rng| {
            let mag = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        };
        let vx = speed(&mut rng);
        let vy = speed(&mut rng);
        let color = [
            rng.gen_range(0.4..1.0),
            rng.gen_range(0.4..1.0),
            rng.gen_range(0.4..1.0),
        ];
        BallParams {
            x0,
            y0,
            vx,
            vy,
            radius: r,
            color,
        }
    }

    /// Closed-form center position at frame t.
    pub fn position(&self, resolution: usize, t: f64) -> (f64, f64) {
        let lo = self.radius;
        let hi = resolution as f64 - 1.0 - self.radius;
        (
            reflect(self.x0 + self.vx * t, lo, hi),
            reflect(self.y0 + self.vy * t, lo, hi),
        )
    }
}

#[derive(Debug, Clone)]
pub struct GradientParams {
    pub dx: f64,
    pub dy: f64,
    pub speed: f64,
    pub phase: [f64; 3],
}

impl GradientParams {
    pub fn derive(seed: u64, video: usize) -> Self {
        let mut rng = derived(seed, 2000 + video as u64);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        GradientParams {
            dx: angle.cos(),
            dy: angle.sin(),
            speed: rng.gen_range(0.01..0.03),
            phase: [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpriteParams {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    /// Full on/off cycle in frames; at most 8 so the blink stays above the
    /// sampler's maximum-span resolution.
    pub period: usize,
    pub phase: usize,
    pub color: [f64; 3],
}

impl SpriteParams {
    pub fn derive(seed: u64, video: usize, resolution: usize) -> Self {
        let mut rng = derived(seed, 3000 + video as u64);
        let size = resolution / 4;
        SpriteParams {
            x: rng.gen_range(0..resolution - size),
            y: rng.gen_range(0..resolution - size),
            size,
            period: *[4usize, 6, 8][..].iter().nth(rng.gen_range(0..3)).unwrap(),
            phase: rng.gen_range(0..8),
            color: [
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.5..1.0),
            ],
        }
    }

    pub fn visible(&self, t: usize) -> bool {
        (t + self.phase) % self.period < self.period / 2
    }
}

/// Render one frame of a synthetic video; pixels in [-1, 1].
pub fn render_frame(
    kind: SyntheticKind,
    seed: u64,
    video: usize,
    resolution: usize,
    t: usize,
) -> Arr {
    let mut frame = Arr::from_elem(IxDyn(&[3, resolution, resolution]), -1.0);
    match kind {
        SyntheticKind::BouncingBall => {
            let p = BallParams::derive(seed, video, resolution);
            let (cx, cy) = p.position(resolution, t as f64);
            for y in 0..resolution {
                for x in 0..resolution {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    let cover = (p.radius + 0.5 - d).clamp(0.0, 1.0);
                    if cover > 0.0 {
                        for c in 0..3 {
                            let v = -1.0 + cover * (p.color[c] * 2.0);
                            frame[[c, y, x]] = v;
                        }
                    }
                }
            }
        }
        SyntheticKind::DriftingGradient => {
            let p = GradientParams::derive(seed, video);
            let lambda = resolution as f64;
            for y in 0..resolution {
                for x in 0..resolution {
                    let proj = (x as f64 * p.dx + y as f64 * p.dy) / lambda;
                    for c in 0..3 {
                        let arg = std::f64::consts::TAU
                            * (proj + p.speed * t as f64 + p.phase[c]);
                        frame[[c, y, x]] = 0.7 * arg.sin();
                    }
                }
            }
        }
        SyntheticKind::BlinkingSprite => {
            let p = SpriteParams::derive(seed, video, resolution);
            // faint static backdrop so content is not empty when off
            for y in 0..resolution {
                for x in 0..resolution {
                    let v = -0.8 + 0.1 * (((x / 8) + (y / 8)) % 2) as f64;
                    for c in 0..3 {
                        frame[[c, y, x]] = v;
                    }
                }
            }
            if p.visible(t) {
                for y in p.y..p.y + p.size {
                    for x in p.x..p.x + p.size {
                        for c in 0..3 {
                            frame[[c, y, x]] = p.color[c] * 2.0 - 1.0;
                        }
                    }
                }
            }
        }
    }
    frame
}

/// Generate a dataset on disk; deterministic per (kind, seed).
pub fn make_synthetic(
    kind: SyntheticKind,
    count: usize,
    length: usize,
    resolution: usize,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest> {
    if resolution != 32 && resolution != 64 {
        return Err(Error::invalid(format!(
            "resolution must be 32 or 64, got {resolution}"
        )));
    }
    if length < 33 {
        return Err(Error::invalid(format!(
            "video length must be >= 33, got {length}"
        )));
    }
    if count == 0 {
        return Err(Error::invalid("video count must be positive"));
    }
    std::fs::create_dir_all(out)?;
    let mut videos = Vec::with_capacity(count);
    for v in 0..count {
        let id = format!("video{v:05}");
        let dir = out.join(&id);
        std::fs::create_dir_all(&dir)?;
        for t in 0..length {
            let frame = render_frame(kind, seed, v, resolution, t);
            let img = frame_to_image(&frame);
            img.save(dir.join(format!("{t:06}.png")))?;
        }
        videos.push(ManifestVideo {
            id,
            frame_count: length,
            resolution,
            fps: 30,
        });
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        videos,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Handle to an on-disk dataset with lazy frame access.
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Dataset> {
        let manifest_path = root.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Load(format!(
                "cannot read manifest {}: {e}",
                manifest_path.display()
            ))
        })?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Load(format!("corrupt manifest: {e}")))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Load(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.videos.is_empty() {
            return Err(Error::Load("manifest lists no videos".to_string()));
        }
        let res = manifest.videos[0].resolution;
        for v in &manifest.videos {
            if v.resolution != res {
                return Err(Error::Load(format!(
                    "mixed resolutions in manifest: {} vs {res}",
                    v.resolution
                )));
            }
            let dir = root.join(&v.id);
            let on_disk = std::fs::read_dir(&dir)
                .map_err(|e| Error::Load(format!("missing video dir {}: {e}", dir.display())))?
                .filter(|e| {
                    e.as_ref()
                        .map(|e| e.path().extension().is_some_and(|x| x == "png"))
                        .unwrap_or(false)
                })
                .count();
            if on_disk != v.frame_count {
                return Err(Error::Load(format!(
                    "video {} lists {} frames but {} png files are on disk",
                    v.id, v.frame_count, on_disk
                )));
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn num_videos(&self) -> usize {
        self.manifest.videos.len()
    }

    pub fn video_len(&self, video: usize) -> usize {
        self.manifest.videos[video].frame_count
    }

    pub fn resolution(&self) -> usize {
        self.manifest.videos[0].resolution
    }

    /// Read one frame as [3, res, res] in [-1, 1].
    pub fn frame(&self, video: usize, idx: usize) -> Result<Arr> {
        if video >= self.num_videos() {
            return Err(Error::out_of_range(format!(
                "video index {video} out of range (dataset has {} videos)",
                self.num_videos()
            )));
        }
        let len = self.video_len(video);
        if idx >= len {
            return Err(Error::out_of_range(format!(
                "frame index {idx} out of range (video {} has {len} frames)",
                self.manifest.videos[video].id
            )));
        }
        let path = self
            .root
            .join(&self.manifest.videos[video].id)
            .join(format!("{idx:06}.png"));
        let img = image::open(&path)
            .map_err(|e| Error::Load(format!("cannot read frame {}: {e}", path.display())))?
            .to_rgb8();
        if img.width() as usize != self.resolution() || img.height() as usize != self.resolution()
        {
            return Err(Error::Load(format!(
                "frame {} is {}x{} but the dataset resolution is {}; refusing to resample",
                path.display(),
                img.width(),
                img.height(),
                self.resolution()
            )));
        }
        Ok(image_to_frame(&img))
    }

    /// Read a clip of consecutive (optionally strided) frames.
    pub fn clip(&self, video: usize, start: usize, len: usize, stride: usize) -> Result<Vec<Arr>> {
        (0..len)
            .map(|j| self.frame(video, start + j * stride))
            .collect()
    }
}
