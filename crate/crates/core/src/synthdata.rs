//! Procedural coarsely aligned scene pairs with exact ground truth.
//!
//! Every scene has one background. The benign (target) frame shows it
//! unshifted under the identity domain; the adverse (source) frame shows it
//! under an integer camera shift and a per-channel color map. Both frames get
//! their own foreground sprites and their own multiplicative luminance blobs.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::io;
use crate::masking::{BinaryMask, InstanceProposals, Region};
use crate::pairing::{PoseFrame, PoseLog};

pub const SOURCE_TRAVERSAL: &str = "adverse";
pub const TARGET_TRAVERSAL: &str = "benign";
const MANIFEST_FORMAT: &str = "capit-synth/1";

/// `a = gain_c · γ(v) + bias_c` with `γ(v) = 2((v + 1)/2)^gamma − 1`, plus
/// Gaussian noise of `noise_std` when rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdverseTransform {
    pub gains: [f64; 3],
    pub biases: [f64; 3],
    pub gamma: f64,
    pub noise_std: f64,
}

impl Default for AdverseTransform {
    fn default() -> Self {
        AdverseTransform {
            gains: [0.55, 0.6, 0.85],
            biases: [-0.35, -0.3, -0.05],
            gamma: 1.8,
            noise_std: 0.02,
        }
    }
}

impl AdverseTransform {
    pub fn identity() -> Self {
        AdverseTransform {
            gains: [1.0; 3],
            biases: [0.0; 3],
            gamma: 1.0,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.gains.iter().position(|g| *g == 0.0 || !g.is_finite()) {
            return Err(Error::Config(format!(
                "adverse gain of channel {c} must be finite and nonzero"
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "adverse gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.noise_std >= 0.0) || self.biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config(
                "adverse noise_std must be >= 0 and biases finite".into(),
            ));
        }
        Ok(())
    }

    /// Deterministic color map of channel `c`; no noise, no clamping.
    pub fn color(&self, c: usize, v: f64) -> f64 {
        let g = if self.gamma == 1.0 {
            v
        } else {
            2.0 * ((v + 1.0) / 2.0).max(0.0).powf(self.gamma) - 1.0
        };
        self.gains[c] * g + self.biases[c]
    }

    pub fn invert(&self, c: usize, a: f64) -> f64 {
        let y = (a - self.biases[c]) / self.gains[c];
        if self.gamma == 1.0 {
            y
        } else {
            2.0 * ((y + 1.0) / 2.0).max(0.0).powf(1.0 / self.gamma) - 1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// `[height, width]`
    pub image_size: [usize; 2],
    pub n_scenes: usize,
    pub shift_max: usize,
    /// Inclusive `[min, max]` sprites per frame.
    pub sprite_count_range: [usize; 2],
    /// Inclusive `[min, max]` long side of a sprite in pixels.
    pub sprite_size_range: [usize; 2],
    pub jitter_amplitude: f64,
    pub adverse: AdverseTransform,
    pub route_spacing: f64,
    pub gps_noise_std: f64,
    /// Upper bound on spurious low-confidence proposals per frame.
    pub spurious_proposals_max: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: [48, 48],
            n_scenes: 250,
            shift_max: 2,
            sprite_count_range: [1, 3],
            sprite_size_range: [6, 14],
            jitter_amplitude: 0.25,
            adverse: AdverseTransform::default(),
            route_spacing: 10.0,
            gps_noise_std: 1.0,
            spurious_proposals_max: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Every misalignment factor off: no shift, sprites, jitter, or noise.
    pub fn all_factors_off(mut self) -> Self {
        self.shift_max = 0;
        self.sprite_count_range = [0, 0];
        self.jitter_amplitude = 0.0;
        self.adverse.noise_std = 0.0;
        self.spurious_proposals_max = 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        let cfg = |m: String| Err(Error::Config(m));
        if h < 4 || w < 4 {
            return cfg(format!("image_size {h}x{w} is too small"));
        }
        if self.n_scenes == 0 {
            return cfg("n_scenes must be positive".into());
        }
        let [cmin, cmax] = self.sprite_count_range;
        if cmin > cmax {
            return cfg(format!("sprite_count_range [{cmin}, {cmax}] is empty"));
        }
        let [smin, smax] = self.sprite_size_range;
        if smin < 3 || smin > smax || smax + 2 > h.min(w) {
            return cfg(format!(
                "sprite_size_range [{smin}, {smax}] must satisfy 3 <= min <= max <= {}",
                h.min(w) - 2
            ));
        }
        if 2 * self.shift_max >= h.min(w) {
            return cfg(format!(
                "shift_max {} too large for {h}x{w}",
                self.shift_max
            ));
        }
        if !(0.0..=1.0).contains(&self.jitter_amplitude) {
            return cfg("jitter_amplitude must lie in [0, 1]".into());
        }
        if !(self.route_spacing > 0.0) || !(self.gps_noise_std >= 0.0) {
            return cfg("route_spacing must be positive and gps_noise_std non-negative".into());
        }
        self.adverse.validate()
    }
}

pub fn apply_adverse(image: &Image, t: &AdverseTransform) -> Result<Image> {
    t.validate()?;
    check_rgb(image)?;
    Ok(Image::from_fn(
        3,
        image.height(),
        image.width(),
        |c, i, j| t.color(c, image.get(c, i, j)),
    ))
}

/// Analytic inverse of the deterministic adverse color map.
pub fn invert_adverse(image: &Image, t: &AdverseTransform) -> Result<Image> {
    t.validate()?;
    check_rgb(image)?;
    Ok(Image::from_fn(
        3,
        image.height(),
        image.width(),
        |c, i, j| t.invert(c, image.get(c, i, j)),
    ))
}

fn check_rgb(image: &Image) -> Result<()> {
    if image.channels() != 3 {
        return Err(invalid!(
            "adverse transform needs 3 channels, got {}",
            image.channels()
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl SpriteClass {
    pub const ALL: [SpriteClass; 3] = [
        SpriteClass::Car,
        SpriteClass::Pedestrian,
        SpriteClass::Cyclist,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SpriteClass::Car => "car",
            SpriteClass::Pedestrian => "pedestrian",
            SpriteClass::Cyclist => "cyclist",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub class: SpriteClass,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub color: [f64; 3],
}

impl Sprite {
    pub fn covers(&self, i: usize, j: usize) -> bool {
        if i < self.top
            || j < self.left
            || i >= self.top + self.height
            || j >= self.left + self.width
        {
            return false;
        }
        let y = (i - self.top) as f64 + 0.5;
        let x = (j - self.left) as f64 + 0.5;
        let (h, w) = (self.height as f64, self.width as f64);
        let in_ellipse = |cy: f64, cx: f64, ry: f64, rx: f64| {
            ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
        };
        match self.class {
            SpriteClass::Car => true,
            SpriteClass::Pedestrian => in_ellipse(h / 2.0, w / 2.0, h / 2.0, w / 2.0),
            SpriteClass::Cyclist => {
                in_ellipse(0.35 * h, w / 2.0, 0.35 * h, 0.3 * w) || y >= 0.6 * h
            }
        }
    }

    fn shade(&self, c: usize, i: usize) -> f64 {
        let y = (i - self.top) as f64 / self.height as f64;
        match self.class {
            SpriteClass::Car if y < 0.4 => 0.5 * self.color[c] - 0.4,
            SpriteClass::Cyclist if y >= 0.6 => -0.8,
            _ => self.color[c],
        }
    }

    pub fn bitmap(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w).map(|p| self.covers(p / w, p % w)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Blob {
    center: [f64; 2],
    radius: f64,
    amplitude: f64,
}

/// One rendered scene in float precision.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRender {
    pub background: Image,
    pub source: Image,
    pub target: Image,
    /// Benign-domain background under the source's shift, without sprites,
    /// jitter, or noise.
    pub clean: Image,
    pub source_mask: BinaryMask,
    pub target_mask: BinaryMask,
    /// `(dy, dx)`: source pixel `(i, j)` shows background pixel `(i − dy, j − dx)`.
    pub shift: (i64, i64),
    pub source_sprites: Vec<Sprite>,
    pub target_sprites: Vec<Sprite>,
}

const STREAM_SCENE: u64 = 0;
const STREAM_PROPOSALS: u64 = 1;
const STREAM_POSES: u64 = 2;

fn stream_rng(seed: u64, kind: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 48) | index);
    rng
}

fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = i as f64 / cell;
        let (y0, ty) = (y.floor() as usize, smooth(y.fract()));
        for j in 0..w {
            let x = j as f64 / cell;
            let (x0, tx) = (x.floor() as usize, smooth(x.fract()));
            let at = |a: usize, b: usize| lattice[a * gw + b];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn render_background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let s = h.min(w) as f64;
    let octaves = [(s / 3.0, 0.5), (s / 6.0, 0.3), (s / 12.0, 0.2)];
    let mut lum = vec![0.0; h * w];
    for (cell, amp) in octaves {
        for (l, n) in lum.iter_mut().zip(value_noise(rng, h, w, cell.max(2.0))) {
            *l += amp * n;
        }
    }
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.35..0.35));
    let chroma: Vec<Vec<f64>> = (0..3)
        .map(|_| value_noise(rng, h, w, (s / 4.0).max(2.0)))
        .collect();
    let mut img = Image::from_fn(3, h, w, |c, i, j| {
        let p = i * w + j;
        (0.7 * lum[p] + tint[c] + 0.2 * chroma[c][p]).clamp(-1.0, 1.0)
    });

    // building-like vertical strips along the top
    for _ in 0..rng.random_range(1..=3) {
        let width = rng.random_range(3..=(w / 5).max(3));
        let left = rng.random_range(0..w - width);
        let bottom = rng.random_range(h / 4..=h / 2);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
        for (c, &tone) in color.iter().enumerate() {
            for i in 0..bottom {
                for j in left..left + width {
                    let v = tone + 0.15 * lum[i * w + j];
                    img.set(c, i, j, v.clamp(-1.0, 1.0));
                }
            }
        }
    }

    // road-like bands with a dashed center line
    for _ in 0..rng.random_range(1..=2) {
        let center = rng.random_range(0.45..0.9) * h as f64;
        let slope = rng.random_range(-0.25..0.25);
        let half = rng.random_range(2.5..6.0);
        let phase = rng.random_range(0..8usize);
        for i in 0..h {
            for j in 0..w {
                let d = i as f64 + 0.5 - (center + slope * (j as f64 - w as f64 / 2.0));
                if d.abs() >= half {
                    continue;
                }
                let v = if d.abs() < 0.6 && ((j + phase) / 4) % 2 == 0 {
                    0.85
                } else {
                    -0.45 + 0.15 * lum[i * w + j]
                };
                for c in 0..3 {
                    img.set(c, i, j, v);
                }
            }
        }
    }
    img
}

fn sample_sprites(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<Sprite> {
    let [h, w] = cfg.image_size;
    let [cmin, cmax] = cfg.sprite_count_range;
    let [smin, smax] = cfg.sprite_size_range;
    let n = rng.random_range(cmin..=cmax);
    (0..n)
        .map(|_| {
            let class = SpriteClass::ALL[rng.random_range(0..3)];
            let size = rng.random_range(smin..=smax);
            let short = |f: f64| ((size as f64 * f).round() as usize).max(2);
            let (height, width) = match class {
                SpriteClass::Car => (short(0.6), size),
                SpriteClass::Pedestrian => (size, short(0.4)),
                SpriteClass::Cyclist => (size, short(0.7)),
            };
            let top = rng.random_range(1..=h - 1 - height);
            let left = rng.random_range(1..=w - 1 - width);
            let color = std::array::from_fn(|_| rng.random_range(-0.9..0.9));
            Sprite {
                class,
                top,
                left,
                height,
                width,
                color,
            }
        })
        .collect()
}

fn sample_blobs(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<Blob> {
    if cfg.jitter_amplitude == 0.0 {
        return Vec::new();
    }
    let [h, w] = cfg.image_size;
    let s = h.min(w) as f64;
    (0..3)
        .map(|_| Blob {
            center: [
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
            ],
            radius: rng.random_range(0.15..0.35) * s,
            amplitude: cfg.jitter_amplitude
                * rng.random_range(0.5..1.0)
                * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        })
        .collect()
}

fn shift_image(img: &Image, (dy, dx): (i64, i64)) -> Image {
    let (h, w) = (img.height() as i64, img.width() as i64);
    Image::from_fn(img.channels(), img.height(), img.width(), |c, i, j| {
        let (si, sj) = (i as i64 - dy, j as i64 - dx);
        if (0..h).contains(&si) && (0..w).contains(&sj) {
            img.get(c, si as usize, sj as usize)
        } else {
            0.0
        }
    })
}

/// Multiplicative luminance blobs, then sprites painted on top.
fn decorate(base: &Image, blobs: &[Blob], sprites: &[Sprite]) -> (Image, BinaryMask) {
    let (h, w) = (base.height(), base.width());
    let mut img = base.clone();
    if !blobs.is_empty() {
        for i in 0..h {
            for j in 0..w {
                let f = 1.0
                    + blobs
                        .iter()
                        .map(|b| {
                            let d2 = (i as f64 + 0.5 - b.center[0]).powi(2)
                                + (j as f64 + 0.5 - b.center[1]).powi(2);
                            b.amplitude * (-d2 / (2.0 * b.radius * b.radius)).exp()
                        })
                        .sum::<f64>();
                for c in 0..3 {
                    let u = (img.get(c, i, j) + 1.0) / 2.0 * f;
                    img.set(c, i, j, (2.0 * u - 1.0).clamp(-1.0, 1.0));
                }
            }
        }
    }
    let mut mask = BinaryMask::all_background(h, w);
    for s in sprites {
        for i in s.top..s.top + s.height {
            for j in s.left..s.left + s.width {
                if s.covers(i, j) {
                    mask.set_background(i, j, false);
                    for c in 0..3 {
                        img.set(c, i, j, s.shade(c, i));
                    }
                }
            }
        }
    }
    (img, mask)
}

/// Render scene `index` in float precision with its sampled shift.
pub fn render_scene(cfg: &SynthConfig, index: usize) -> Result<SceneRender> {
    render_scene_inner(cfg, index, None)
}

/// As [`render_scene`] but with the camera shift forced to `shift`.
pub fn render_scene_with_shift(
    cfg: &SynthConfig,
    index: usize,
    shift: (i64, i64),
) -> Result<SceneRender> {
    render_scene_inner(cfg, index, Some(shift))
}

fn render_scene_inner(
    cfg: &SynthConfig,
    index: usize,
    forced: Option<(i64, i64)>,
) -> Result<SceneRender> {
    cfg.validate()?;
    let [h, w] = cfg.image_size;
    let mut rng = stream_rng(cfg.seed, STREAM_SCENE, index as u64);
    let background = render_background(&mut rng, h, w);
    let m = cfg.shift_max as i64;
    let sampled = (rng.random_range(-m..=m), rng.random_range(-m..=m));
    let shift = forced.unwrap_or(sampled);
    if shift.0.unsigned_abs() as usize >= h || shift.1.unsigned_abs() as usize >= w {
        return Err(invalid!("shift {shift:?} exceeds the {h}x{w} frame"));
    }

    let target_sprites = sample_sprites(&mut rng, cfg);
    let target_blobs = sample_blobs(&mut rng, cfg);
    let source_sprites = sample_sprites(&mut rng, cfg);
    let source_blobs = sample_blobs(&mut rng, cfg);

    let (target, target_mask) = decorate(&background, &target_blobs, &target_sprites);
    let clean = shift_image(&background, shift);
    let (benign_source, source_mask) = decorate(&clean, &source_blobs, &source_sprites);

    let t = &cfg.adverse;
    let mut source = apply_adverse(&benign_source, t)?;
    if t.noise_std > 0.0 {
        let normal = Normal::new(0.0, t.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in source.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in source.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(SceneRender {
        background,
        source,
        target,
        clean,
        source_mask,
        target_mask,
        shift,
        source_sprites,
        target_sprites,
    })
}

/// Simulated detector output: every true sprite with confidence in
/// `[0.35, 1)`, plus spurious low-confidence boxes on the background.
fn simulate_proposals(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    sprites: &[Sprite],
) -> Result<InstanceProposals> {
    let [h, w] = cfg.image_size;
    let mut regions: Vec<Region> = sprites
        .iter()
        .map(|s| Region {
            bitmap: s.bitmap(h, w),
            confidence: rng.random_range(0.35..1.0),
            class_label: s.class.label().to_string(),
        })
        .collect();
    for _ in 0..rng.random_range(0..=cfg.spurious_proposals_max) {
        let (bh, bw) = (
            rng.random_range(3..=8.min(h - 1)),
            rng.random_range(3..=8.min(w - 1)),
        );
        let (top, left) = (rng.random_range(0..=h - bh), rng.random_range(0..=w - bw));
        regions.push(Region {
            bitmap: (0..h * w)
                .map(|p| (top..top + bh).contains(&(p / w)) && (left..left + bw).contains(&(p % w)))
                .collect(),
            confidence: rng.random_range(0.05..0.6),
            class_label: SpriteClass::ALL[rng.random_range(0..3)].label().to_string(),
        });
    }
    InstanceProposals::new(h, w, regions)
}

fn poses(cfg: &SynthConfig, traversal: &str, kind: u64) -> Result<PoseLog> {
    let mut rng = stream_rng(cfg.seed, STREAM_POSES, kind);
    let normal = Normal::new(0.0, cfg.gps_noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let frames = (0..cfg.n_scenes)
        .map(|k| PoseFrame {
            frame_id: frame_id(k),
            position: [
                k as f64 * cfg.route_spacing + normal.sample(&mut rng),
                normal.sample(&mut rng),
            ],
            timestamp: k as f64,
        })
        .collect();
    PoseLog::new(traversal, frames)
}

pub fn frame_id(index: usize) -> String {
    format!("{index:05}")
}

/// Images, masks, proposals, and poses of one traversal, in frame order.
#[derive(Clone, Debug, PartialEq)]
pub struct TraversalData {
    pub poses: PoseLog,
    pub images: Vec<Image>,
    pub masks: Vec<BinaryMask>,
    pub proposals: Vec<InstanceProposals>,
}

impl TraversalData {
    pub fn index_of(&self, frame_id: &str) -> Option<usize> {
        self.poses
            .frames()
            .iter()
            .position(|f| f.frame_id == frame_id)
    }
}

/// One scene's frames from both traversals plus its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPairRecord {
    pub frame_id: String,
    pub source_image: Image,
    pub target_image: Image,
    pub clean_aligned_target: Image,
    pub source_mask: BinaryMask,
    pub target_mask: BinaryMask,
    pub source_pose: [f64; 2],
    pub target_pose: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub source: TraversalData,
    pub target: TraversalData,
    /// Clean ground truth per source frame.
    pub clean: Vec<Image>,
    pub shifts: Vec<(i64, i64)>,
    /// Content hash of the directory the dataset was loaded from.
    pub hash: String,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn record(&self, k: usize) -> SynthPairRecord {
        SynthPairRecord {
            frame_id: frame_id(k),
            source_image: self.source.images[k].clone(),
            target_image: self.target.images[k].clone(),
            clean_aligned_target: self.clean[k].clone(),
            source_mask: self.source.masks[k].clone(),
            target_mask: self.target.masks[k].clone(),
            source_pose: self.source.poses.frames()[k].position,
            target_pose: self.target.poses.frames()[k].position,
        }
    }

    pub fn load(dir: &Path) -> Result<SynthDataset> {
        let text = io::read_text(&dir.join("manifest"))?;
        let (config, shifts) = parse_manifest(&text).map_err(|e| match e {
            Error::InvalidInput(m) | Error::Config(m) => {
                Error::Integrity(format!("{}/manifest: {m}", dir.display()))
            }
            other => other,
        })?;
        let [h, w] = config.image_size;
        let load_traversal = |name: &str| -> Result<TraversalData> {
            let poses = PoseLog::read(&dir.join("poses").join(format!("{name}.csv")))?;
            if poses.frames().len() != config.n_scenes || poses.traversal_id() != name {
                return Err(Error::Integrity(format!(
                    "pose log of {name} does not match the manifest"
                )));
            }
            let mut data = TraversalData {
                poses,
                images: Vec::new(),
                masks: Vec::new(),
                proposals: Vec::new(),
            };
            for f in data.poses.frames() {
                let id = &f.frame_id;
                let img = io::read_image(&dir.join("images").join(name).join(format!("{id}.png")))?;
                let mask =
                    BinaryMask::read_png(&dir.join("masks").join(name).join(format!("{id}.png")))?;
                let props = InstanceProposals::read(&dir.join("proposals").join(name), id)?;
                if img.shape() != (h, w, 3) || mask.shape() != (h, w) || props.shape() != (h, w) {
                    return Err(Error::Integrity(format!(
                        "{name}/{id}: shape does not match {h}x{w}"
                    )));
                }
                data.images.push(img);
                data.masks.push(mask);
                data.proposals.push(props);
            }
            Ok(data)
        };
        let source = load_traversal(SOURCE_TRAVERSAL)?;
        let target = load_traversal(TARGET_TRAVERSAL)?;
        let clean = (0..config.n_scenes)
            .map(|k| io::read_image(&dir.join("clean").join(format!("{}.png", frame_id(k)))))
            .collect::<Result<Vec<_>>>()?;
        Ok(SynthDataset {
            config,
            source,
            target,
            clean,
            shifts,
            hash: io::hash_tree(dir)?,
        })
    }
}

fn manifest_text(cfg: &SynthConfig, shifts: &[(i64, i64)]) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "format = {MANIFEST_FORMAT}");
    let _ = writeln!(s, "source_traversal = {SOURCE_TRAVERSAL}");
    let _ = writeln!(s, "target_traversal = {TARGET_TRAVERSAL}");
    let _ = writeln!(s, "frames = {}", shifts.len());
    s.push_str("\n[config]\n");
    s.push_str(&config::echo(cfg)?);
    s.push_str("\n[frames]\nframe_id,shift_dy,shift_dx\n");
    for (k, (dy, dx)) in shifts.iter().enumerate() {
        let _ = writeln!(s, "{},{dy},{dx}", frame_id(k));
    }
    Ok(s)
}

fn parse_manifest(text: &str) -> Result<(SynthConfig, Vec<(i64, i64)>)> {
    let (head, rest) = text
        .split_once("\n[config]\n")
        .ok_or_else(|| invalid!("missing [config] block"))?;
    if head.lines().next().map(str::trim) != Some(&format!("format = {MANIFEST_FORMAT}")) {
        return Err(invalid!("unsupported manifest format"));
    }
    let (cfg_text, frames) = rest
        .split_once("\n[frames]\n")
        .ok_or_else(|| invalid!("missing [frames] block"))?;
    let config: SynthConfig = config::parse_str(cfg_text)?;
    config.validate()?;
    let mut lines = frames.lines();
    if lines.next().map(str::trim) != Some("frame_id,shift_dy,shift_dx") {
        return Err(invalid!("missing frame table header"));
    }
    let mut shifts = Vec::new();
    for (k, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, dy, dx] = cols[..] else {
            return Err(invalid!("bad frame row {line:?}"));
        };
        if id != frame_id(k) {
            return Err(invalid!("frame row {k} has id {id:?}"));
        }
        let parse = |v: &str| v.parse::<i64>().map_err(|e| invalid!("shift {v:?}: {e}"));
        shifts.push((parse(dy)?, parse(dx)?));
    }
    if shifts.len() != config.n_scenes {
        return Err(invalid!(
            "{} frame rows for {} scenes",
            shifts.len(),
            config.n_scenes
        ));
    }
    Ok((config, shifts))
}

/// Render every scene, write the dataset layout under `dir`, and load it
/// back (so in-memory images carry the on-disk 8-bit quantization).
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<SynthDataset> {
    cfg.validate()?;
    let source_poses = poses(cfg, SOURCE_TRAVERSAL, 0)?;
    let target_poses = poses(cfg, TARGET_TRAVERSAL, 1)?;
    let mut shifts = Vec::with_capacity(cfg.n_scenes);
    for k in 0..cfg.n_scenes {
        let scene = render_scene(cfg, k)?;
        let id = frame_id(k);
        let png = format!("{id}.png");
        io::write_image(
            &dir.join("images").join(SOURCE_TRAVERSAL).join(&png),
            &scene.source,
        )?;
        io::write_image(
            &dir.join("images").join(TARGET_TRAVERSAL).join(&png),
            &scene.target,
        )?;
        io::write_image(&dir.join("clean").join(&png), &scene.clean)?;
        scene
            .source_mask
            .write_png(&dir.join("masks").join(SOURCE_TRAVERSAL).join(&png))?;
        scene
            .target_mask
            .write_png(&dir.join("masks").join(TARGET_TRAVERSAL).join(&png))?;

        let mut rng = stream_rng(cfg.seed, STREAM_PROPOSALS, k as u64);
        for (name, sprites) in [
            (SOURCE_TRAVERSAL, &scene.source_sprites),
            (TARGET_TRAVERSAL, &scene.target_sprites),
        ] {
            let dir = dir.join("proposals").join(name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            simulate_proposals(&mut rng, cfg, sprites)?.write(&dir, &id)?;
        }
        shifts.push(scene.shift);
    }
    source_poses.write(&dir.join("poses").join(format!("{SOURCE_TRAVERSAL}.csv")))?;
    target_poses.write(&dir.join("poses").join(format!("{TARGET_TRAVERSAL}.csv")))?;
    io::write_text(&dir.join("manifest"), &manifest_text(cfg, &shifts)?)?;
    SynthDataset::load(dir)
}
