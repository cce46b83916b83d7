//! Synthetic indoor scenes: a textured floor with composited obstacles.
//!
//! The floor is a low-frequency intensity ramp plus per-pixel Gaussian
//! noise. Obstacles are axis-aligned rectangles and thin bars (chair-leg
//! like), each drawn darker than the floor around it. The absolute floor and
//! obstacle intensity bands overlap, so a global threshold cannot separate
//! them and the model has to use local contrast.
//!
//! Pixel values are quantized to multiples of 1/65535 so that a 16-bit PGM
//! export reproduces them exactly.

pub mod manifest;
pub mod pgm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{CLASS_BLOCKED, CLASS_FREE};

pub const PIXEL_LEVELS: f64 = 65535.0;
/// Noise-free floor intensities lie in this band.
pub const FLOOR_BAND: (f64, f64) = (0.35, 0.85);
/// Noise-free obstacle intensities lie in this band.
pub const OBSTACLE_BAND: (f64, f64) = (0.10, 0.55);
/// Accepted free-pixel fraction of a challenging scene (exclusive bounds).
pub const CHALLENGING_FREE_FRACTION: (f64, f64) = (0.2, 0.9);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// Traversable scene: at most one slab obstacle near a border.
    Positive,
    /// Cluttered scene with several obstacles, some of them thin.
    Challenging,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Positive => "positive",
            Difficulty::Challenging => "challenging",
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Difficulty::Positive),
            "challenging" => Ok(Difficulty::Challenging),
            other => Err(Error::Config(format!("unknown difficulty {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub difficulty: Difficulty,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            channels: 1,
            difficulty: Difficulty::Positive,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "scene must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::Config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub difficulty: Difficulty,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[H, W, C]` in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `H·W` mask, 1 = free.
    pub mask: Vec<u8>,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn free_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m == CLASS_FREE).count() as f64 / self.mask.len() as f64
    }
}

/// Axis-aligned obstacle footprint, half-open in both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
    pub intensity: f64,
    pub thin: bool,
}

/// Noise-free layout of a scene; [`generate_scene`] renders it.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub height: usize,
    pub width: usize,
    pub floor_offset: f64,
    pub floor_slope: (f64, f64),
    pub obstacles: Vec<Obstacle>,
}

impl SceneLayout {
    pub fn floor_base(&self, y: usize, x: usize) -> f64 {
        let fy = y as f64 / (self.height - 1) as f64 - 0.5;
        let fx = x as f64 / (self.width - 1) as f64 - 0.5;
        self.floor_offset + self.floor_slope.0 * fy + self.floor_slope.1 * fx
    }

    /// Index of the topmost obstacle covering `(y, x)`.
    pub fn covering(&self, y: usize, x: usize) -> Option<usize> {
        self.obstacles
            .iter()
            .rposition(|o| (o.top..o.bottom).contains(&y) && (o.left..o.right).contains(&x))
    }

    /// Noise-free intensity at `(y, x)`.
    pub fn base_intensity(&self, y: usize, x: usize) -> f64 {
        match self.covering(y, x) {
            Some(i) => self.obstacles[i].intensity,
            None => self.floor_base(y, x),
        }
    }

    pub fn mask(&self) -> Vec<u8> {
        let mut mask = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                mask.push(if self.covering(y, x).is_some() {
                    CLASS_BLOCKED
                } else {
                    CLASS_FREE
                });
            }
        }
        mask
    }

    fn free_fraction(&self) -> f64 {
        let mask = self.mask();
        mask.iter().filter(|&&m| m == CLASS_FREE).count() as f64 / mask.len() as f64
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * PIXEL_LEVELS).round() / PIXEL_LEVELS
}

fn random_floor(rng: &mut ChaCha8Rng, height: usize, width: usize) -> SceneLayout {
    SceneLayout {
        height,
        width,
        floor_offset: rng.gen_range(0.55..0.70),
        floor_slope: (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)),
        obstacles: Vec::new(),
    }
}

fn obstacle_intensity(rng: &mut ChaCha8Rng, layout: &SceneLayout, top: usize, left: usize, bottom: usize, right: usize) -> f64 {
    let floor = layout.floor_base((top + bottom - 1) / 2, (left + right - 1) / 2);
    let contrast = rng.gen_range(0.2..0.35);
    (floor - contrast).clamp(OBSTACLE_BAND.0, OBSTACLE_BAND.1)
}

fn place_rect(rng: &mut ChaCha8Rng, layout: &mut SceneLayout, h: usize, w: usize, top: usize, left: usize, thin: bool) {
    let bottom = (top + h).min(layout.height);
    let right = (left + w).min(layout.width);
    let intensity = obstacle_intensity(rng, layout, top, left, bottom, right);
    layout.obstacles.push(Obstacle {
        top,
        left,
        bottom,
        right,
        intensity,
        thin,
    });
}

/// Rounds down to the 2-pixel grid the model predicts on.
fn snap(v: usize) -> usize {
    v & !1
}

fn positive_layout(rng: &mut ChaCha8Rng, height: usize, width: usize) -> SceneLayout {
    let mut layout = random_floor(rng, height, width);
    if rng.gen_bool(0.75) {
        // A slab near one of the four borders, inset by up to a quarter of
        // the shorter side.
        let depth = snap(rng.gen_range(2..=(height.min(width) / 4).max(2)));
        let side = rng.gen_range(0..4);
        let span = if side < 2 { width } else { height };
        let length = snap(rng.gen_range(span / 3..=span));
        let (h, w) = if side < 2 { (depth, length) } else { (length, depth) };
        let inset = snap(rng.gen_range(0..=height.min(width) / 4));
        let (top, left) = match side {
            0 => (inset, snap(rng.gen_range(0..=width - w))),
            1 => (height - h - inset, snap(rng.gen_range(0..=width - w))),
            2 => (snap(rng.gen_range(0..=height - h)), inset),
            _ => (snap(rng.gen_range(0..=height - h)), width - w - inset),
        };
        place_rect(rng, &mut layout, h, w, top, left, false);
    }
    layout
}

fn challenging_layout(rng: &mut ChaCha8Rng, height: usize, width: usize) -> SceneLayout {
    loop {
        let mut layout = random_floor(rng, height, width);
        let count = rng.gen_range(3..=8);
        let thin_count = rng.gen_range(1..=2);
        for i in 0..count {
            if i < thin_count {
                // Thin bar, vertical or horizontal, 1–2 px wide.
                let thickness = if rng.gen_bool(0.3) { 1 } else { 2 };
                let length = snap(rng.gen_range(height / 4..=height / 2));
                if rng.gen_bool(0.7) {
                    let top = snap(rng.gen_range(0..=height - length));
                    let left = snap(rng.gen_range(0..=width - thickness));
                    place_rect(rng, &mut layout, length, thickness, top, left, true);
                } else {
                    let top = snap(rng.gen_range(0..=height - thickness));
                    let left = snap(rng.gen_range(0..=width - length));
                    place_rect(rng, &mut layout, thickness, length, top, left, true);
                }
            } else {
                let h = snap(rng.gen_range(3..=(height / 3).max(3)) + 1);
                let w = snap(rng.gen_range(3..=(width / 3).max(3)) + 1);
                let top = snap(rng.gen_range(0..=height - h));
                let left = snap(rng.gen_range(0..=width - w));
                place_rect(rng, &mut layout, h, w, top, left, false);
            }
        }
        let free = layout.free_fraction();
        if free > CHALLENGING_FREE_FRACTION.0 && free < CHALLENGING_FREE_FRACTION.1 {
            return layout;
        }
    }
}

/// Noise-free layout for `cfg`; deterministic in `cfg.seed`.
pub fn scene_layout(cfg: &SceneConfig) -> Result<SceneLayout> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(match cfg.difficulty {
        Difficulty::Positive => positive_layout(&mut rng, cfg.height, cfg.width),
        Difficulty::Challenging => challenging_layout(&mut rng, cfg.height, cfg.width),
    })
}

pub fn render(layout: &SceneLayout, cfg: &SceneConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let (h, w, c) = (layout.height, layout.width, cfg.channels);
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let base = layout.base_intensity(y, x);
            for ch in 0..c {
                // Slight per-channel tint for colour scenes.
                let tint = if c == 1 { 0.0 } else { 0.02 * (ch as f64 - 1.0) };
                let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(quantize(base + tint + n));
            }
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![h, w, c], data)?,
        mask: layout.mask(),
        meta: SampleMeta {
            difficulty: cfg.difficulty,
            seed: cfg.seed,
        },
    })
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<Sample> {
    let layout = scene_layout(cfg)?;
    render(&layout, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Positive scenes only.
    pub train: Vec<Sample>,
    /// Challenging scenes only.
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub n_positive: usize,
    pub n_challenging: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            n_positive: 400,
            n_challenging: 100,
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample seeds: consecutive offsets from a base derived from
/// `seed`, train first, so no seed is shared across the two splits.
pub fn sample_seeds(cfg: &SplitConfig) -> (Vec<u64>, Vec<u64>) {
    let base = splitmix64(cfg.seed);
    let train = (0..cfg.n_positive as u64).map(|i| base.wrapping_add(i)).collect();
    let test = (0..cfg.n_challenging as u64)
        .map(|i| base.wrapping_add(cfg.n_positive as u64 + i))
        .collect();
    (train, test)
}

/// Train on positive scenes, test on challenging ones.
pub fn generate_split(cfg: &SplitConfig) -> Result<Dataset> {
    if cfg.n_positive == 0 || cfg.n_challenging == 0 {
        return Err(Error::Config("split counts must be at least 1".into()));
    }
    let (train_seeds, test_seeds) = sample_seeds(cfg);
    let make = |seed: u64, difficulty: Difficulty| {
        generate_scene(&SceneConfig {
            seed,
            difficulty,
            ..cfg.scene.clone()
        })
    };
    Ok(Dataset {
        train: train_seeds
            .into_iter()
            .map(|s| make(s, Difficulty::Positive))
            .collect::<Result<_>>()?,
        test: test_seeds
            .into_iter()
            .map(|s| make(s, Difficulty::Challenging))
            .collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(difficulty: Difficulty, seed: u64) -> SceneConfig {
        SceneConfig {
            difficulty,
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn empty_positive_scene_is_all_free() {
        let seed = (0..100)
            .find(|&s| scene_layout(&cfg(Difficulty::Positive, s)).unwrap().obstacles.is_empty())
            .expect("some positive scene has no obstacle");
        let sample = generate_scene(&cfg(Difficulty::Positive, seed)).unwrap();
        assert!(sample.mask.iter().all(|&m| m == CLASS_FREE));
    }

    #[test]
    fn positive_scenes_have_at_most_one_border_obstacle() {
        for seed in 0..200 {
            let layout = scene_layout(&cfg(Difficulty::Positive, seed)).unwrap();
            assert!(layout.obstacles.len() <= 1);
            for o in &layout.obstacles {
                let near = o.top <= 8 || o.left <= 8 || o.bottom >= 24 || o.right >= 24;
                assert!(near, "{o:?}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&cfg(Difficulty::Challenging, 42)).unwrap();
        let b = generate_scene(&cfg(Difficulty::Challenging, 42)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg(Difficulty::Challenging, 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn challenging_free_fraction_in_range() {
        for seed in 0..1000 {
            let s = generate_scene(&cfg(Difficulty::Challenging, seed)).unwrap();
            let f = s.free_fraction();
            assert!(f > 0.2 && f < 0.9, "seed {seed}: {f}");
            let layout = scene_layout(&cfg(Difficulty::Challenging, seed)).unwrap();
            assert!((3..=8).contains(&layout.obstacles.len()));
            assert!(layout.obstacles.iter().any(|o| o.thin
                && ((o.right - o.left) <= 2 || (o.bottom - o.top) <= 2)));
        }
    }

    #[test]
    fn base_intensities_lie_in_their_bands() {
        for seed in 0..300 {
            for d in [Difficulty::Positive, Difficulty::Challenging] {
                let layout = scene_layout(&cfg(d, seed)).unwrap();
                let mask = layout.mask();
                for y in 0..32 {
                    for x in 0..32 {
                        let v = layout.base_intensity(y, x);
                        let band = if mask[y * 32 + x] == CLASS_FREE {
                            FLOOR_BAND
                        } else {
                            OBSTACLE_BAND
                        };
                        assert!(v >= band.0 && v <= band.1, "seed {seed} ({y},{x}) {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn pixels_are_quantized_and_in_range() {
        let s = generate_scene(&cfg(Difficulty::Challenging, 7)).unwrap();
        for &v in s.image.data() {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(quantize(v), v);
        }
        assert!(s.mask.iter().all(|&m| m <= 1));
    }

    #[test]
    fn colour_scenes_have_three_channels() {
        let s = generate_scene(&SceneConfig {
            channels: 3,
            ..cfg(Difficulty::Positive, 1)
        })
        .unwrap();
        assert_eq!(s.image.shape(), &[32, 32, 3]);
    }

    #[test]
    fn split_counts_and_disjoint_seeds() {
        let split = SplitConfig {
            n_positive: 40,
            n_challenging: 10,
            ..SplitConfig::default()
        };
        let ds = generate_split(&split).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (40, 10));
        assert!(ds.train.iter().all(|s| s.meta.difficulty == Difficulty::Positive));
        assert!(ds.test.iter().all(|s| s.meta.difficulty == Difficulty::Challenging));
        let mut seeds: Vec<u64> = ds.train.iter().chain(&ds.test).map(|s| s.meta.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 50);

        let (tr, te) = sample_seeds(&SplitConfig::default());
        assert_eq!((tr.len(), te.len()), (400, 100));
        assert!(generate_split(&SplitConfig { n_positive: 0, ..split }).is_err());
    }
}
