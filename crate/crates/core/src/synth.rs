//! Procedural texture patches with exact per-pixel ground truth.
//!
//! Each patch is split into 1 to `max_labels` Voronoi regions, one class
//! texture per region, optionally with a near-white band along one edge that
//! is labelled Background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::PatchRecord;
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::taxonomy::{self, BACKGROUND, NUM_CLASSES};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// Sinusoidal stripes; `period` in pixels, `angle` in degrees.
    Stripes { period: f32, angle: f32 },
    /// Dots on a square lattice.
    Dots { spacing: f32, radius: f32 },
    /// Smooth random blobs from a sum of a few cosines.
    Blobs { scale: f32 },
    /// Flat color.
    Flat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub code: String,
    pub pattern: Pattern,
    /// Base and accent colors in 0–255.
    pub base: [u8; 3],
    pub accent: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub recipes: Vec<Recipe>,
    pub train: usize,
    pub eval: usize,
    pub max_labels: usize,
    /// Expected fraction of Background pixels per patch.
    pub border_fraction: f32,
    /// Per-pixel noise std in 0–255 units.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 272,
            recipes: default_recipes(),
            train: 600,
            eval: 100,
            max_labels: 3,
            border_fraction: 0.15,
            noise: 4.0,
            seed: 42,
        }
    }
}

/// Four morphological classes with separated colors and pattern families.
pub fn default_recipes() -> Vec<Recipe> {
    let r = |code: &str, pattern, base, accent| Recipe {
        code: code.into(),
        pattern,
        base,
        accent,
    };
    vec![
        r(
            "E.M.S",
            Pattern::Stripes {
                period: 8.0,
                angle: 30.0,
            },
            [150, 40, 120],
            [210, 120, 190],
        ),
        r(
            "C.L",
            Pattern::Dots {
                spacing: 12.0,
                radius: 3.5,
            },
            [235, 160, 190],
            [90, 40, 130],
        ),
        r("S.M", Pattern::Blobs { scale: 24.0 }, [200, 90, 80], [120, 30, 40]),
        r(
            "M",
            Pattern::Stripes {
                period: 20.0,
                angle: 100.0,
            },
            [80, 140, 200],
            [40, 60, 120],
        ),
    ]
}

/// Smallest squared RGB distance between base colors that counts as distinct.
const MIN_COLOR_DIST2: i32 = 40 * 40;

fn color_dist2(a: [u8; 3], b: [u8; 3]) -> i32 {
    a.iter().zip(&b).map(|(&x, &y)| (x as i32 - y as i32).pow(2)).sum()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<Vec<usize>> {
        let n = self.recipes.len();
        if n == 0 || n > NUM_CLASSES {
            return Err(Error::Config(format!("need 1 to {} recipes, got {}", NUM_CLASSES, n)));
        }
        if self.size < 8 || self.max_labels == 0 || !(0.0..0.5).contains(&self.border_fraction) || self.noise < 0.0 {
            return Err(Error::Config(format!(
                "invalid synthetic settings (size {}, max_labels {}, border_fraction {}, noise {})",
                self.size, self.max_labels, self.border_fraction, self.noise
            )));
        }
        let mut classes = Vec::with_capacity(n);
        for r in &self.recipes {
            let j = taxonomy::index_of(&r.code)?;
            if j >= NUM_CLASSES || classes.contains(&j) {
                return Err(Error::Config(format!(
                    "recipe code {:?} is not a distinct tissue class",
                    r.code
                )));
            }
            classes.push(j);
        }
        for a in 0..n {
            for b in a + 1..n {
                let (ra, rb) = (&self.recipes[a], &self.recipes[b]);
                let same_family = std::mem::discriminant(&ra.pattern) == std::mem::discriminant(&rb.pattern);
                if same_family && color_dist2(ra.base, rb.base) < MIN_COLOR_DIST2 {
                    return Err(Error::Config(format!(
                        "recipes {} and {} share a pattern family and nearly the same color",
                        ra.code, rb.code
                    )));
                }
            }
        }
        Ok(classes)
    }
}

/// Texture mix factor in `[0, 1]` at pixel `(x, y)`; `phase` shifts it per patch.
fn pattern_value(p: &Pattern, x: f32, y: f32, phase: &[f32; 6]) -> f32 {
    match *p {
        Pattern::Stripes { period, angle } => {
            let (s, c) = angle.to_radians().sin_cos();
            let t = (x * c + y * s) / period * std::f32::consts::TAU + phase[0];
            0.5 + 0.5 * t.sin()
        }
        Pattern::Dots { spacing, radius } => {
            let fx = (x + phase[0] * spacing).rem_euclid(spacing) - spacing / 2.0;
            let fy = (y + phase[1] * spacing).rem_euclid(spacing) - spacing / 2.0;
            let d = (fx * fx + fy * fy).sqrt();
            (radius + 1.0 - d).clamp(0.0, 1.0)
        }
        Pattern::Blobs { scale } => {
            let f = std::f32::consts::TAU / scale;
            let v = (x * f * 0.9 + phase[0]).cos()
                + (y * f * 1.1 + phase[1]).cos()
                + ((x + y) * f * 0.7 + phase[2]).cos()
                + ((x - y) * f * 0.6 + phase[3]).cos();
            (0.5 + v / 8.0).clamp(0.0, 1.0)
        }
        Pattern::Flat => 0.0,
    }
}

/// One patch with its mask; labels are read back from the mask.
pub fn generate_patch(cfg: &SynthConfig, classes: &[usize], rng: &mut ChaCha8Rng, name: String) -> Result<PatchRecord> {
    let size = cfg.size;
    let n_regions = rng.random_range(1..=cfg.max_labels.min(classes.len()));
    let mut chosen: Vec<usize> = (0..classes.len()).collect();
    // partial Fisher-Yates for the first n_regions recipes
    for k in 0..n_regions {
        let pick = rng.random_range(k..chosen.len());
        chosen.swap(k, pick);
    }
    chosen.truncate(n_regions);
    let seeds: Vec<(f32, f32)> = (0..n_regions)
        .map(|_| (rng.random_range(0.0..size as f32), rng.random_range(0.0..size as f32)))
        .collect();
    let phases: Vec<[f32; 6]> = (0..n_regions)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..std::f32::consts::TAU)))
        .collect();
    // white band along one edge
    let band = if cfg.border_fraction > 0.0 {
        let width = (rng.random_range(0.0..2.0 * cfg.border_fraction) * size as f32) as usize;
        Some((rng.random_range(0..4u8), width))
    } else {
        None
    };
    let in_band = |x: usize, y: usize| match band {
        Some((0, w)) => y < w,
        Some((1, w)) => y >= size - w,
        Some((2, w)) => x < w,
        Some((_, w)) => x >= size - w,
        None => false,
    };
    let noise = Normal::new(0.0f32, cfg.noise.max(1e-6)).map_err(|e| Error::Config(e.to_string()))?;
    let mut image = vec![0.0f32; 3 * size * size];
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let rgb: [f32; 3] = if in_band(x, y) {
                mask[p] = BACKGROUND as u8;
                [252.0; 3]
            } else {
                let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
                let region = (0..n_regions)
                    .min_by(|&a, &b| {
                        let da = (seeds[a].0 - xf).powi(2) + (seeds[a].1 - yf).powi(2);
                        let db = (seeds[b].0 - xf).powi(2) + (seeds[b].1 - yf).powi(2);
                        da.total_cmp(&db)
                    })
                    .unwrap_or(0);
                let r = &cfg.recipes[chosen[region]];
                mask[p] = classes[chosen[region]] as u8;
                let t = pattern_value(&r.pattern, xf, yf, &phases[region]);
                std::array::from_fn(|c| r.base[c] as f32 * (1.0 - t) + r.accent[c] as f32 * t)
            };
            for c in 0..3 {
                let v = if cfg.noise > 0.0 {
                    rgb[c] + noise.sample(rng)
                } else {
                    rgb[c]
                };
                image[c * size * size + p] = (v.clamp(0.0, 255.0).round()) / 255.0;
            }
        }
    }
    let mask = LabelMask::new(size, size, mask)?;
    let mut labels = [false; NUM_CLASSES];
    for l in mask.labels_present() {
        if l < NUM_CLASSES {
            labels[l] = true;
        }
    }
    Ok(PatchRecord {
        name,
        image: Tensor::new(vec![3, size, size], image)?,
        labels,
        mask: Some(mask),
    })
}

/// Train and eval splits, deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Vec<PatchRecord>, Vec<PatchRecord>)> {
    let classes = cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut split = |prefix: &str, n: usize| -> Result<Vec<PatchRecord>> {
        (0..n)
            .map(|i| generate_patch(cfg, &classes, &mut rng, format!("{}_{:04}.png", prefix, i)))
            .collect()
    };
    let train = split("train", cfg.train)?;
    let eval = split("eval", cfg.eval)?;
    Ok((train, eval))
}

/// A uniform near-white patch (every pixel Background).
pub fn white_patch(size: usize) -> PatchRecord {
    PatchRecord {
        name: "white.png".into(),
        image: Tensor::ones(vec![3, size, size]),
        labels: [false; NUM_CLASSES],
        mask: Some(LabelMask::filled(size, size, BACKGROUND as u8).expect("valid mask")),
    }
}
