//! Procedural two-modality scenes with a controllable dominant modality.
//!
//! A scene is a union of random ellipses and rectangles. Each modality renders
//! the objects at its own contrast over its own sinusoidal background texture
//! with its own noise level. `dominance` moves contrast and noise in favour
//! of modality R (1.0) or T (0.0); 0.5 makes the two statistically alike.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::Sample;
use crate::tensor::Tensor;

/// Noise std of a modality with no advantage.
const NOISE_STD: f64 = 0.2;
/// Peak-to-peak amplitude of the background texture.
const TEXTURE_AMPLITUDE: f64 = 0.2;
const TEXTURE_BASE: f64 = 0.1;
/// Brightness added to the ring around objects at full cue strength.
const HALO_LEVEL: f64 = 0.35;
/// Width of that ring in pixels.
const HALO_WIDTH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Objects per scene are drawn uniformly from `1..=max_objects`.
    pub max_objects: usize,
    /// Advantage of modality R over T, in `[0, 1]`.
    pub dominance: f64,
    /// How strongly the background around objects reveals them, in `[0, 1]`.
    pub background_cue_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 32,
            width: 32,
            max_objects: 3,
            dominance: 0.9,
            background_cue_strength: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid("synthetic images must be at least 8x8"));
        }
        if !(1..=3).contains(&self.max_objects) {
            return Err(Error::invalid("max_objects must lie in 1..=3"));
        }
        if !(0.0..=1.0).contains(&self.dominance) {
            return Err(Error::invalid(format!("dominance {} outside [0, 1]", self.dominance)));
        }
        if !(0.0..=1.0).contains(&self.background_cue_strength) {
            return Err(Error::invalid(format!(
                "background cue strength {} outside [0, 1]",
                self.background_cue_strength
            )));
        }
        Ok(())
    }
}

fn draw_mask(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut mask = vec![0.0; h * w];
    let objects = rng.random_range(1..=cfg.max_objects);
    for _ in 0..objects {
        let cy = rng.random_range(0.2..0.8) * h as f64;
        let cx = rng.random_range(0.2..0.8) * w as f64;
        let ry = rng.random_range(0.12..0.28) * h as f64;
        let rx = rng.random_range(0.12..0.28) * w as f64;
        let ellipse = rng.random_bool(0.5);
        for i in 0..h {
            for j in 0..w {
                let dy = (i as f64 + 0.5 - cy) / ry;
                let dx = (j as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    mask[i * w + j] = 1.0;
                }
            }
        }
    }
    mask
}

/// Background pixels within `HALO_WIDTH` (Chebyshev) of an object.
fn halo(mask: &[f64], h: usize, w: usize) -> Vec<f64> {
    let r = HALO_WIDTH as isize;
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            if mask[(i as usize) * w + j as usize] > 0.5 {
                continue;
            }
            let near = (-r..=r).any(|di| {
                (-r..=r).any(|dj| {
                    let (y, x) = (i + di, j + dj);
                    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w
                        && mask[(y as usize) * w + x as usize] > 0.5
                })
            });
            if near {
                out[(i as usize) * w + j as usize] = 1.0;
            }
        }
    }
    out
}

fn texture(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let fy = rng.random_range(1.0..3.0);
    let fx = rng.random_range(1.0..3.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let arg = 2.0 * PI * (fy * i as f64 / h as f64 + fx * j as f64 / w as f64) + phase;
            out[i * w + j] = TEXTURE_BASE + TEXTURE_AMPLITUDE * 0.5 * (1.0 + arg.sin());
        }
    }
    out
}

/// Renders one modality: `GT * signal + (1 - GT) * (texture + cue * halo) + noise`,
/// clipped to `[0, 1]`.
fn render(
    mask: &[f64],
    halo: &[f64],
    cfg: &SynthConfig,
    advantage: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (h, w) = (cfg.height, cfg.width);
    let signal = 0.5 + 0.5 * advantage;
    let noise = Normal::new(0.0, NOISE_STD * (1.0 - 0.5 * advantage)).expect("finite std");
    let tex = texture(h, w, rng);
    let cue = cfg.background_cue_strength * HALO_LEVEL;
    let data = (0..h * w)
        .map(|i| {
            let clean = if mask[i] > 0.5 {
                signal
            } else {
                tex[i] + cue * halo[i]
            };
            (clean + noise.sample(rng)).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Draws one scene from `rng`.
pub fn generate_sample(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Sample> {
    cfg.validate()?;
    let mask = draw_mask(cfg, rng);
    let ring = halo(&mask, cfg.height, cfg.width);
    let image_r = render(&mask, &ring, cfg, cfg.dominance, rng)?;
    let image_t = render(&mask, &ring, cfg, 1.0 - cfg.dominance, rng)?;
    let gt = Tensor::new(vec![cfg.height, cfg.width], mask)?;
    Sample::new(image_r, image_t, gt)
}

/// `n` scenes from the random stream `split` of `cfg.seed`. Different splits
/// of one seed are independent.
pub fn generate_dataset(cfg: &SynthConfig, n: usize, split: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split);
    (0..n).map(|_| generate_sample(cfg, &mut rng)).collect()
}

/// Mean foreground intensity minus mean background intensity.
pub fn contrast(image: &Tensor, gt: &Tensor) -> f64 {
    let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &g) in image.data().iter().zip(gt.data()) {
        if g > 0.5 {
            fg += v;
            nf += 1;
        } else {
            bg += v;
            nb += 1;
        }
    }
    fg / nf.max(1) as f64 - bg / nb.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_contrasts(cfg: &SynthConfig, n: usize) -> (f64, f64) {
        let data = generate_dataset(cfg, n, 0).unwrap();
        let r = data.iter().map(|s| contrast(&s.image_r, &s.gt)).sum::<f64>() / n as f64;
        let t = data.iter().map(|s| contrast(&s.image_t, &s.gt)).sum::<f64>() / n as f64;
        (r, t)
    }

    #[test]
    fn full_dominance_favours_r() {
        let cfg = SynthConfig {
            dominance: 1.0,
            ..SynthConfig::default()
        };
        for s in generate_dataset(&cfg, 100, 0).unwrap() {
            assert!(contrast(&s.image_r, &s.gt) > contrast(&s.image_t, &s.gt));
        }
    }

    #[test]
    fn balanced_dominance_gives_matching_contrast() {
        let cfg = SynthConfig {
            dominance: 0.5,
            background_cue_strength: 0.5,
            ..SynthConfig::default()
        };
        let (r, t) = mean_contrasts(&cfg, 400);
        assert!((r - t).abs() < 0.01, "r={r} t={t}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            seed: 42,
            background_cue_strength: 0.8,
            ..SynthConfig::default()
        };
        assert_eq!(generate_dataset(&cfg, 5, 1).unwrap(), generate_dataset(&cfg, 5, 1).unwrap());
        assert_ne!(generate_dataset(&cfg, 5, 1).unwrap(), generate_dataset(&cfg, 5, 2).unwrap());
    }

    #[test]
    fn images_are_in_unit_range_with_objects() {
        let cfg = SynthConfig {
            background_cue_strength: 1.0,
            ..SynthConfig::default()
        };
        for s in generate_dataset(&cfg, 50, 0).unwrap() {
            assert!(s.image_r.data().iter().chain(s.image_t.data()).all(|v| (0.0..=1.0).contains(v)));
            assert!(s.gt.sum() > 0.0);
        }
    }

    #[test]
    fn invalid_configs() {
        let ok = SynthConfig::default();
        assert!(SynthConfig { height: 4, ..ok }.validate().is_err());
        assert!(SynthConfig { dominance: 1.5, ..ok }.validate().is_err());
        assert!(SynthConfig { max_objects: 0, ..ok }.validate().is_err());
        assert!(SynthConfig { background_cue_strength: -0.1, ..ok }.validate().is_err());
    }
}
