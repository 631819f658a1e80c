//! Procedural camouflage scenes: a value-noise background with a smooth
//! star-shaped object whose texture is the same background shifted in mean.

use std::f64::consts::PI;

use iceg_tensor::exec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EdgeParams, Sample};
use crate::error::{IcegError, Result};

const MIN_COVERAGE: f64 = 0.05;
const MAX_COVERAGE: f64 = 0.40;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub contrast: f64,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(IcegError::Parameter(format!(
                "synthetic images must be at least 32 pixels, got {}",
                self.size
            )));
        }
        if !(self.contrast > 0.0 && self.contrast <= 0.5) {
            return Err(IcegError::Parameter(format!(
                "contrast must lie in (0, 0.5], got {}",
                self.contrast
            )));
        }
        Ok(())
    }
}

/// Multi-octave value noise normalised to `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, octaves: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut amp = 1.0;
    let mut total = 0.0;
    for o in 0..octaves {
        let cells = 3usize << o;
        let n = cells + 1;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        let scale = cells as f64 / size as f64;
        for y in 0..size {
            let fy = (y as f64 + 0.5) * scale;
            let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..size {
                let fx = (x as f64 + 0.5) * scale;
                let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let at = |yy: usize, xx: usize| lattice[yy.min(n - 1) * n + xx.min(n - 1)];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                out[y * size + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        total += amp;
        amp *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Star-shaped region `r < r0 (1 + sum a_k cos(k theta + phi_k))`.
fn blob(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let s = size as f64;
    let (cx, cy) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
    let r0 = rng.random_range(0.14..0.34) * s;
    let harmonics: Vec<(f64, f64, f64)> = (2..=4)
        .map(|k| (k as f64, rng.random_range(0.0..0.12), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let mut mask = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let theta = dy.atan2(dx);
            let r = r0 * (1.0 + harmonics.iter().map(|&(k, a, p)| a * (k * theta + p).cos()).sum::<f64>());
            if dx.hypot(dy) < r {
                mask[y * size + x] = 1.0;
            }
        }
    }
    mask
}

fn synth_one(params: &SynthParams, index: usize) -> Result<Sample> {
    let size = params.size;
    let plane = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64);

    let mut mask = Vec::new();
    let mut accepted = false;
    for _ in 0..MAX_ATTEMPTS {
        mask = blob(&mut rng, size);
        let cover = mask.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        if (MIN_COVERAGE..=MAX_COVERAGE).contains(&cover) {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(IcegError::Parameter(format!(
            "could not place an object covering 5-40% of a {size}x{size} image"
        )));
    }

    let luma = value_noise(&mut rng, size, 4);
    let shift = if rng.random_bool(0.5) { params.contrast } else { -params.contrast };
    let mut image = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        let base: f64 = rng.random_range(0.35..0.65);
        let tint = value_noise(&mut rng, size, 3);
        for i in 0..plane {
            let bg = base + 0.4 * (luma[i] - 0.5) + 0.12 * (tint[i] - 0.5);
            let v = if mask[i] > 0.5 { bg + shift } else { bg };
            image[c * plane + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Sample::new(format!("synth_{index:05}"), size, size, image, mask, EdgeParams::for_side(size))
}

/// Deterministic synthetic dataset; each sample draws from its own stream of
/// the seeded generator so samples can be produced in parallel.
pub fn synth_dataset(n: usize, size: usize, seed: u64, contrast: f64) -> Result<Vec<Sample>> {
    let params = SynthParams { n, size, seed, contrast };
    params.validate()?;
    exec::map_indexed(n, |i| synth_one(&params, i)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let a = synth_dataset(8, 64, 1, 0.15).unwrap();
        let b = synth_dataset(8, 64, 1, 0.15).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].image, a[1].image);
    }

    #[test]
    fn coverage_is_bounded() {
        for s in synth_dataset(30, 64, 3, 0.15).unwrap() {
            let f = s.foreground_fraction();
            assert!((0.05..=0.40).contains(&f), "{f}");
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(synth_dataset(1, 16, 0, 0.1).is_err());
        assert!(synth_dataset(1, 64, 0, 0.9).is_err());
        assert!(synth_dataset(1, 64, 0, 0.0).is_err());
    }

    fn mean_gap(samples: &[Sample]) -> f64 {
        let mut acc = 0.0;
        for s in samples {
            let plane = s.mask.len();
            let (mut fg, mut bg, mut nf, mut nb) = (0.0, 0.0, 0.0, 0.0);
            for c in 0..3 {
                for i in 0..plane {
                    let v = s.image[c * plane + i] as f64;
                    if s.mask[i] > 0.5 {
                        fg += v;
                        nf += 1.0;
                    } else {
                        bg += v;
                        nb += 1.0;
                    }
                }
            }
            acc += (fg / nf - bg / nb).abs();
        }
        acc / samples.len() as f64
    }

    #[test]
    fn contrast_controls_the_gap() {
        let hi = synth_dataset(100, 32, 5, 0.5).unwrap();
        let lo = synth_dataset(100, 32, 5, 0.05).unwrap();
        assert!(mean_gap(&hi) > mean_gap(&lo));
    }
}
