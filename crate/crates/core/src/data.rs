//! Seeded synthetic "gameplay" videos: sums of low-frequency plane waves on
//! the token grid that translate at a fixed drift velocity.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{LatentFrame, ModelConfig};
use crate::tensor::{Mat, Scalar};

/// Integer wave vectors on the periodic token grid.
const WAVES: [(f64, f64); 4] = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    /// Drift in token units per frame along (columns, rows).
    pub velocity: (f64, f64),
    pub frames: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            velocity: (0.15, 0.1),
            frames: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub id: u64,
    pub frames: Vec<LatentFrame<f64>>,
}

impl SyntheticVideo {
    pub fn generate(id: u64, model: &ModelConfig, drift: &DriftConfig) -> Result<Self> {
        if drift.frames < 2 {
            return Err(invalid("synthetic video needs at least two frames"));
        }
        let (grid_r, grid_c) = model.token_grid;
        let c = model.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(id ^ 0x5eed_0f_d21f7);
        let amp_scale = (1.0 / WAVES.len() as f64).sqrt();
        // per channel, per wave: (amplitude, phase)
        let waves: Vec<Vec<(f64, f64)>> = (0..c)
            .map(|_| {
                WAVES
                    .iter()
                    .map(|_| {
                        let a: f64 = rng.sample::<f64, _>(StandardNormal) * amp_scale;
                        let phi = rng.random::<f64>() * 2.0 * PI;
                        (a, phi)
                    })
                    .collect()
            })
            .collect();
        let frames = (0..drift.frames)
            .map(|n| {
                let sx = drift.velocity.0 * n as f64;
                let sy = drift.velocity.1 * n as f64;
                Mat::from_fn(grid_r * grid_c, c, |tok, ch| {
                    let row = (tok / grid_c) as f64;
                    let col = (tok % grid_c) as f64;
                    waves[ch]
                        .iter()
                        .zip(WAVES)
                        .map(|(&(a, phi), (kx, ky))| {
                            let arg = 2.0 * PI * (kx * (col - sx) / grid_c as f64 + ky * (row - sy) / grid_r as f64);
                            a * (arg + phi).sin()
                        })
                        .sum()
                })
            })
            .collect();
        Ok(Self { id, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames_as<F: Scalar>(&self, range: std::ops::Range<usize>) -> Vec<LatentFrame<F>> {
        self.frames[range].iter().map(Mat::cast).collect()
    }
}

/// A fixed collection of synthetic videos.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<SyntheticVideo>,
}

impl Dataset {
    pub fn synthetic(seed: u64, count: usize, model: &ModelConfig, drift: &DriftConfig) -> Result<Self> {
        let videos = (0..count as u64)
            .map(|i| SyntheticVideo::generate(seed.wrapping_mul(1_000_003).wrapping_add(i), model, drift))
            .collect::<Result<_>>()?;
        Ok(Self { videos })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_finite() {
        let cfg = ModelConfig::default();
        let a = SyntheticVideo::generate(3, &cfg, &DriftConfig::default()).unwrap();
        let b = SyntheticVideo::generate(3, &cfg, &DriftConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.frames.iter().all(|f| f.is_finite()));
        let c = SyntheticVideo::generate(4, &cfg, &DriftConfig::default()).unwrap();
        assert_ne!(a.frames[0], c.frames[0]);
    }

    #[test]
    fn whole_token_drift_is_a_shift() {
        let cfg = ModelConfig::default();
        let drift = DriftConfig {
            velocity: (1.0, 0.0),
            frames: 3,
        };
        let v = SyntheticVideo::generate(9, &cfg, &drift).unwrap();
        // frame n+1 at column c equals frame n at column c-1
        for tok in 0..16 {
            let (r, c) = (tok / 4, tok % 4);
            let src = r * 4 + (c + 3) % 4;
            for ch in 0..cfg.channels {
                assert!((v.frames[1].get(tok, ch) - v.frames[0].get(src, ch)).abs() < 1e-12);
            }
        }
    }
}
