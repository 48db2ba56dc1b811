use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{WindowSample, CHANNELS};
use crate::numerics::SeedStream;

/// Jittering and cropping copies added to training windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub jitter_sigmas: Vec<f64>,
    pub crop_probs: Vec<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { jitter_sigmas: vec![0.05, 0.1], crop_probs: vec![0.05, 0.10] }
    }
}

impl AugmentConfig {
    /// No copies; training uses the original windows only.
    pub fn none() -> Self {
        AugmentConfig { jitter_sigmas: Vec::new(), crop_probs: Vec::new() }
    }

    pub fn is_none(&self) -> bool {
        self.jitter_sigmas.is_empty() && self.crop_probs.is_empty()
    }

    pub fn copies_per_window(&self) -> usize {
        1 + self.jitter_sigmas.len() + self.crop_probs.len()
    }
}

/// Adds Gaussian noise with standard deviation `sigma` to every coordinate.
pub fn jitter(w: &WindowSample, sigma: f64, rng: &mut impl Rng) -> WindowSample {
    let mut out = w.clone();
    out.is_augmented = true;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in &mut out.features {
            *v += normal.sample(rng);
        }
    }
    out
}

/// Zeroes each (timestep, joint) coordinate triplet independently with probability `p`.
pub fn crop(w: &WindowSample, p: f64, rng: &mut impl Rng) -> WindowSample {
    let mut out = w.clone();
    out.is_augmented = true;
    for triplet in out.features.chunks_exact_mut(CHANNELS) {
        if rng.random::<f64>() < p {
            triplet.fill(0.0);
        }
    }
    out
}

/// Originals followed by one jittered copy per sigma and one cropped copy per probability.
pub fn augment(train: &[WindowSample], cfg: &AugmentConfig, seed: SeedStream) -> Vec<WindowSample> {
    let mut out = Vec::with_capacity(train.len() * cfg.copies_per_window());
    out.extend(train.iter().cloned());
    for (k, &sigma) in cfg.jitter_sigmas.iter().enumerate() {
        let mut rng = seed.derive(&format!("jitter/{k}")).rng();
        out.extend(train.iter().map(|w| jitter(w, sigma, &mut rng)));
    }
    for (k, &p) in cfg.crop_probs.iter().enumerate() {
        let mut rng = seed.derive(&format!("crop/{k}")).rng();
        out.extend(train.iter().map(|w| crop(w, p, &mut rng)));
    }
    out
}
