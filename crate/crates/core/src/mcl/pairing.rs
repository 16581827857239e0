use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PAIR_TAU: f64 = 0.05;
/// Bandwidth of the `exp(-L1 / h)` size-hint kernel.
pub const SIZE_HINT_BANDWIDTH: f64 = 0.1;

/// One evaluated example: the winning predictor of its category's sub-bank,
/// the winner's L1 distance and the coefficients the mixture layer produced.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub category: usize,
    pub winner: usize,
    pub l1: f64,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPairing {
    pub samples: usize,
    /// Won at least once with L1 below the threshold.
    pub paired: Vec<bool>,
    pub wins: Vec<usize>,
    pub mean_phi: Vec<f64>,
    pub paired_count: usize,
    /// Mean φ mass on unpaired predictors over this category's samples.
    pub unpaired_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub tau: f64,
    pub m: usize,
    pub per_category: Vec<CategoryPairing>,
    pub samples: usize,
    pub paired_count: usize,
    /// Sample-weighted mean of the per-category unpaired masses.
    pub unpaired_mass: f64,
}

impl PairReport {
    pub fn paired_mask(&self, category: usize) -> Option<&[bool]> {
        self.per_category.get(category).map(|c| c.paired.as_slice())
    }
}

pub fn pair_report(samples: &[PairSample], m: usize, num_categories: usize, tau: f64) -> PairReport {
    let mut per: Vec<CategoryPairing> = (0..num_categories)
        .map(|_| CategoryPairing {
            samples: 0,
            paired: vec![false; m],
            wins: vec![0; m],
            mean_phi: vec![0.0; m],
            paired_count: 0,
            unpaired_mass: 0.0,
        })
        .collect();
    for s in samples {
        let c = &mut per[s.category];
        c.samples += 1;
        c.wins[s.winner] += 1;
        if s.l1 < tau {
            c.paired[s.winner] = true;
        }
        for (acc, p) in c.mean_phi.iter_mut().zip(&s.phi) {
            *acc += p;
        }
    }
    let mut unpaired_total = 0.0;
    for c in &mut per {
        c.paired_count = c.paired.iter().filter(|&&p| p).count();
        if c.samples == 0 {
            continue;
        }
        let n = c.samples as f64;
        for v in &mut c.mean_phi {
            *v /= n;
        }
        c.unpaired_mass = c
            .mean_phi
            .iter()
            .zip(&c.paired)
            .filter(|(_, &p)| !p)
            .map(|(v, _)| v)
            .sum();
        unpaired_total += c.unpaired_mass * n;
    }
    PairReport {
        tau,
        m,
        samples: samples.len(),
        paired_count: per.iter().map(|c| c.paired_count).sum(),
        unpaired_mass: if samples.is_empty() {
            0.0
        } else {
            unpaired_total / samples.len() as f64
        },
        per_category: per,
    }
}

/// Draws a predictor index. With `renormalize`, uniform over the paired
/// predictors (`1/P` each); otherwise from the multinomial `φ`.
pub fn sample_predictor(
    phi: &[f64],
    paired_mask: &[bool],
    rng: &mut impl Rng,
    renormalize: bool,
) -> Result<usize> {
    let weights: Vec<f64> = if renormalize {
        if !paired_mask.iter().any(|&p| p) {
            return Err(Error::NoPairedPredictors);
        }
        paired_mask
            .iter()
            .map(|&p| if p { 1.0 } else { 0.0 })
            .collect()
    } else {
        phi.to_vec()
    };
    draw_index(&weights, rng)
}

/// Index drawn with probability proportional to `weights`.
pub fn draw_index(weights: &[f64], rng: &mut impl Rng) -> Result<usize> {
    let dist = WeightedIndex::new(weights)
        .map_err(|e| Error::NonFinite(format!("sampling weights: {e}")))?;
    Ok(dist.sample(rng))
}

/// Re-weights `base` by `exp(-|wh_i - hint|_1 / h)` and renormalizes. Falls
/// back to `base` if the kernel underflows everywhere.
pub fn size_hint_weights(base: &[f64], sizes: &[[f64; 2]], hint: [f64; 2]) -> Vec<f64> {
    let w: Vec<f64> = base
        .iter()
        .zip(sizes)
        .map(|(b, s)| {
            let d = (s[0] - hint[0]).abs() + (s[1] - hint[1]).abs();
            b * (-d / SIZE_HINT_BANDWIDTH).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 && total.is_finite() {
        w.into_iter().map(|v| v / total).collect()
    } else {
        base.to_vec()
    }
}
