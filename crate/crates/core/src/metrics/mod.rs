//! Corpus-level evaluation: horizontal alignment, feature-space Fréchet
//! distance, discriminator fake-positive rate and composition diversity.

mod discriminator;
mod fid;

pub use discriminator::{
    fake_positive, train_discriminator, DiscriminatorConfig, DiscriminatorReport, Discriminator,
    FAKE_CLASS, HEAD_WIDTH, REAL_CLASS,
};
pub use fid::{fid, fid_from_stats, FeatureStats, MIN_STABLE_SAMPLES};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{CategoryVocabulary, Layout};

/// Per-layout alignment term: each object's smallest left, centre or
/// right-edge distance to any other object, summed over objects.
pub fn layout_alignment(layout: &Layout) -> f64 {
    let n = layout.objects.len();
    if n < 2 {
        return 0.0;
    }
    let edges: [Vec<f64>; 3] = [
        layout.objects.iter().map(|o| o.x()).collect(),
        layout.objects.iter().map(|o| o.x() + o.w() / 2.0).collect(),
        layout.objects.iter().map(|o| o.x() + o.w()).collect(),
    ];
    let mut best = vec![f64::INFINITY; n];
    for values in &edges {
        // the nearest other value sits next to each object in sorted order
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        for (p, &i) in order.iter().enumerate() {
            if p > 0 {
                best[i] = best[i].min((values[i] - values[order[p - 1]]).abs());
            }
            if p + 1 < n {
                best[i] = best[i].min((values[i] - values[order[p + 1]]).abs());
            }
        }
    }
    best.iter().sum()
}

/// Sum of per-layout alignment terms divided by the number of layouts.
pub fn alignment(layouts: &[Layout]) -> Result<f64> {
    if layouts.is_empty() {
        return Err(Error::Empty("alignment needs at least one layout"));
    }
    if layouts.iter().any(Layout::is_empty) {
        return Err(Error::InvalidLayout("alignment needs non-empty layouts".into()));
    }
    let terms: Vec<f64> = layouts.par_iter().map(layout_alignment).collect();
    Ok(terms.iter().sum::<f64>() / layouts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFrequency {
    pub categories: Vec<String>,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    pub layouts: usize,
    pub distinct: usize,
    /// Most frequent first; ties in sequence order.
    pub sequences: Vec<SequenceFrequency>,
}

impl DiversityStats {
    pub fn fraction_of(&self, categories: &[&str]) -> f64 {
        self.sequences
            .iter()
            .find(|s| s.categories.iter().map(String::as_str).eq(categories.iter().copied()))
            .map_or(0.0, |s| s.fraction)
    }
}

pub fn diversity_stats(layouts: &[Layout], vocab: &CategoryVocabulary) -> Result<DiversityStats> {
    if layouts.len() < 2 {
        return Err(Error::Empty("diversity needs at least two layouts"));
    }
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for l in layouts {
        *counts.entry(l.categories()).or_default() += 1;
    }
    let n = layouts.len() as f64;
    let mut sequences = counts
        .into_iter()
        .map(|(seq, count)| {
            Ok(SequenceFrequency {
                categories: seq
                    .iter()
                    .map(|&c| vocab.name(c).map(str::to_owned))
                    .collect::<Result<_>>()?,
                count,
                fraction: count as f64 / n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sequences.sort_by(|a, b| b.count.cmp(&a.count));
    Ok(DiversityStats {
        layouts: layouts.len(),
        distinct: sequences.len(),
        sequences,
    })
}

/// Evaluation of a generated corpus against a real one. Discriminator-based
/// fields are absent when no discriminator was supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub alignment: f64,
    pub real_alignment: Option<f64>,
    pub fid: Option<f64>,
    pub fake_positive: Option<f64>,
    pub diversity: DiversityStats,
}

pub fn evaluate(
    generated: &[Layout],
    real: Option<&[Layout]>,
    discriminator: Option<&Discriminator>,
    vocab: &CategoryVocabulary,
) -> Result<MetricReport> {
    let (fid_value, fp) = match (discriminator, real) {
        (Some(d), Some(real)) => {
            let a = d.features(generated)?;
            let b = d.features(real)?;
            (Some(fid(&a, &b)?), Some(fake_positive(generated, d)?))
        }
        (Some(d), None) => (None, Some(fake_positive(generated, d)?)),
        _ => (None, None),
    };
    Ok(MetricReport {
        alignment: alignment(generated)?,
        real_alignment: real.map(alignment).transpose()?,
        fid: fid_value,
        fake_positive: fp,
        diversity: diversity_stats(generated, vocab)?,
    })
}
