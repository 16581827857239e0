//! Autoregressive decoding with hard (fixed prefix) and soft (forced
//! category, optional size hint) constraints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Tape};
use crate::error::{Error, Result};
use crate::layout::{bbox_problem, clamp_bbox, Layout, LayoutObject, DEFAULT_MAX_OBJECTS};
use crate::mcl::{draw_index, size_hint_weights, PairReport};
use crate::model::Model;

pub const STOP_THRESHOLD: f64 = 0.5;
/// Per-context coefficient floor applied on top of the global paired mask.
pub const DEFAULT_PHI_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftConstraint {
    pub category: usize,
    /// `(w, h)` hint; only re-weights predictors, never overrides them.
    pub size: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub hard: Vec<LayoutObject>,
    pub soft: Vec<SoftConstraint>,
    pub count: usize,
    pub max_objects: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for GenerationRequest {
    fn default() -> Self {
        GenerationRequest {
            hard: Vec::new(),
            soft: Vec::new(),
            count: 1,
            max_objects: DEFAULT_MAX_OBJECTS,
            seed: 0,
            temperature: 1.0,
        }
    }
}

impl GenerationRequest {
    pub fn validate(&self, num_categories: usize) -> Result<()> {
        if self.count == 0 {
            return Err(Error::request("count", "must be at least 1"));
        }
        if self.max_objects == 0 {
            return Err(Error::request("max_objects", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::request("temperature", "must be positive and finite"));
        }
        if self.hard.len() + self.soft.len() > self.max_objects {
            return Err(Error::request(
                "soft",
                format!(
                    "{} hard + {} soft constraints exceed max_objects {}",
                    self.hard.len(),
                    self.soft.len(),
                    self.max_objects
                ),
            ));
        }
        for (i, o) in self.hard.iter().enumerate() {
            if o.category >= num_categories {
                return Err(Error::request(format!("hard[{i}].category"), "unknown category"));
            }
            if let Some(p) = bbox_problem(&o.bbox) {
                return Err(Error::request(format!("hard[{i}].bbox"), p));
            }
        }
        for (i, s) in self.soft.iter().enumerate() {
            if s.category >= num_categories {
                return Err(Error::request(format!("soft[{i}].category"), "unknown category"));
            }
            if let Some([w, h]) = s.size {
                if !(0.0..=1.0).contains(&w) || !(0.0..=1.0).contains(&h) {
                    return Err(Error::request(format!("soft[{i}].size"), "must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// How a predictor is chosen among the `M` hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// Sample uniformly among paired predictors instead of from raw `φ`.
    pub renormalize: bool,
    pub phi_floor: f64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            renormalize: true,
            phi_floor: DEFAULT_PHI_FLOOR,
        }
    }
}

/// Softmax of `logits / temperature`, sampled.
pub fn predict_category(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let probs = tempered_softmax(logits, temperature);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last bucket
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

pub fn tempered_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// True when the object just emitted should end the layout.
pub fn predict_stop(stop_logit: f64, count: usize, max_objects: usize) -> bool {
    count >= max_objects || sigmoid(stop_logit) > STOP_THRESHOLD
}

/// Sampling weights over the `M` predictors of one category.
pub fn selection_weights(
    phi: &[f64],
    paired: Option<&[bool]>,
    policy: SelectionPolicy,
) -> Vec<f64> {
    if policy.renormalize {
        if let Some(mask) = paired {
            let local: Vec<f64> = phi
                .iter()
                .zip(mask)
                .map(|(&p, &m)| if m && p >= policy.phi_floor { 1.0 } else { 0.0 })
                .collect();
            if local.iter().any(|&w| w > 0.0) {
                return local;
            }
        }
    }
    phi.to_vec()
}

pub struct Generator<'a> {
    pub model: &'a Model,
    pub pairing: Option<&'a PairReport>,
    pub policy: SelectionPolicy,
}

impl<'a> Generator<'a> {
    pub fn new(model: &'a Model, pairing: Option<&'a PairReport>) -> Self {
        Generator {
            model,
            pairing,
            policy: SelectionPolicy::default(),
        }
    }

    /// `request.count` candidates, each from its own RNG stream.
    pub fn generate(&self, request: &GenerationRequest) -> Result<Vec<Layout>> {
        request.validate(self.model.num_categories())?;
        (0..request.count)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
                rng.set_stream(i as u64);
                self.candidate(request, &mut rng)
            })
            .collect()
    }

    fn candidate(&self, request: &GenerationRequest, rng: &mut ChaCha8Rng) -> Result<Layout> {
        let net = &self.model.net;
        let params = &self.model.params;
        let mut objects = request.hard.clone();
        let mut soft = request.soft.iter();

        while objects.len() < request.max_objects {
            let mut tape = Tape::new();
            let out = net.step(&mut tape, params, &[&objects])?;

            let pending = soft.next();
            let category = match pending {
                Some(s) => s.category,
                None => predict_category(
                    tape.value(out.category_logits).data(),
                    request.temperature,
                    rng,
                ),
            };

            let hyps = net.bank.hypotheses(&mut tape, params, out.shared, category)?;
            let phi_var = net.mixture.phi(&mut tape, params, out.shared, &[category])?;
            let phi = tape.value(phi_var).data().to_vec();
            let boxes: Vec<[f64; 4]> = hyps
                .iter()
                .map(|&h| {
                    let d = tape.value(h).data();
                    [d[0], d[1], d[2], d[3]]
                })
                .collect();

            let mask = self.pairing.and_then(|p| p.paired_mask(category));
            let mut weights = selection_weights(&phi, mask, self.policy);
            if let Some(hint) = pending.and_then(|s| s.size) {
                let sizes: Vec<[f64; 2]> = boxes.iter().map(|b| [b[2], b[3]]).collect();
                weights = size_hint_weights(&weights, &sizes, hint);
            }
            let chosen = draw_index(&weights, rng)?;
            objects.push(LayoutObject::new(category, clamp_bbox(boxes[chosen])));

            let soft_left = soft.len() > 0;
            let stop_logit = tape.value(out.stop_logit).item();
            if !soft_left && predict_stop(stop_logit, objects.len(), request.max_objects) {
                break;
            }
        }
        Ok(Layout::new(objects, self.model.canvas, "generated"))
    }
}

/// Layouts whose objects all satisfy the bbox and category invariants.
pub fn valid_fraction(layouts: &[Layout], max_objects: usize, num_categories: usize) -> f64 {
    if layouts.is_empty() {
        return 0.0;
    }
    let ok = layouts
        .iter()
        .filter(|l| l.problem(max_objects, num_categories).is_none())
        .count();
    ok as f64 / layouts.len() as f64
}
