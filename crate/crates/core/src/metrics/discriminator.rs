use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::diffcore::{checkpoint, Linear, ParamStore, Tape, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::layout::{perturb_fake, CategoryVocabulary, Layout, LayoutObject, DEFAULT_FAKE_MAGNITUDE};
use crate::trainer::{clip_global_norm, Adam, DEFAULT_CLIP_NORM};

/// Width of the penultimate layer whose activations feed the FID.
pub const HEAD_WIDTH: usize = 512;
pub const REAL_CLASS: usize = 0;
pub const FAKE_CLASS: usize = 1;

const CHECKPOINT_FILE: &str = "discriminator.ckpt";
const MANIFEST_FILE: &str = "discriminator.json";
const INFERENCE_CHUNK: usize = 256;
const WEAK_ACCURACY: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub encoder: EncoderConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Perturbation magnitude used to make fakes.
    pub magnitude: f64,
    pub holdout_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            encoder: EncoderConfig::desk(),
            learning_rate: 1e-3,
            epochs: 6,
            batch_size: 32,
            magnitude: DEFAULT_FAKE_MAGNITUDE,
            holdout_fraction: 0.2,
            clip_norm: DEFAULT_CLIP_NORM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorReport {
    pub train_accuracy: f64,
    /// Over held-out reals and their fakes together.
    pub heldout_accuracy: f64,
    pub heldout_real_accuracy: f64,
    pub heldout_fake_accuracy: f64,
    pub heldout_reals: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: DiscriminatorConfig,
    vocabulary: CategoryVocabulary,
    checkpoint_sha256: String,
    report: Option<DiscriminatorReport>,
}

/// Encoder backbone over whole layouts, a 512-unit rectified layer and a
/// two-way real/fake output.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub vocab: CategoryVocabulary,
    pub params: ParamStore,
    pub report: Option<DiscriminatorReport>,
    encoder: Encoder,
    hidden: Linear,
    out: Linear,
}

/// Indices grouped so that every group shares one object count.
fn length_groups(layouts: &[&Layout], chunk: usize) -> Vec<Vec<usize>> {
    let max = layouts.iter().map(|l| l.len()).max().unwrap_or(0);
    let mut by_len = vec![Vec::new(); max + 1];
    for (i, l) in layouts.iter().enumerate() {
        by_len[l.len()].push(i);
    }
    by_len
        .into_iter()
        .flat_map(|g| g.chunks(chunk.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, vocab: CategoryVocabulary, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, "disc.enc", config.encoder.clone(), vocab.len(), &mut rng)?;
        let hidden = Linear::new(&mut params, "disc.hidden", encoder.shared_width(), HEAD_WIDTH, &mut rng)?;
        let out = Linear::new(&mut params, "disc.out", HEAD_WIDTH, 2, &mut rng)?;
        Ok(Discriminator {
            config,
            vocab,
            params,
            report: None,
            encoder,
            hidden,
            out,
        })
    }

    /// Penultimate activations `[B, 512]` and logits `[B, 2]`.
    fn forward(&self, tape: &mut Tape, layouts: &[&[LayoutObject]]) -> Result<(Var, Var)> {
        let shared = self.encoder.encode(tape, &self.params, layouts)?.shared;
        let h = self.hidden.forward(tape, &self.params, shared)?;
        let h = tape.relu(h);
        let logits = self.out.forward(tape, &self.params, h)?;
        Ok((h, logits))
    }

    fn rows(&self, layouts: &[Layout], features: bool) -> Result<Vec<Vec<f64>>> {
        let refs: Vec<&Layout> = layouts.iter().collect();
        let groups = length_groups(&refs, INFERENCE_CHUNK);
        let parts: Vec<(Vec<usize>, Tensor)> = groups
            .into_par_iter()
            .map(|g| {
                let mut tape = Tape::new();
                let objs: Vec<&[LayoutObject]> = g.iter().map(|&i| layouts[i].objects.as_slice()).collect();
                let (h, logits) = self.forward(&mut tape, &objs)?;
                let t = tape.value(if features { h } else { logits }).clone();
                Ok((g, t))
            })
            .collect::<Result<_>>()?;
        let mut out = vec![Vec::new(); layouts.len()];
        for (g, t) in parts {
            for (k, i) in g.into_iter().enumerate() {
                out[i] = t.row(k).to_vec();
            }
        }
        Ok(out)
    }

    pub fn features(&self, layouts: &[Layout]) -> Result<Vec<Vec<f64>>> {
        self.rows(layouts, true)
    }

    /// Class with the larger logit, ties going to the real class.
    pub fn predict(&self, layouts: &[Layout]) -> Result<Vec<usize>> {
        Ok(self
            .rows(layouts, false)?
            .into_iter()
            .map(|r| if r[FAKE_CLASS] > r[REAL_CLASS] { FAKE_CLASS } else { REAL_CLASS })
            .collect())
    }

    /// Fraction of `layouts` assigned to `class`.
    pub fn class_fraction(&self, layouts: &[Layout], class: usize) -> Result<f64> {
        if layouts.is_empty() {
            return Err(Error::Empty("no layouts to classify"));
        }
        let p = self.predict(layouts)?;
        Ok(p.iter().filter(|&&c| c == class).count() as f64 / p.len() as f64)
    }

    fn batch_loss(&self, tape: &mut Tape, batch: &[(&Layout, usize)]) -> Result<Var> {
        let objs: Vec<&[LayoutObject]> = batch.iter().map(|(l, _)| l.objects.as_slice()).collect();
        let (_, logits) = self.forward(tape, &objs)?;
        let logp = tape.log_softmax(logits, 1)?;
        let mut pick = Tensor::zeros(&[batch.len(), 2]);
        for (r, (_, label)) in batch.iter().enumerate() {
            pick.data_mut()[r * 2 + label] = 1.0;
        }
        let pick = tape.leaf(pick);
        let picked = tape.mul(logp, pick)?;
        let s = tape.sum(picked, None)?;
        Ok(tape.scale(s, -1.0 / batch.len() as f64))
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &self.params)?;
        let manifest = Manifest {
            config: self.config.clone(),
            vocabulary: self.vocab.clone(),
            checkpoint_sha256: checkpoint::digest(&self.params),
            report: self.report,
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let bytes = std::fs::read(dir.join(MANIFEST_FILE))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
        let m: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("discriminator manifest: {e}")))?;
        let mut d = Discriminator::new(m.config, m.vocabulary, 0)?;
        d.params.load_from(&checkpoint::load(&dir.join(CHECKPOINT_FILE))?)?;
        let digest = checkpoint::digest(&d.params);
        if digest != m.checkpoint_sha256 {
            return Err(Error::Checkpoint(format!(
                "discriminator digest {digest} does not match manifest {}",
                m.checkpoint_sha256
            )));
        }
        d.report = m.report;
        Ok(d)
    }
}

fn fakes_of(layouts: &[Layout], magnitude: f64, seed: u64, stream: u64) -> Vec<Layout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    layouts.iter().map(|l| perturb_fake(l, &mut rng, magnitude)).collect()
}

/// Splits `real` into train and held-out parts first, then makes one fake
/// per real inside each part so no fake shares a source with the other split.
pub fn train_discriminator(
    real: &[Layout],
    vocab: &CategoryVocabulary,
    config: DiscriminatorConfig,
) -> Result<Discriminator> {
    if real.len() < 2 {
        return Err(Error::Empty("discriminator needs at least two real layouts"));
    }
    if !(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0) {
        return Err(Error::Config("holdout_fraction must lie in (0, 1)".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be positive".into()));
    }
    let mut shuffled = real.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let held = ((real.len() as f64 * config.holdout_fraction).round() as usize).clamp(1, real.len() - 1);
    let (held_real, train_real) = shuffled.split_at(held);
    let train_fake = fakes_of(train_real, config.magnitude, config.seed, 1);
    let held_fake = fakes_of(held_real, config.magnitude, config.seed, 2);

    let mut d = Discriminator::new(config.clone(), vocab.clone(), config.seed)?;
    let examples: Vec<(&Layout, usize)> = train_real
        .iter()
        .map(|l| (l, REAL_CLASS))
        .chain(train_fake.iter().map(|l| (l, FAKE_CLASS)))
        .collect();
    let mut adam = Adam::new(&d.params, config.learning_rate);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(100 + epoch as u64);
        let mut order = examples.clone();
        order.shuffle(&mut rng);
        let refs: Vec<&Layout> = order.iter().map(|(l, _)| *l).collect();
        let mut groups = length_groups(&refs, config.batch_size);
        groups.shuffle(&mut rng);
        let mut total = 0.0;
        for g in &groups {
            let batch: Vec<(&Layout, usize)> = g.iter().map(|&i| order[i]).collect();
            let mut tape = Tape::new();
            let loss = d.batch_loss(&mut tape, &batch)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "discriminator loss is not finite".into(),
                });
            }
            total += value * batch.len() as f64;
            let mut grads = tape.backward(loss)?.for_params(&d.params);
            clip_global_norm(&mut grads, config.clip_norm);
            adam.step(&mut d.params, &grads)?;
        }
        info!(epoch, loss = total / examples.len() as f64, "discriminator epoch");
    }

    let train_correct = d.class_fraction(train_real, REAL_CLASS)? * train_real.len() as f64
        + d.class_fraction(&train_fake, FAKE_CLASS)? * train_fake.len() as f64;
    let real_acc = d.class_fraction(held_real, REAL_CLASS)?;
    let fake_acc = d.class_fraction(&held_fake, FAKE_CLASS)?;
    let report = DiscriminatorReport {
        train_accuracy: train_correct / examples.len() as f64,
        heldout_accuracy: (real_acc + fake_acc) / 2.0,
        heldout_real_accuracy: real_acc,
        heldout_fake_accuracy: fake_acc,
        heldout_reals: held_real.len(),
    };
    if report.heldout_accuracy < WEAK_ACCURACY {
        warn!(accuracy = report.heldout_accuracy, "weak discriminator; FID will be weakly informative");
    }
    d.report = Some(report);
    Ok(d)
}

/// Fraction of `layouts` the discriminator labels fake.
pub fn fake_positive(layouts: &[Layout], discriminator: &Discriminator) -> Result<f64> {
    discriminator.class_fraction(layouts, FAKE_CLASS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{synth_grammar, Profile};

    fn tiny() -> DiscriminatorConfig {
        DiscriminatorConfig {
            encoder: EncoderConfig {
                gru_layers: 1,
                gru_hidden: 8,
                conv_layers: 2,
                conv_channels: 2,
                raster_res: 8,
                spatial_width: 8,
            },
            epochs: 2,
            batch_size: 16,
            ..DiscriminatorConfig::default()
        }
    }

    #[test]
    fn penultimate_width_and_order() {
        let p = Profile::SingleColumnDoc;
        let d = Discriminator::new(tiny(), p.vocabulary(), 1).unwrap();
        let ls = synth_grammar(1, 9, p);
        let f = d.features(&ls).unwrap();
        assert_eq!(f.len(), 9);
        assert!(f.iter().all(|r| r.len() == HEAD_WIDTH));
        let single = d.features(&ls[4..5]).unwrap();
        assert_eq!(single[0], f[4]);
    }

    #[test]
    fn fake_positive_complements_real_accuracy() {
        let p = Profile::SingleColumnDoc;
        let ls = synth_grammar(2, 40, p);
        let d = train_discriminator(&ls, &p.vocabulary(), tiny()).unwrap();
        let r = d.report.unwrap();
        let mut held = ls.clone();
        held.shuffle(&mut ChaCha8Rng::seed_from_u64(d.config.seed));
        let held = &held[..r.heldout_reals];
        assert_eq!(fake_positive(held, &d).unwrap() + r.heldout_real_accuracy, 1.0);
        assert!(fake_positive(&[], &d).is_err());
    }

    #[test]
    fn save_and_load_round_trip() {
        let p = Profile::MobileApp;
        let d = Discriminator::new(tiny(), p.vocabulary(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save_dir(dir.path()).unwrap();
        let e = Discriminator::load_dir(dir.path()).unwrap();
        let ls = synth_grammar(3, 5, p);
        assert_eq!(d.features(&ls).unwrap(), e.features(&ls).unwrap());
    }
}
