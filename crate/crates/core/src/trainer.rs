//! Optimization loop: length-bucketed batches, Adam, gradient clipping,
//! best-loss checkpointing and per-epoch logs.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::diffcore::{ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::layout::{Canvas, CategoryVocabulary, Layout};
use crate::mcl::{pair_report, LossKind, LossVariant, PairReport, DEFAULT_PAIR_TAU, RWTA_EPS};
use crate::model::{
    bucket_by_length, teacher_forced_pairs, LossSummary, LossWeights, Manifest, Model,
    ModelConfig, TrainPair,
};

pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update; `grads` follows `store.ids()` order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam", &[self.m.len()], &[grads.len()]));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let p = store.get_mut(id);
            if p.numel() != g.len() {
                return Err(Error::shape("adam", p.shape(), grads[k].shape()));
            }
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub loss: LossKind,
    pub rwta_eps: f64,
    pub pair_tau: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub model: ModelConfig,
    /// Leading epochs trained with another loss before switching to `loss`.
    #[serde(default)]
    pub warmup: Option<Warmup>,
}

/// A leading phase that spreads hypotheses across the targets before the main
/// loss takes over. Its epochs count towards `epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Warmup {
    pub loss: LossKind,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 10,
            weights: LossWeights::default(),
            loss: LossKind::Mcl,
            rwta_eps: RWTA_EPS,
            pair_tau: DEFAULT_PAIR_TAU,
            clip_norm: DEFAULT_CLIP_NORM,
            seed: 0,
            model: ModelConfig::default(),
            warmup: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("epochs", self.epochs as f64),
            ("pair_tau", self.pair_tau),
            ("clip_norm", self.clip_norm),
            ("m", self.model.m as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        let w = self.weights;
        if [w.category, w.stop, w.bbox].iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.rwta_eps > 0.0 && self.rwta_eps < 1.0) {
            return Err(Error::Config("rwta_eps must lie in (0, 1)".into()));
        }
        if let Some(w) = self.warmup {
            if w.epochs >= self.epochs {
                return Err(Error::Config("warmup must leave at least one main epoch".into()));
            }
        }
        self.model.encoder.validate()
    }

    fn warmup_epochs(&self) -> usize {
        self.warmup.map_or(0, |w| w.epochs)
    }

    /// Loss variant for optimizer step `step` of `steps_per_epoch * epochs`.
    pub fn variant_at(&self, step: usize, steps_per_epoch: usize) -> LossVariant {
        let m = self.model.m;
        let warm_steps = self.warmup_epochs() * steps_per_epoch;
        match self.warmup {
            Some(w) if step < warm_steps => w.loss.variant(self.rwta_eps, m, step, warm_steps),
            _ => {
                let main = (self.epochs - self.warmup_epochs()) * steps_per_epoch;
                self.loss.variant(self.rwta_eps, m, step - warm_steps, main)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossSummary,
    pub paired_count: usize,
    pub unpaired_mass: f64,
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Best parameters re-evaluated on the full corpus after training.
    pub best_eval: LossSummary,
    pub steps: u64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub pairing: PairReport,
    pub manifest: Manifest,
}

/// Batches for one epoch: pairs shuffled with `(seed, epoch)`, grouped by
/// prefix length, and the batch order shuffled again.
pub fn epoch_batches<'a>(
    pairs: &[TrainPair<'a>],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<TrainPair<'a>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(&mut rng);
    let mut batches = bucket_by_length(&shuffled, batch_size);
    batches.shuffle(&mut rng);
    batches
}

pub struct Trainer<'c> {
    pub config: TrainConfig,
    pub corpus: &'c [Layout],
    pub vocab: CategoryVocabulary,
    pub canvas: Canvas,
    pub out_dir: Option<PathBuf>,
    pub corpus_hash: Option<String>,
}

impl<'c> Trainer<'c> {
    pub fn new(config: TrainConfig, corpus: &'c [Layout], vocab: CategoryVocabulary) -> Self {
        let canvas = corpus.first().map(|l| l.canvas).unwrap_or_default();
        Trainer {
            config,
            corpus,
            vocab,
            canvas,
            out_dir: None,
            corpus_hash: None,
        }
    }

    pub fn with_out_dir(mut self, dir: impl AsRef<Path>) -> Self {
        self.out_dir = Some(dir.as_ref().to_path_buf());
        self
    }

    pub fn run(&self) -> Result<TrainOutcome> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.corpus.is_empty() {
            return Err(Error::Empty("training corpus is empty"));
        }
        let mut model = Model::new(cfg.model.clone(), self.vocab.clone(), self.canvas, cfg.seed)?;
        let pairs = teacher_forced_pairs(self.corpus);
        let steps_per_epoch = bucket_by_length(&pairs, cfg.batch_size).len();
        let total_steps = steps_per_epoch * cfg.epochs;
        let mut adam = Adam::new(&model.params, cfg.learning_rate);
        let mut best: Option<(f64, usize, ParamStore)> = None;
        let mut epochs = Vec::with_capacity(cfg.epochs);
        let mut step = 0usize;

        for epoch in 0..cfg.epochs {
            let mut acc = LossSummary::default();
            let mut samples = Vec::with_capacity(pairs.len());
            let mut max_norm: f64 = 0.0;
            for batch in epoch_batches(&pairs, cfg.batch_size, cfg.seed, epoch) {
                let variant = cfg.variant_at(step, steps_per_epoch);
                let mut tape = Tape::new();
                let l = model
                    .net
                    .batch_loss(&mut tape, &model.params, &batch, variant, cfg.weights)?;
                let total = tape.value(l.total).item();
                if !total.is_finite() {
                    return Err(self.diverged(epoch, &best, format!("loss {total} at step {step}")));
                }
                let mut grads = tape.backward(l.total)?.for_params(&model.params);
                let norm = clip_global_norm(&mut grads, cfg.clip_norm);
                if !norm.is_finite() {
                    return Err(self.diverged(epoch, &best, format!("gradient norm {norm} at step {step}")));
                }
                max_norm = max_norm.max(norm);
                adam.step(&mut model.params, &grads)?;
                acc.add(&l, total, batch.len());
                samples.extend(l.samples);
                step += 1;
            }
            let loss = acc.finish();
            let report = pair_report(&samples, cfg.model.m, self.vocab.len(), cfg.pair_tau);
            info!(
                epoch,
                total = loss.total,
                category = loss.category,
                stop = loss.stop,
                bbox = loss.bbox,
                paired = report.paired_count,
                unpaired_mass = report.unpaired_mass,
                "epoch done"
            );
            // losses from different warm-up objectives are not comparable
            let main_phase = epoch >= cfg.warmup_epochs();
            if main_phase && best.as_ref().is_none_or(|(b, _, _)| loss.total < *b) {
                best = Some((loss.total, epoch, model.params.clone()));
            }
            epochs.push(EpochLog {
                epoch,
                loss,
                paired_count: report.paired_count,
                unpaired_mass: report.unpaired_mass,
                max_grad_norm: max_norm,
            });
        }

        let (_, best_epoch, params) = best.expect("at least one epoch");
        model.params = params;
        let final_variant = cfg.variant_at(total_steps.saturating_sub(1), steps_per_epoch);
        let (best_eval, _) = model.evaluate(&pairs, final_variant, cfg.weights, cfg.batch_size)?;
        let pairing = model.pairing(&pairs, cfg.pair_tau, cfg.batch_size)?;
        let log = TrainLog {
            config: cfg.clone(),
            epochs,
            best_epoch,
            best_eval,
            steps: adam.steps(),
        };
        let mut manifest = model.manifest();
        manifest.corpus_hash = self.corpus_hash.clone();
        manifest.pairing = Some(pairing.clone());
        manifest.training = Some(serde_json::to_value(&log)?);
        if let Some(dir) = &self.out_dir {
            manifest = model.save_dir(dir, manifest)?;
        }
        Ok(TrainOutcome {
            model,
            log,
            pairing,
            manifest,
        })
    }

    /// Writes the best parameters seen so far (if any) and builds the error.
    fn diverged(&self, epoch: usize, best: &Option<(f64, usize, ParamStore)>, detail: String) -> Error {
        let mut detail = detail;
        if let (Some(dir), Some((loss, at, params))) = (&self.out_dir, best) {
            let mut model = match Model::new(
                self.config.model.clone(),
                self.vocab.clone(),
                self.canvas,
                self.config.seed,
            ) {
                Ok(m) => m,
                Err(e) => return e,
            };
            model.params = params.clone();
            match model.save_dir(dir, model.manifest()) {
                Ok(_) => detail.push_str(&format!(
                    "; last finite checkpoint (epoch {at}, loss {loss:.6}) saved to {}",
                    dir.display()
                )),
                Err(e) => warn!("could not save fallback checkpoint: {e}"),
            }
        }
        Error::Diverged { epoch, detail }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;
    use crate::encoder::EncoderConfig;
    use crate::layout::{synth_grammar, LayoutObject, Profile};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                gru_layers: 1,
                gru_hidden: 8,
                conv_layers: 2,
                conv_channels: 2,
                raster_res: 8,
                spatial_width: 8,
            },
            m: 3,
            head_hidden: 16,
            bank_hidden: 16,
            mixture_hidden: 8,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, &[Tensor::vector(vec![0.0, 0.0])]).unwrap();
        assert_eq!(store.get(store.id("x").unwrap()).data(), &[1.0, -2.0]);
    }

    fn adam_on_square(lr: f64, steps: usize) -> Vec<f64> {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(&store, lr);
        (0..steps)
            .map(|_| {
                let mut tape = Tape::new();
                let x = tape.param(&store, id);
                let sq = tape.mul(x, x).unwrap();
                let g = tape.backward(sq).unwrap().for_params(&store);
                adam.step(&mut store, &g).unwrap();
                store.get(id).item()
            })
            .collect()
    }

    #[test]
    fn quadratic_trajectory_matches_reference() {
        // Reference values from a scalar Adam written independently in Python.
        let xs = adam_on_square(0.1, 20);
        let reference = [
            (0, 0.9000000005),
            (1, 0.8004122287),
            (10, 0.005131501948),
            (11, -0.0589378906),
        ];
        for (k, want) in reference {
            assert!((xs[k] - want).abs() < 1e-6, "step {}: {} vs {want}", k + 1, xs[k]);
        }
        for w in xs[..11].windows(2) {
            assert!(w[1].abs() < w[0].abs());
        }
    }

    #[test]
    fn quadratic_descends_monotonically_at_small_rate() {
        let xs = adam_on_square(0.01, 20);
        let mut prev = 1.0f64;
        for now in xs {
            assert!(now.abs() < prev, "{now} >= {prev}");
            prev = now.abs();
        }
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(0.0)).unwrap();
        let mut adam = Adam::new(&store, 0.01);
        adam.step(&mut store, &[Tensor::scalar(123.0)]).unwrap();
        assert!((store.get(id).item() + 0.01).abs() < 1e-9);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].item() - 0.6).abs() < 1e-12 && (g[1].item() - 0.8).abs() < 1e-12);
        let mut small = vec![Tensor::vector(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].item(), 0.1);
    }

    #[test]
    fn batch_order_depends_on_seed_and_epoch_only() {
        let layouts = synth_grammar(1, 20, Profile::MobileApp);
        let pairs = teacher_forced_pairs(&layouts);
        let key = |b: &Vec<Vec<TrainPair<'_>>>| -> Vec<(usize, usize)> {
            b.iter()
                .flatten()
                .map(|p| (p.layout as *const Layout as usize, p.len))
                .collect()
        };
        let a = epoch_batches(&pairs, 4, 7, 2);
        assert_eq!(key(&a), key(&epoch_batches(&pairs, 4, 7, 2)));
        assert_ne!(key(&a), key(&epoch_batches(&pairs, 4, 7, 3)));
        assert_ne!(key(&a), key(&epoch_batches(&pairs, 4, 8, 2)));
    }

    fn config(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            batch_size: 8,
            epochs,
            model: tiny_model(),
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_losses_constant() {
        let layouts = synth_grammar(2, 6, Profile::SingleColumnDoc);
        let vocab = Profile::SingleColumnDoc.vocabulary();
        let out = Trainer::new(config(3, 0.0), &layouts, vocab).run().unwrap();
        let first = out.log.epochs[0].loss.total;
        for e in &out.log.epochs {
            assert!((e.loss.total - first).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let layouts = synth_grammar(3, 6, Profile::SingleColumnDoc);
        let vocab = Profile::SingleColumnDoc.vocabulary();
        let a = Trainer::new(config(2, 0.01), &layouts, vocab.clone()).run().unwrap();
        let b = Trainer::new(config(2, 0.01), &layouts, vocab).run().unwrap();
        assert_eq!(a.log.epochs, b.log.epochs);
        assert_eq!(a.manifest.checkpoint_sha256, b.manifest.checkpoint_sha256);
    }

    #[test]
    fn memorizes_a_single_layout() {
        let layouts = vec![Layout::new(
            vec![
                LayoutObject::new(1, [0.1, 0.05, 0.8, 0.06]),
                LayoutObject::new(0, [0.1, 0.15, 0.8, 0.3]),
            ],
            Canvas::default(),
            "one",
        )];
        let vocab = Profile::SingleColumnDoc.vocabulary();
        let cfg = TrainConfig {
            learning_rate: 0.003,
            batch_size: 2,
            epochs: 250,
            ..config(0, 0.0)
        };
        let out = Trainer::new(cfg, &layouts, vocab).run().unwrap();
        assert!(out.log.steps <= 500);
        assert!(out.log.best_eval.total < 0.01, "{:?}", out.log.best_eval);
    }

    #[test]
    fn reload_reproduces_logged_loss() {
        let layouts = synth_grammar(4, 6, Profile::SingleColumnDoc);
        let vocab = Profile::SingleColumnDoc.vocabulary();
        let dir = tempfile::tempdir().unwrap();
        let out = Trainer::new(config(2, 0.01), &layouts, vocab)
            .with_out_dir(dir.path())
            .run()
            .unwrap();
        let (model, manifest) = Model::load_dir(dir.path()).unwrap();
        assert!(manifest.pairing.is_some());
        let pairs = teacher_forced_pairs(&layouts);
        let (eval, _) = model
            .evaluate(&pairs, crate::mcl::LossVariant::MixtureWta, LossWeights::default(), 8)
            .unwrap();
        assert!((eval.total - out.log.best_eval.total).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs_rejected() {
        let layouts = synth_grammar(4, 2, Profile::SingleColumnDoc);
        let vocab = Profile::SingleColumnDoc.vocabulary();
        let bad = TrainConfig {
            batch_size: 0,
            ..config(1, 0.01)
        };
        assert!(Trainer::new(bad, &layouts, vocab.clone()).run().is_err());
        assert!(Trainer::new(config(1, 0.01), &[], vocab).run().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let layouts = synth_grammar(5, 4, Profile::SingleColumnDoc);
        let vocab = Profile::SingleColumnDoc.vocabulary();
        let cfg = TrainConfig {
            learning_rate: f64::MAX,
            clip_norm: f64::MAX,
            ..config(3, 0.0)
        };
        let r = Trainer::new(cfg, &layouts, vocab).run();
        assert!(matches!(r, Err(Error::Diverged { .. })), "{:?}", r.err());
    }

    #[test]
    fn warmup_schedule_hands_over_to_main_loss() {
        let mut cfg = TrainConfig {
            warmup: Some(Warmup {
                loss: LossKind::Ewta,
                epochs: 2,
            }),
            ..config(6, 0.01)
        };
        cfg.model.m = 10;
        cfg.validate().unwrap();
        // 10 steps per epoch: 20 warm-up steps split into four EWTA phases of 5
        let ks: Vec<_> = [0, 4, 5, 10, 15, 19]
            .iter()
            .map(|&s| cfg.variant_at(s, 10))
            .collect();
        use crate::mcl::LossVariant::*;
        assert_eq!(ks[0], EvolvingWta { k: 10 });
        assert_eq!(ks[1], EvolvingWta { k: 10 });
        assert_eq!(ks[2], EvolvingWta { k: 5 });
        assert_eq!(ks[3], EvolvingWta { k: 2 });
        assert_eq!(ks[4], EvolvingWta { k: 1 });
        assert_eq!(ks[5], EvolvingWta { k: 1 });
        assert_eq!(cfg.variant_at(20, 10), MixtureWta);
        assert_eq!(cfg.variant_at(59, 10), MixtureWta);
        assert_eq!(config(6, 0.01).variant_at(0, 10), MixtureWta);

        let too_long = TrainConfig {
            warmup: Some(Warmup {
                loss: LossKind::Rwta,
                epochs: 6,
            }),
            ..config(6, 0.01)
        };
        assert!(too_long.validate().is_err());
    }

    #[test]
    fn best_checkpoint_comes_from_main_phase() {
        let layouts = synth_grammar(6, 6, Profile::SingleColumnDoc);
        let vocab = Profile::SingleColumnDoc.vocabulary();
        let cfg = TrainConfig {
            warmup: Some(Warmup {
                loss: LossKind::Ewta,
                epochs: 2,
            }),
            ..config(3, 0.01)
        };
        let out = Trainer::new(cfg, &layouts, vocab).run().unwrap();
        assert_eq!(out.log.epochs.len(), 3);
        assert_eq!(out.log.best_epoch, 2);
    }
}
