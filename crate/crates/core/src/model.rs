//! The full autoregressive model: encoder, category head, stop head, the
//! hypothesis bank and the mixture layer, plus teacher-forced losses and the
//! on-disk checkpoint directory.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{checkpoint, Mlp2, ParamStore, Tape, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::layout::{Canvas, CategoryVocabulary, Layout, LayoutObject};
use crate::mcl::{
    pair_report, wta_loss, LossVariant, MixtureLayer, PairReport, PairSample, PredictorBank,
    DEFAULT_M,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub m: usize,
    pub head_hidden: usize,
    pub bank_hidden: usize,
    pub mixture_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            m: DEFAULT_M,
            head_hidden: 64,
            bank_hidden: 32,
            mixture_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub category: f64,
    pub stop: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            category: 1.0,
            stop: 1.0,
            bbox: 40.0,
        }
    }
}

/// One teacher-forced example: the prefix `layout.objects[..len]` predicts
/// `layout.objects[len]`, whose stop flag is the stop target.
#[derive(Debug, Clone, Copy)]
pub struct TrainPair<'a> {
    pub layout: &'a Layout,
    pub len: usize,
}

impl<'a> TrainPair<'a> {
    pub fn prefix(&self) -> &'a [LayoutObject] {
        &self.layout.objects[..self.len]
    }

    pub fn next(&self) -> &'a LayoutObject {
        &self.layout.objects[self.len]
    }
}

/// Every prefix of every layout, `n` pairs per `n`-object layout.
pub fn teacher_forced_pairs(layouts: &[Layout]) -> Vec<TrainPair<'_>> {
    layouts
        .iter()
        .flat_map(|l| (0..l.len()).map(move |len| TrainPair { layout: l, len }))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Network {
    pub encoder: Encoder,
    pub category_head: Mlp2,
    pub stop_head: Mlp2,
    pub bank: PredictorBank,
    pub mixture: MixtureLayer,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: CategoryVocabulary,
    pub canvas: Canvas,
    pub net: Network,
    pub params: ParamStore,
}

/// Scalar parts of one batch loss plus the bookkeeping pairing needs.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub category: f64,
    pub stop: f64,
    pub bbox: f64,
    pub samples: Vec<PairSample>,
}

/// Per-step outputs for a batch of prefixes.
#[derive(Debug, Clone, Copy)]
pub struct StepOutputs {
    pub shared: Var,
    pub category_logits: Var,
    pub stop_logit: Var,
}

impl Network {
    pub fn new(
        store: &mut ParamStore,
        config: &ModelConfig,
        num_categories: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let encoder = Encoder::new(store, "enc", config.encoder.clone(), num_categories, rng)?;
        let s = encoder.shared_width();
        Ok(Network {
            category_head: Mlp2::new(store, "cat", s, config.head_hidden, num_categories, rng)?,
            stop_head: Mlp2::new(store, "stop", s, config.head_hidden, 1, rng)?,
            bank: PredictorBank::new(
                store,
                "bank",
                s,
                config.bank_hidden,
                config.m,
                num_categories,
                4,
                rng,
            )?,
            mixture: MixtureLayer::new(
                store,
                "mix",
                s,
                config.mixture_hidden,
                config.m,
                num_categories,
                rng,
            )?,
            encoder,
        })
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefixes: &[&[LayoutObject]],
    ) -> Result<StepOutputs> {
        let shared = self.encoder.encode(tape, store, prefixes)?.shared;
        Ok(StepOutputs {
            shared,
            category_logits: self.category_head.forward(tape, store, shared)?,
            stop_logit: self.stop_head.forward(tape, store, shared)?,
        })
    }

    /// Weighted objective for pairs that share one prefix length.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pairs: &[TrainPair<'_>],
        variant: LossVariant,
        weights: LossWeights,
    ) -> Result<BatchLoss> {
        if pairs.is_empty() {
            return Err(Error::Empty("empty training batch"));
        }
        let b = pairs.len();
        let c = self.encoder.num_categories;
        let inv_b = 1.0 / b as f64;
        let prefixes: Vec<&[LayoutObject]> = pairs.iter().map(|p| p.prefix()).collect();
        let out = self.step(tape, store, &prefixes)?;
        let cats: Vec<usize> = pairs.iter().map(|p| p.next().category).collect();

        // category NLL
        let logp = tape.log_softmax(out.category_logits, 1)?;
        let mut pick = Tensor::zeros(&[b, c]);
        for (r, &cat) in cats.iter().enumerate() {
            pick.data_mut()[r * c + cat] = 1.0;
        }
        let pick = tape.leaf(pick);
        let picked = tape.mul(logp, pick)?;
        let lc = tape.sum(picked, None)?;
        let lc = tape.scale(lc, -inv_b);

        // stop BCE as a two-way softmax over [0, logit]
        let zeros = tape.leaf(Tensor::zeros(&[b, 1]));
        let two = tape.concat(&[zeros, out.stop_logit], 1)?;
        let logq = tape.log_softmax(two, 1)?;
        let mut pick = Tensor::zeros(&[b, 2]);
        for (r, p) in pairs.iter().enumerate() {
            pick.data_mut()[r * 2 + usize::from(p.next().stop)] = 1.0;
        }
        let pick = tape.leaf(pick);
        let picked = tape.mul(logq, pick)?;
        let ls = tape.sum(picked, None)?;
        let ls = tape.scale(ls, -inv_b);

        // hypothesis loss on each true category's sub-bank
        let mix = self.mixture.logits(tape, store, out.shared, &cats)?;
        let log_phi_all = tape.log_softmax(mix, 1)?;
        let phi_all = tape.value(log_phi_all).map(f64::exp);
        let mut parts = Vec::new();
        let mut samples = Vec::with_capacity(b);
        for cat in 0..c {
            let rows: Vec<usize> = (0..b).filter(|&r| cats[r] == cat).collect();
            if rows.is_empty() {
                continue;
            }
            let x = tape.gather_rows(out.shared, &rows)?;
            let hyps = self.bank.hypotheses(tape, store, x, cat)?;
            let target: Vec<f64> = rows.iter().flat_map(|&r| pairs[r].next().bbox).collect();
            let target = tape.leaf(Tensor::new(vec![rows.len(), 4], target)?);
            let lp = tape.gather_rows(log_phi_all, &rows)?;
            let w = wta_loss(tape, &hyps, target, variant, Some(lp))?;
            for (k, &r) in rows.iter().enumerate() {
                let win = w.winners[k];
                samples.push(PairSample {
                    category: cat,
                    winner: win,
                    l1: w.l1.get2(k, win),
                    phi: phi_all.row(r).to_vec(),
                });
            }
            parts.push(w.loss);
        }
        let lb = if parts.len() == 1 {
            parts[0]
        } else {
            let stacked = tape.concat(&parts, 0)?;
            tape.sum(stacked, None)?
        };
        let lb = tape.scale(lb, inv_b);

        let (vc, vs, vb) = (
            tape.value(lc).item(),
            tape.value(ls).item(),
            tape.value(lb).item(),
        );
        let t1 = tape.scale(lc, weights.category);
        let t2 = tape.scale(ls, weights.stop);
        let t3 = tape.scale(lb, weights.bbox);
        let total = tape.add(t1, t2)?;
        let total = tape.add(total, t3)?;
        Ok(BatchLoss {
            total,
            category: vc,
            stop: vs,
            bbox: vb,
            samples,
        })
    }
}

/// Splits pairs into batches that share a prefix length, keeping the input order
/// within each length.
pub fn bucket_by_length<'a>(pairs: &[TrainPair<'a>], batch_size: usize) -> Vec<Vec<TrainPair<'a>>> {
    let max_len = pairs.iter().map(|p| p.len).max().unwrap_or(0);
    let mut buckets: Vec<Vec<TrainPair<'a>>> = vec![Vec::new(); max_len + 1];
    for p in pairs {
        buckets[p.len].push(*p);
    }
    buckets
        .into_iter()
        .flat_map(|b| {
            b.chunks(batch_size.max(1))
                .map(|c| c.to_vec())
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub vocabulary: CategoryVocabulary,
    pub model: ModelConfig,
    pub canvas: Canvas,
    pub checkpoint_sha256: String,
    #[serde(default)]
    pub corpus_hash: Option<String>,
    #[serde(default)]
    pub pairing: Option<PairReport>,
    /// Training configuration and log, stored verbatim.
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: CategoryVocabulary, canvas: Canvas, seed: u64) -> Result<Self> {
        if config.m == 0 {
            return Err(Error::Config("M must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = Network::new(&mut params, &config, vocab.len(), &mut rng)?;
        Ok(Model {
            config,
            vocab,
            canvas,
            net,
            params,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.vocab.len()
    }

    /// Mean loss parts over `pairs`, evaluated in length buckets.
    pub fn evaluate(
        &self,
        pairs: &[TrainPair<'_>],
        variant: LossVariant,
        weights: LossWeights,
        batch_size: usize,
    ) -> Result<(LossSummary, Vec<PairSample>)> {
        let mut acc = LossSummary::default();
        let mut samples = Vec::with_capacity(pairs.len());
        for batch in bucket_by_length(pairs, batch_size) {
            let mut tape = Tape::new();
            let l = self
                .net
                .batch_loss(&mut tape, &self.params, &batch, variant, weights)?;
            acc.add(&l, tape.value(l.total).item(), batch.len());
            samples.extend(l.samples);
        }
        Ok((acc.finish(), samples))
    }

    pub fn pairing(
        &self,
        pairs: &[TrainPair<'_>],
        tau: f64,
        batch_size: usize,
    ) -> Result<PairReport> {
        let (_, samples) = self.evaluate(
            pairs,
            LossVariant::MixtureWta,
            LossWeights::default(),
            batch_size,
        )?;
        Ok(pair_report(&samples, self.config.m, self.num_categories(), tau))
    }

    pub fn save_dir(&self, dir: &Path, mut manifest: Manifest) -> Result<Manifest> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &self.params)?;
        manifest.checkpoint_sha256 = checkpoint::digest(&self.params);
        manifest.vocabulary = self.vocab.clone();
        manifest.model = self.config.clone();
        manifest.canvas = self.canvas;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            vocabulary: self.vocab.clone(),
            model: self.config.clone(),
            canvas: self.canvas,
            checkpoint_sha256: checkpoint::digest(&self.params),
            corpus_hash: None,
            pairing: None,
            training: None,
        }
    }

    pub fn load_dir(dir: &Path) -> Result<(Self, Manifest)> {
        let bytes = std::fs::read(dir.join(MANIFEST_FILE))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let stored = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
        let mut model = Model::new(
            manifest.model.clone(),
            manifest.vocabulary.clone(),
            manifest.canvas,
            0,
        )?;
        model.params.load_from(&stored)?;
        let digest = checkpoint::digest(&model.params);
        if digest != manifest.checkpoint_sha256 {
            return Err(Error::Checkpoint(format!(
                "parameter digest {digest} does not match manifest {}",
                manifest.checkpoint_sha256
            )));
        }
        Ok((model, manifest))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub category: f64,
    pub stop: f64,
    pub bbox: f64,
    pub count: usize,
}

impl LossSummary {
    pub(crate) fn add(&mut self, l: &BatchLoss, total: f64, n: usize) {
        let w = n as f64;
        self.total += total * w;
        self.category += l.category * w;
        self.stop += l.stop * w;
        self.bbox += l.bbox * w;
        self.count += n;
    }

    pub(crate) fn finish(mut self) -> Self {
        if self.count > 0 {
            let n = self.count as f64;
            self.total /= n;
            self.category /= n;
            self.stop /= n;
            self.bbox /= n;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check, GradCheckConfig};
    use crate::layout::{synth_grammar, Profile};
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                gru_layers: 1,
                gru_hidden: 3,
                conv_layers: 2,
                conv_channels: 2,
                raster_res: 4,
                spatial_width: 2,
            },
            m: 3,
            head_hidden: 3,
            bank_hidden: 3,
            mixture_hidden: 3,
        }
    }

    fn tiny_model(seed: u64) -> Model {
        let vocab = CategoryVocabulary::new(["a", "b"]).unwrap();
        Model::new(tiny_config(), vocab, Canvas::default(), seed).unwrap()
    }

    fn corpus() -> Vec<Layout> {
        vec![
            Layout::new(
                vec![
                    LayoutObject::new(0, [0.1, 0.1, 0.8, 0.1]),
                    LayoutObject::new(1, [0.1, 0.3, 0.4, 0.3]),
                    LayoutObject::new(1, [0.55, 0.3, 0.35, 0.3]),
                ],
                Canvas::default(),
                "t",
            ),
            Layout::new(
                vec![
                    LayoutObject::new(0, [0.2, 0.05, 0.6, 0.1]),
                    LayoutObject::new(0, [0.2, 0.2, 0.6, 0.5]),
                ],
                Canvas::default(),
                "t",
            ),
        ]
    }

    #[test]
    fn split_yields_one_pair_per_object() {
        let layouts = corpus();
        let pairs = teacher_forced_pairs(&layouts);
        assert_eq!(pairs.len(), 5);
        let stops: Vec<bool> = pairs.iter().map(|p| p.next().stop).collect();
        assert_eq!(stops, vec![false, false, true, false, true]);
        assert_eq!(pairs[2].prefix().len(), 2);
    }

    #[test]
    fn buckets_share_length() {
        let layouts = synth_grammar(1, 30, Profile::MobileApp);
        let pairs = teacher_forced_pairs(&layouts);
        let batches = bucket_by_length(&pairs, 8);
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), pairs.len());
        for b in &batches {
            assert!(b.len() <= 8);
            assert!(b.iter().all(|p| p.len == b[0].len));
        }
    }

    #[test]
    fn zero_bbox_weight_leaves_category_plus_stop() {
        let model = tiny_model(1);
        let layouts = corpus();
        let pairs = teacher_forced_pairs(&layouts);
        let batch: Vec<_> = pairs.iter().filter(|p| p.len == 1).copied().collect();
        let mut tape = Tape::new();
        let w = LossWeights {
            bbox: 0.0,
            ..LossWeights::default()
        };
        let l = model
            .net
            .batch_loss(&mut tape, &model.params, &batch, LossVariant::MixtureWta, w)
            .unwrap();
        assert_eq!(tape.value(l.total).item(), l.category + l.stop);
        assert!(l.bbox > 0.0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let model = tiny_model(1);
        let mut tape = Tape::new();
        assert!(model
            .net
            .batch_loss(
                &mut tape,
                &model.params,
                &[],
                LossVariant::MixtureWta,
                LossWeights::default()
            )
            .is_err());
    }

    #[test]
    fn category_head_is_a_distribution() {
        let model = tiny_model(2);
        let layouts = corpus();
        let mut tape = Tape::new();
        let out = model
            .net
            .step(&mut tape, &model.params, &[&layouts[0].objects[..2]])
            .unwrap();
        let p = tape.softmax(out.category_logits, 1).unwrap();
        assert!((tape.value(p).sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradcheck_composed_model() {
        let mut model = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            for v in model.params.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let layouts = corpus();
        let pairs = teacher_forced_pairs(&layouts);
        let batch: Vec<_> = pairs.iter().filter(|p| p.len == 1).copied().collect();
        let net = model.net.clone();
        for variant in [LossVariant::MixtureWta, LossVariant::RelaxedWta { eps: 0.05 }] {
            let report = check(&model.params, GradCheckConfig::default(), |tape, s| {
                Ok(net
                    .batch_loss(tape, s, &batch, variant, LossWeights::default())?
                    .total)
            })
            .unwrap();
            assert!(report.passed(), "{variant:?}: {:?}", report.failures.first());
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let model = tiny_model(4);
        let dir = tempfile::tempdir().unwrap();
        let saved = model.save_dir(dir.path(), model.manifest()).unwrap();
        let (back, manifest) = Model::load_dir(dir.path()).unwrap();
        assert_eq!(manifest.checkpoint_sha256, saved.checkpoint_sha256);
        assert_eq!(back.vocab, model.vocab);
        let layouts = corpus();
        let pairs = teacher_forced_pairs(&layouts);
        let (a, _) = model
            .evaluate(&pairs, LossVariant::MixtureWta, LossWeights::default(), 4)
            .unwrap();
        let (b, _) = back
            .evaluate(&pairs, LossVariant::MixtureWta, LossWeights::default(), 4)
            .unwrap();
        assert!((a.total - b.total).abs() < 1e-9);
    }

    #[test]
    fn tampered_checkpoint_rejected() {
        let model = tiny_model(4);
        let dir = tempfile::tempdir().unwrap();
        model.save_dir(dir.path(), model.manifest()).unwrap();
        let mut other = tiny_model(5);
        other.params.zero_all();
        checkpoint::save(&dir.path().join(CHECKPOINT_FILE), &other.params).unwrap();
        assert!(matches!(Model::load_dir(dir.path()), Err(Error::Checkpoint(_))));
    }
}
