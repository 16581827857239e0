//! Two-dimensional toy task: `M` hypotheses and a mixture layer fed by one
//! constant input, trained against `K` fixed points. Used to watch the pairing
//! and boosting stages and to compare the WTA variants.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::mcl::{wta_loss, LossKind, MixtureLayer, PredictorBank, DEFAULT_PAIR_TAU, RWTA_EPS};
use crate::trainer::Adam;

/// A hypothesis farther than this (L1) from every ground truth is stuck.
pub const STUCK_DELTA: f64 = 0.05;
/// Pairing is complete once every ground truth has a hypothesis this close.
pub const PAIRED_L1: f64 = 0.02;
/// Boosting is complete once paired hypotheses hold this much φ mass.
pub const BOOSTED_MASS: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub ground_truths: Vec<[f64; 2]>,
    pub m: usize,
    pub hidden: usize,
    pub mixture_hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub snapshot_every: usize,
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask {
            // each coordinate's middle value is the mean of the other two, so
            // the L1 minimizer of a single hypothesis is the centroid
            ground_truths: vec![[0.2, 0.5], [0.5, 0.2], [0.8, 0.8]],
            m: 10,
            hidden: 16,
            mixture_hidden: 4,
            batch_size: 32,
            learning_rate: 0.01,
            steps: 8000,
            snapshot_every: 50,
        }
    }
}

impl ToyTask {
    /// `k` points spread over the unit square, with the default three first.
    pub fn with_ground_truths(k: usize) -> Self {
        let base = ToyTask::default();
        let extra = [[0.2, 0.85], [0.85, 0.2], [0.5, 0.5], [0.15, 0.15], [0.65, 0.45]];
        let gts = base.ground_truths.iter().chain(&extra).cycle().take(k).copied().collect();
        ToyTask {
            ground_truths: gts,
            ..base
        }
    }

    pub fn centroid(&self) -> [f64; 2] {
        let k = self.ground_truths.len() as f64;
        let sx: f64 = self.ground_truths.iter().map(|p| p[0]).sum();
        let sy: f64 = self.ground_truths.iter().map(|p| p[1]).sum();
        [sx / k, sy / k]
    }

    pub fn validate(&self) -> Result<()> {
        if self.ground_truths.is_empty() || self.m == 0 {
            return Err(Error::Config("toy task needs K >= 1 and M >= 1".into()));
        }
        if self.ground_truths.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("toy ground truths must lie in the unit square".into()));
        }
        for (i, a) in self.ground_truths.iter().enumerate() {
            if self.ground_truths[..i].contains(a) {
                return Err(Error::Config(format!("duplicate ground truth {a:?}")));
            }
        }
        if self.batch_size == 0 || self.steps == 0 || self.snapshot_every == 0 || self.hidden == 0 || self.mixture_hidden == 0 {
            return Err(Error::Config("toy sizes must be positive".into()));
        }
        Ok(())
    }
}

fn l1(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub hypotheses: Vec<[f64; 2]>,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySummary {
    /// L1 from each ground truth to its nearest hypothesis.
    pub nearest: Vec<f64>,
    /// Hypotheses that are nearest to some ground truth within the pairing threshold.
    pub paired: Vec<bool>,
    pub paired_count: usize,
    pub unpaired_mass: f64,
    pub stuck_count: usize,
    /// φ mass on stuck hypotheses.
    pub stuck_mass: f64,
    pub covered: bool,
}

impl ToySummary {
    pub fn from_state(task: &ToyTask, hypotheses: &[[f64; 2]], phi: &[f64]) -> Self {
        let mut paired = vec![false; hypotheses.len()];
        let nearest = task
            .ground_truths
            .iter()
            .map(|&g| {
                let d: Vec<f64> = hypotheses.iter().map(|&h| l1(h, g)).collect();
                let w = crate::mcl::winner(&d);
                if d[w] < DEFAULT_PAIR_TAU {
                    paired[w] = true;
                }
                d[w]
            })
            .collect::<Vec<_>>();
        let stuck: Vec<bool> = hypotheses
            .iter()
            .map(|&h| task.ground_truths.iter().all(|&g| l1(h, g) > STUCK_DELTA))
            .collect();
        ToySummary {
            covered: nearest.iter().all(|&d| d < PAIRED_L1),
            paired_count: paired.iter().filter(|&&p| p).count(),
            unpaired_mass: phi.iter().zip(&paired).filter(|(_, &p)| !p).map(|(v, _)| v).sum(),
            stuck_count: stuck.iter().filter(|&&s| s).count(),
            stuck_mass: phi.iter().zip(&stuck).filter(|(_, &s)| s).map(|(v, _)| v).sum(),
            nearest,
            paired,
        }
    }

    /// Chance of drawing a hypothesis outside `mask` under `weights`.
    fn mass_outside(weights: &[f64], mask: &[bool]) -> f64 {
        weights.iter().zip(mask).filter(|(_, &p)| !p).map(|(v, _)| v).sum()
    }

    /// Probability of sampling an unpaired hypothesis: φ-weighted for the
    /// mixture loss, uniform `1/M` for the plain WTA variants.
    pub fn unpaired_probability(&self, kind: LossKind, phi: &[f64]) -> f64 {
        match kind {
            LossKind::Mcl => Self::mass_outside(phi, &self.paired),
            _ => 1.0 - self.paired_count as f64 / self.paired.len() as f64,
        }
    }

    /// Probability of sampling a stuck hypothesis under the same weighting.
    pub fn poor_probability(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Mcl => self.stuck_mass,
            _ => self.stuck_count as f64 / self.paired.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub kind: LossKind,
    pub seed: u64,
    pub snapshots: Vec<Snapshot>,
    pub summary: ToySummary,
    pub unpaired_probability: f64,
    pub poor_probability: f64,
    /// First step after which every ground truth is covered.
    pub pairing_step: Option<usize>,
    /// First step after which paired φ mass exceeds 0.9.
    pub boosting_step: Option<usize>,
}

impl ToyRun {
    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("runs record at least one snapshot")
    }

    /// One row per hypothesis per snapshot: `step,hypothesis,x,y,phi`.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "step,hypothesis,x,y,phi")?;
        for s in &self.snapshots {
            for (i, (h, p)) in s.hypotheses.iter().zip(&s.phi).enumerate() {
                writeln!(out, "{},{i},{},{},{}", s.step, h[0], h[1], p)?;
            }
        }
        Ok(())
    }
}

struct ToyModel {
    store: ParamStore,
    bank: PredictorBank,
    mixture: MixtureLayer,
}

impl ToyModel {
    fn new(task: &ToyTask, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bank = PredictorBank::new(&mut store, "toy.bank", 1, task.hidden, task.m, 1, 2, &mut rng)?;
        let mixture = MixtureLayer::new(&mut store, "toy.mix", 1, task.mixture_hidden, task.m, 1, &mut rng)?;
        mixture.zero_output(&mut store);
        Ok(ToyModel { store, bank, mixture })
    }

    fn state(&self) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1]));
        let hyps = self.bank.hypotheses(&mut tape, &self.store, x, 0)?;
        let phi = self.mixture.phi(&mut tape, &self.store, x, &[0])?;
        let points = hyps
            .iter()
            .map(|&h| {
                let v = tape.value(h).data();
                [v[0], v[1]]
            })
            .collect();
        Ok((points, tape.value(phi).data().to_vec()))
    }
}

pub fn run_toy(task: &ToyTask, kind: LossKind, seed: u64) -> Result<ToyRun> {
    task.validate()?;
    let mut model = ToyModel::new(task, seed)?;
    let mut adam = Adam::new(&model.store, task.learning_rate);
    let mut draws = ChaCha8Rng::seed_from_u64(seed);
    draws.set_stream(1);
    let b = task.batch_size;
    let k = task.ground_truths.len();

    let mut snapshots = Vec::new();
    let mut record = |step: usize, model: &ToyModel| -> Result<()> {
        let (hypotheses, phi) = model.state()?;
        snapshots.push(Snapshot { step, hypotheses, phi });
        Ok(())
    };
    let mut pairing_step = None;
    let mut boosting_step = None;
    let mut events = |step: usize, model: &ToyModel| -> Result<()> {
        if pairing_step.is_some() && boosting_step.is_some() {
            return Ok(());
        }
        let (h, phi) = model.state()?;
        let summary = ToySummary::from_state(task, &h, &phi);
        if pairing_step.is_none() && summary.covered {
            pairing_step = Some(step);
        }
        if boosting_step.is_none() && summary.paired_count > 0 && 1.0 - summary.unpaired_mass > BOOSTED_MASS {
            boosting_step = Some(step);
        }
        Ok(())
    };
    record(0, &model)?;
    events(0, &model)?;
    for step in 0..task.steps {
        let variant = kind.variant(RWTA_EPS, task.m, step, task.steps);
        let target: Vec<f64> = (0..b)
            .flat_map(|_| task.ground_truths[draws.gen_range(0..k)])
            .collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[b, 1]));
        let target = tape.leaf(Tensor::new(vec![b, 2], target)?);
        let hyps = model.bank.hypotheses(&mut tape, &model.store, x, 0)?;
        let log_phi = match kind {
            LossKind::Mcl => Some(model.mixture.log_phi(&mut tape, &model.store, x, &vec![0; b])?),
            _ => None,
        };
        let out = wta_loss(&mut tape, &hyps, target, variant, log_phi)?;
        let loss = tape.scale(out.loss, 1.0 / b as f64);
        let grads = tape.backward(loss)?.for_params(&model.store);
        adam.step(&mut model.store, &grads)?;
        events(step + 1, &model)?;
        if (step + 1) % task.snapshot_every == 0 || step + 1 == task.steps {
            record(step + 1, &model)?;
        }
    }

    let last = snapshots.last().expect("initial snapshot");
    let summary = ToySummary::from_state(task, &last.hypotheses, &last.phi);
    Ok(ToyRun {
        kind,
        seed,
        unpaired_probability: summary.unpaired_probability(kind, &last.phi),
        poor_probability: summary.poor_probability(kind),
        summary,
        pairing_step,
        boosting_step,
        snapshots,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub kind: LossKind,
    pub unpaired_probability: MeanStd,
    pub poor_probability: MeanStd,
    pub stuck_count: MeanStd,
    /// Fraction of ground truths with a hypothesis within the pairing threshold.
    pub coverage: MeanStd,
    pub runs: Vec<ToyRun>,
}

/// Every variant in `kinds` on every seed; seeds run in parallel.
pub fn compare_variants(task: &ToyTask, kinds: &[LossKind], seeds: &[u64]) -> Result<Vec<VariantRow>> {
    if seeds.len() < 5 {
        return Err(Error::Config("variant comparison needs at least 5 seeds".into()));
    }
    kinds
        .iter()
        .map(|&kind| {
            let runs: Vec<ToyRun> = seeds
                .par_iter()
                .map(|&s| run_toy(task, kind, s))
                .collect::<Result<_>>()?;
            let col = |f: &dyn Fn(&ToyRun) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
            Ok(VariantRow {
                kind,
                unpaired_probability: col(&|r| r.unpaired_probability),
                poor_probability: col(&|r| r.poor_probability),
                stuck_count: col(&|r| r.summary.stuck_count as f64),
                coverage: col(&|r| {
                    r.summary.nearest.iter().filter(|&&d| d < PAIRED_L1).count() as f64
                        / r.summary.nearest.len() as f64
                }),
                runs,
            })
        })
        .collect()
}

/// Writes `<kind>_seed<seed>.csv` for every run plus `summary.csv`.
pub fn write_comparison(rows: &[VariantRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut summary = std::fs::File::create(dir.join("summary.csv"))?;
    writeln!(
        summary,
        "variant,seed,paired,unpaired_probability,poor_probability,stuck,pairing_step,boosting_step"
    )?;
    let opt = |v: Option<usize>| v.map_or(String::new(), |s| s.to_string());
    for row in rows {
        for r in &row.runs {
            let mut f = std::io::BufWriter::new(std::fs::File::create(
                dir.join(format!("{}_seed{}.csv", row.kind, r.seed)),
            )?);
            r.write_csv(&mut f)?;
            writeln!(
                summary,
                "{},{},{},{},{},{},{},{}",
                row.kind,
                r.seed,
                r.summary.paired_count,
                r.unpaired_probability,
                r.poor_probability,
                r.summary.stuck_count,
                opt(r.pairing_step),
                opt(r.boosting_step)
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short() -> ToyTask {
        ToyTask {
            steps: 200,
            snapshot_every: 20,
            ..ToyTask::default()
        }
    }

    #[test]
    fn initial_phi_is_uniform() {
        let run = run_toy(&short(), LossKind::Mcl, 4).unwrap();
        let phi = &run.snapshots[0].phi;
        let spread = phi.iter().cloned().fold(f64::MIN, f64::max) - phi.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.05);
        assert_eq!(run.snapshots[0].step, 0);
        assert_eq!(run.last().step, 200);
        assert_eq!(run.snapshots.len(), 11);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = run_toy(&short(), LossKind::Ewta, 9).unwrap();
        let b = run_toy(&short(), LossKind::Ewta, 9).unwrap();
        assert_eq!(a, b);
        let c = run_toy(&short(), LossKind::Ewta, 10).unwrap();
        assert_ne!(a.last(), c.last());
    }

    #[test]
    fn default_centroid_is_the_coordinatewise_median() {
        let t = ToyTask::default();
        let c = t.centroid();
        for axis in 0..2 {
            let mut v: Vec<f64> = t.ground_truths.iter().map(|p| p[axis]).collect();
            v.sort_by(f64::total_cmp);
            assert!((v[1] - c[axis]).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_by_hand() {
        let t = ToyTask::default();
        let hyps = [[0.2, 0.51], [0.5, 0.5], [0.8, 0.79], [0.5, 0.23]];
        let phi = [0.4, 0.1, 0.3, 0.2];
        let s = ToySummary::from_state(&t, &hyps, &phi);
        assert_eq!(s.paired, vec![true, false, true, true]);
        assert!((s.unpaired_mass - 0.1).abs() < 1e-12);
        assert_eq!(s.stuck_count, 1);
        assert!(!s.covered);
        assert!((s.nearest[1] - 0.03).abs() < 1e-12);
        assert!((s.unpaired_probability(LossKind::Wta, &phi) - 0.25).abs() < 1e-12);
        assert!((s.poor_probability(LossKind::Mcl) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn csv_shape() {
        let run = run_toy(&ToyTask { steps: 3, snapshot_every: 1, m: 2, ..ToyTask::default() }, LossKind::Wta, 1).unwrap();
        let mut buf = Vec::new();
        run.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 2);
        assert!(text.starts_with("step,hypothesis,x,y,phi\n0,0,"));
    }

    #[test]
    fn rejects_bad_tasks() {
        let dup = ToyTask {
            ground_truths: vec![[0.1, 0.1], [0.1, 0.1]],
            ..ToyTask::default()
        };
        assert!(run_toy(&dup, LossKind::Mcl, 0).is_err());
        assert!(compare_variants(&short(), &[LossKind::Mcl], &[1, 2]).is_err());
    }
}
