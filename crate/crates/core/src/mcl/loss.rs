use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const RWTA_EPS: f64 = 0.05;
/// Lower bound on the winner's coefficient inside the log.
pub const PHI_FLOOR: f64 = 1e-12;

/// Loss family as selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Wta,
    Rwta,
    Ewta,
    Mcl,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Wta, LossKind::Rwta, LossKind::Ewta, LossKind::Mcl];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Wta => "wta",
            LossKind::Rwta => "rwta",
            LossKind::Ewta => "ewta",
            LossKind::Mcl => "mcl",
        }
    }

    /// Concrete variant at `step` of `total_steps`.
    pub fn variant(self, eps: f64, m: usize, step: usize, total_steps: usize) -> LossVariant {
        match self {
            LossKind::Wta => LossVariant::VanillaWta,
            LossKind::Rwta => LossVariant::RelaxedWta { eps },
            LossKind::Ewta => LossVariant::EvolvingWta {
                k: ewta_k(m, step, total_steps),
            },
            LossKind::Mcl => LossVariant::MixtureWta,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}` (wta|rwta|ewta|mcl)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossVariant {
    VanillaWta,
    /// Winner weight 1, every other hypothesis `eps`.
    RelaxedWta { eps: f64 },
    /// The `k` closest hypotheses get weight 1.
    EvolvingWta { k: usize },
    /// Winner only, scaled by `-log φ_winner`.
    MixtureWta,
}

impl LossVariant {
    pub fn validate(&self, m: usize) -> Result<()> {
        match *self {
            LossVariant::RelaxedWta { eps } if !(eps > 0.0 && eps < 1.0) => {
                Err(Error::Config(format!("relaxed eps {eps} outside (0, 1)")))
            }
            LossVariant::EvolvingWta { k } if k == 0 || k > m => {
                Err(Error::Config(format!("evolving k {k} outside [1, {m}]")))
            }
            _ => Ok(()),
        }
    }
}

/// Number of halvings plus one, so the schedule reaches `k = 1` for every `M`.
pub fn ewta_phases(m: usize) -> usize {
    (usize::BITS - m.max(1).leading_zeros()) as usize
}

/// `k` starts at `M` and halves (floor, min 1) once per equal fraction of training.
pub fn ewta_k(m: usize, step: usize, total_steps: usize) -> usize {
    let phases = ewta_phases(m);
    let phase = if total_steps == 0 {
        phases - 1
    } else {
        (step.saturating_mul(phases) / total_steps).min(phases - 1)
    };
    (m >> phase).max(1)
}

/// Lowest index among the minima.
pub fn winner(l1: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in l1.iter().enumerate() {
        if v < l1[best] {
            best = i;
        }
    }
    best
}

/// Per-hypothesis loss weights for one example.
pub fn winner_weights(l1: &[f64], variant: LossVariant) -> Vec<f64> {
    let m = l1.len();
    let w = winner(l1);
    match variant {
        LossVariant::VanillaWta | LossVariant::MixtureWta => {
            (0..m).map(|i| if i == w { 1.0 } else { 0.0 }).collect()
        }
        LossVariant::RelaxedWta { eps } => {
            (0..m).map(|i| if i == w { 1.0 } else { eps }).collect()
        }
        LossVariant::EvolvingWta { k } => {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| l1[a].total_cmp(&l1[b]).then(a.cmp(&b)));
            let mut out = vec![0.0; m];
            for &i in order.iter().take(k.min(m)) {
                out[i] = 1.0;
            }
            out
        }
    }
}

/// `[B, M]` matrix of L1 distances between every hypothesis and its row's target.
pub fn l1_matrix(tape: &mut Tape, hypotheses: &[Var], target: Var) -> Result<Var> {
    let cols = hypotheses
        .iter()
        .map(|&h| {
            let d = tape.sub(h, target)?;
            let d = tape.abs(d);
            tape.sum(d, Some(1))
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&cols, 1)
}

#[derive(Debug, Clone)]
pub struct WtaOutput {
    /// Summed (not averaged) over rows.
    pub loss: Var,
    pub winners: Vec<usize>,
    /// L1 distances, `[B, M]`.
    pub l1: Tensor,
}

/// Winner-takes-all loss over a batch. `log_phi` (`[B, M]`) is required for
/// [`LossVariant::MixtureWta`] and ignored otherwise.
pub fn wta_loss(
    tape: &mut Tape,
    hypotheses: &[Var],
    target: Var,
    variant: LossVariant,
    log_phi: Option<Var>,
) -> Result<WtaOutput> {
    let m = hypotheses.len();
    if m == 0 {
        return Err(Error::Empty("wta_loss needs at least one hypothesis"));
    }
    variant.validate(m)?;
    let dist = l1_matrix(tape, hypotheses, target)?;
    let l1 = tape.value(dist).clone();
    let rows = l1.rows();

    let mut weights = Vec::with_capacity(rows * m);
    let mut winners = Vec::with_capacity(rows);
    for r in 0..rows {
        winners.push(winner(l1.row(r)));
        weights.extend(winner_weights(l1.row(r), variant));
    }
    let mask = tape.leaf(Tensor::new(vec![rows, m], weights)?);

    let weighted = match variant {
        LossVariant::MixtureWta => {
            let lp = log_phi.ok_or(Error::Config("mixture WTA needs log φ".into()))?;
            if tape.shape(lp) != [rows, m] {
                return Err(Error::shape("wta_loss", &[rows, m], tape.shape(lp)));
            }
            let nll = tape.scale(lp, -1.0);
            let nll = tape.clamp(nll, 0.0, -PHI_FLOOR.ln());
            let scaled = tape.mul(dist, nll)?;
            tape.mul(scaled, mask)?
        }
        _ => tape.mul(dist, mask)?,
    };
    let loss = tape.sum(weighted, None)?;
    Ok(WtaOutput { loss, winners, l1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check, GradCheckConfig};
    use crate::diffcore::{Mlp2, ParamStore};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape, rows: &[[f64; 4]]) -> Var {
        let v: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        tape.leaf(Tensor::from_rows(&v).unwrap())
    }

    #[test]
    fn single_hypothesis_is_plain_l1() {
        let mut tape = Tape::new();
        let h = leaf(&mut tape, &[[0.2; 4]]);
        let y = leaf(&mut tape, &[[0.4, 0.2, 0.2, 0.2]]);
        for v in [
            LossVariant::VanillaWta,
            LossVariant::RelaxedWta { eps: 0.05 },
            LossVariant::EvolvingWta { k: 1 },
        ] {
            let out = wta_loss(&mut tape, &[h], y, v, None).unwrap();
            assert!((tape.value(out.loss).item() - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn equidistant_tie_goes_to_lowest_index() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[[0.25, 0.5, 0.5, 0.5]]);
        let b = leaf(&mut tape, &[[0.75, 0.5, 0.5, 0.5]]);
        let y = leaf(&mut tape, &[[0.5; 4]]);
        let out = wta_loss(&mut tape, &[a, b], y, LossVariant::VanillaWta, None).unwrap();
        assert_eq!(out.winners, vec![0]);
    }

    #[test]
    fn mixture_hand_value() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[[0.2, 0.2, 0.2, 0.2]]);
        let b = leaf(&mut tape, &[[0.9, 0.9, 0.9, 0.9]]);
        let y = leaf(&mut tape, &[[0.4, 0.2, 0.2, 0.2]]);
        let lp = tape.leaf(Tensor::new(vec![1, 2], vec![0.5f64.ln(), 0.5f64.ln()]).unwrap());
        let out = wta_loss(&mut tape, &[a, b], y, LossVariant::MixtureWta, Some(lp)).unwrap();
        let expected = 0.2 * -(0.5f64.ln());
        assert!((tape.value(out.loss).item() - expected).abs() < 1e-12);
        assert!((expected - 0.13863).abs() < 1e-5);
    }

    #[test]
    fn zero_coefficient_is_floored() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[[0.2; 4]]);
        let y = leaf(&mut tape, &[[0.3, 0.2, 0.2, 0.2]]);
        let lp = tape.leaf(Tensor::new(vec![1, 1], vec![f64::NEG_INFINITY]).unwrap());
        let out = wta_loss(&mut tape, &[a], y, LossVariant::MixtureWta, Some(lp)).unwrap();
        let v = tape.value(out.loss).item();
        assert!(v.is_finite());
        assert!((v - 0.1 * -(PHI_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn empty_and_invalid_variants_rejected() {
        let mut tape = Tape::new();
        let y = leaf(&mut tape, &[[0.3; 4]]);
        assert!(wta_loss(&mut tape, &[], y, LossVariant::VanillaWta, None).is_err());
        let h = leaf(&mut tape, &[[0.3; 4]]);
        assert!(wta_loss(&mut tape, &[h], y, LossVariant::RelaxedWta { eps: 1.5 }, None).is_err());
        assert!(wta_loss(&mut tape, &[h], y, LossVariant::EvolvingWta { k: 2 }, None).is_err());
        assert!(wta_loss(&mut tape, &[h], y, LossVariant::MixtureWta, None).is_err());
    }

    #[test]
    fn ewta_schedule() {
        let ks: Vec<usize> = (0..8).map(|s| ewta_k(10, s * 100, 800)).collect();
        assert_eq!(ks, vec![10, 10, 5, 5, 2, 2, 1, 1]);
        assert_eq!(ewta_k(8, 799, 800), 1);
        assert_eq!(ewta_k(8, 0, 800), 8);
        assert_eq!(ewta_k(1, 0, 10), 1);
        for m in 1..40 {
            assert_eq!(ewta_k(m, 999, 1000), 1, "M={m}");
            assert_eq!(ewta_k(m, 0, 1000), m);
        }
    }

    #[test]
    fn weights_per_variant() {
        let l1 = [0.4, 0.1, 0.3, 0.1];
        assert_eq!(winner_weights(&l1, LossVariant::VanillaWta), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(
            winner_weights(&l1, LossVariant::RelaxedWta { eps: 0.05 }),
            vec![0.05, 1.0, 0.05, 0.05]
        );
        assert_eq!(
            winner_weights(&l1, LossVariant::EvolvingWta { k: 3 }),
            vec![0.0, 1.0, 1.0, 1.0]
        );
    }

    proptest! {
        #[test]
        fn winner_invariant_under_monotone_transform(v in prop::collection::vec(0.0f64..4.0, 1..12)) {
            let t: Vec<f64> = v.iter().map(|x| (3.0 * x).exp() + x.powi(3)).collect();
            prop_assert_eq!(winner(&v), winner(&t));
        }
    }

    struct Fixture {
        store: ParamStore,
        preds: Vec<Mlp2>,
        mix: Mlp2,
    }

    fn fixture(m: usize) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds = (0..m)
            .map(|i| Mlp2::new(&mut store, &format!("p{i}"), 3, 4, 4, &mut rng).unwrap())
            .collect();
        let mix = Mlp2::new(&mut store, "mix", 3, 4, m, &mut rng).unwrap();
        Fixture { store, preds, mix }
    }

    fn forward(
        f: &Fixture,
        tape: &mut Tape,
        s: &ParamStore,
        variant: LossVariant,
    ) -> Result<WtaOutput> {
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.3, 0.1, 0.8, -0.6])?);
        let y = tape.leaf(Tensor::new(
            vec![2, 4],
            vec![0.1, 0.7, 0.3, 0.2, 0.9, 0.4, 0.5, 0.6],
        )?);
        let hyps = f
            .preds
            .iter()
            .map(|p| {
                let r = p.forward(tape, s, x)?;
                Ok(tape.sigmoid(r))
            })
            .collect::<Result<Vec<_>>>()?;
        let z = f.mix.forward(tape, s, x)?;
        let lp = tape.log_softmax(z, 1)?;
        wta_loss(tape, &hyps, y, variant, Some(lp))
    }

    fn grad_norms(f: &Fixture, variant: LossVariant) -> (Vec<usize>, Vec<f64>, f64) {
        let mut tape = Tape::new();
        let out = forward(f, &mut tape, &f.store, variant).unwrap();
        let g = tape.backward(out.loss).unwrap();
        let norm = |p: &Mlp2| {
            p.params()
                .iter()
                .map(|&id| g.param(id).map_or(0.0, |t| t.sq_norm()))
                .sum::<f64>()
        };
        (
            out.winners,
            f.preds.iter().map(norm).collect(),
            norm(&f.mix),
        )
    }

    #[test]
    fn vanilla_gradient_reaches_winners_only() {
        let f = fixture(5);
        let (winners, norms, mix) = grad_norms(&f, LossVariant::VanillaWta);
        for (i, n) in norms.iter().enumerate() {
            assert_eq!(*n > 0.0, winners.contains(&i), "predictor {i}");
        }
        assert_eq!(mix, 0.0);
    }

    #[test]
    fn relaxed_gradient_reaches_everyone() {
        let f = fixture(5);
        let (_, norms, _) = grad_norms(&f, LossVariant::RelaxedWta { eps: 0.05 });
        assert!(norms.iter().all(|&n| n > 0.0));
    }

    #[test]
    fn mixture_gradient_reaches_winner_and_mixture() {
        let f = fixture(5);
        let (winners, norms, mix) = grad_norms(&f, LossVariant::MixtureWta);
        for (i, n) in norms.iter().enumerate() {
            assert_eq!(*n > 0.0, winners.contains(&i));
        }
        assert!(mix > 0.0);
    }

    #[test]
    fn gradcheck_every_variant() {
        let f = fixture(4);
        for v in [
            LossVariant::VanillaWta,
            LossVariant::RelaxedWta { eps: 0.05 },
            LossVariant::EvolvingWta { k: 2 },
            LossVariant::MixtureWta,
        ] {
            let report = check(&f.store, GradCheckConfig::default(), |tape, s| {
                Ok(forward(&f, tape, s, v)?.loss)
            })
            .unwrap();
            assert!(report.passed(), "{v:?}: {:?}", report.failures.first());
        }
    }

    #[test]
    fn mixture_gradient_decomposes() {
        // d/d(mixture) of -log φ_w · L1 equals L1 times d/d(mixture) of -log φ_w
        let f = fixture(3);
        let mut tape = Tape::new();
        let out = forward(&f, &mut tape, &f.store, LossVariant::MixtureWta).unwrap();
        let full = tape.backward(out.loss).unwrap();

        let mut t2 = Tape::new();
        let x = t2.leaf(Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.3, 0.1, 0.8, -0.6]).unwrap());
        let z = f.mix.forward(&mut t2, &f.store, x).unwrap();
        let lp = t2.log_softmax(z, 1).unwrap();
        let mut coef = vec![0.0; 6];
        for (r, &w) in out.winners.iter().enumerate() {
            coef[r * 3 + w] = -out.l1.get2(r, w);
        }
        let c = t2.leaf(Tensor::new(vec![2, 3], coef).unwrap());
        let prod = t2.mul(lp, c).unwrap();
        let root = t2.sum(prod, None).unwrap();
        let expected = t2.backward(root).unwrap();
        for id in f.mix.params() {
            let a = full.param(id).unwrap();
            let b = expected.param(id).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("mcl".parse::<LossKind>().unwrap(), LossKind::Mcl);
        assert!("mdn".parse::<LossKind>().is_err());
    }
}
