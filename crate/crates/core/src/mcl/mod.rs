//! Multi-choice learning: per-category hypothesis banks, the mixture
//! coefficient layer, the winner-takes-all loss family and pairing bookkeeping.

mod loss;
mod pairing;

pub use loss::{ewta_k, ewta_phases, l1_matrix, winner, winner_weights, wta_loss, LossKind, LossVariant, WtaOutput, PHI_FLOOR, RWTA_EPS};
pub use pairing::{draw_index, pair_report, sample_predictor, size_hint_weights, CategoryPairing, PairReport, PairSample, DEFAULT_PAIR_TAU, SIZE_HINT_BANDWIDTH};

use rand::Rng;

use crate::diffcore::{Mlp2, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_M: usize = 10;

/// `M` independent two-layer predictors per category, squashed into (0,1).
#[derive(Debug, Clone)]
pub struct PredictorBank {
    pub m: usize,
    pub num_categories: usize,
    pub out_dim: usize,
    predictors: Vec<Mlp2>,
}

impl PredictorBank {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        m: usize,
        num_categories: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("M must be at least 1".into()));
        }
        let mut predictors = Vec::with_capacity(m * num_categories);
        for c in 0..num_categories {
            for i in 0..m {
                predictors.push(Mlp2::new(
                    store,
                    &format!("{name}.c{c}.p{i}"),
                    input,
                    hidden,
                    out_dim,
                    rng,
                )?);
            }
        }
        Ok(PredictorBank {
            m,
            num_categories,
            out_dim,
            predictors,
        })
    }

    pub fn predictor(&self, category: usize, index: usize) -> &Mlp2 {
        &self.predictors[category * self.m + index]
    }

    /// The category's `M` hypotheses for every row of `x`, each `[B, out_dim]`.
    pub fn hypotheses(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        category: usize,
    ) -> Result<Vec<Var>> {
        if category >= self.num_categories {
            return Err(Error::CategoryIndex {
                index: category,
                len: self.num_categories,
            });
        }
        (0..self.m)
            .map(|i| {
                let raw = self.predictor(category, i).forward(tape, store, x)?;
                Ok(tape.sigmoid(raw))
            })
            .collect()
    }
}

/// `φ = softmax(F_d([x ; onehot(c)]))`.
#[derive(Debug, Clone)]
pub struct MixtureLayer {
    pub m: usize,
    pub num_categories: usize,
    net: Mlp2,
}

impl MixtureLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        m: usize,
        num_categories: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(MixtureLayer {
            m,
            num_categories,
            net: Mlp2::new(store, name, input + num_categories, hidden, m, rng)?,
        })
    }

    /// Unnormalized scores `[B, M]`; `categories[b]` conditions row `b`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        categories: &[usize],
    ) -> Result<Var> {
        let rows = tape.shape(x)[0];
        if categories.len() != rows {
            return Err(Error::shape("mixture_layer", &[rows], &[categories.len()]));
        }
        let c = self.num_categories;
        let mut onehot = Tensor::zeros(&[rows, c]);
        for (r, &cat) in categories.iter().enumerate() {
            if cat >= c {
                return Err(Error::CategoryIndex { index: cat, len: c });
            }
            onehot.data_mut()[r * c + cat] = 1.0;
        }
        let onehot = tape.leaf(onehot);
        let joined = tape.concat(&[x, onehot], 1)?;
        self.net.forward(tape, store, joined)
    }

    /// Zeroes the output projection so `φ` starts exactly uniform.
    pub fn zero_output(&self, store: &mut ParamStore) {
        for v in store.get_mut(self.net.out.weight).data_mut() {
            *v = 0.0;
        }
    }

    pub fn log_phi(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        categories: &[usize],
    ) -> Result<Var> {
        let z = self.logits(tape, store, x, categories)?;
        tape.log_softmax(z, 1)
    }

    pub fn phi(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        categories: &[usize],
    ) -> Result<Var> {
        let z = self.logits(tape, store, x, categories)?;
        tape.softmax(z, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(m: usize) -> (ParamStore, PredictorBank, MixtureLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = PredictorBank::new(&mut store, "bank", 3, 5, m, 2, 4, &mut rng).unwrap();
        let mix = MixtureLayer::new(&mut store, "mix", 3, 5, m, 2, &mut rng).unwrap();
        (store, bank, mix)
    }

    fn input(tape: &mut Tape) -> Var {
        tape.leaf(Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 1.0, 0.5, -0.4]).unwrap())
    }

    #[test]
    fn bank_has_m_hypotheses_in_unit_box() {
        let (store, bank, _) = setup(10);
        let mut tape = Tape::new();
        let x = input(&mut tape);
        let h = bank.hypotheses(&mut tape, &store, x, 1).unwrap();
        assert_eq!(h.len(), 10);
        for v in h {
            assert_eq!(tape.shape(v), &[2, 4]);
            assert!(tape.value(v).data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
        assert!(matches!(
            bank.hypotheses(&mut tape, &store, x, 2),
            Err(Error::CategoryIndex { index: 2, len: 2 })
        ));
    }

    #[test]
    fn zero_params_give_centre_boxes_and_uniform_phi() {
        let (mut store, bank, mix) = setup(4);
        store.zero_all();
        let mut tape = Tape::new();
        let x = input(&mut tape);
        for v in bank.hypotheses(&mut tape, &store, x, 0).unwrap() {
            assert!(tape.value(v).data().iter().all(|&p| p == 0.5));
        }
        let phi = mix.phi(&mut tape, &store, x, &[0, 1]).unwrap();
        assert!(tape.value(phi).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn categories_use_distinct_sub_banks() {
        let (store, bank, _) = setup(3);
        let mut tape = Tape::new();
        let x = input(&mut tape);
        let a = bank.hypotheses(&mut tape, &store, x, 0).unwrap();
        let b = bank.hypotheses(&mut tape, &store, x, 1).unwrap();
        assert_ne!(tape.value(a[0]), tape.value(b[0]));
    }

    #[test]
    fn phi_is_a_distribution_that_depends_on_category() {
        let (store, _, mix) = setup(10);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 0.3, -0.2, 0.9]).unwrap());
        let phi = mix.phi(&mut tape, &store, x, &[0, 1]).unwrap();
        let t = tape.value(phi);
        for r in 0..2 {
            assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(t.row(r).iter().all(|&p| p >= 0.0));
        }
        assert_ne!(t.row(0), t.row(1));
    }
}
