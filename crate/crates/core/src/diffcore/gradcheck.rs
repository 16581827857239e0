//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values, so it is independent
//! of every backward rule it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nn::{bigru, BiGruLayer, GruCell, Linear, Mlp2};
use super::params::{ParamId, ParamStore};
use super::tape::{Conv2dSpec, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Upper bound on checked entries per tensor (evenly strided).
    pub max_entries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
            max_entries: usize::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub param: String,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest |analytic - numeric| over all entries.
    pub max_abs_err: f64,
    /// Largest relative error among entries whose absolute error reaches the floor.
    pub max_rel_err: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Compares tape gradients of the scalar built by `f` with central differences
/// for every (sampled) entry of every tensor in `store`.
pub fn check<F>(store: &ParamStore, cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    let analytic = tape.backward(root)?.for_params(store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let r = f(&mut t, s)?;
        Ok(t.value(r).item())
    };

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for id in store.ids() {
        let n = store.get(id).numel();
        let stride = n.div_ceil(cfg.max_entries.max(1)).max(1);
        for entry in (0..n).step_by(stride) {
            let orig = store.get(id).data()[entry];
            work.get_mut(id).data_mut()[entry] = orig + cfg.step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[entry] = orig - cfg.step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[entry] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[id.index()].data()[entry];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(diff);
            if diff >= cfg.abs_floor {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= cfg.rel_tol {
                    report.failures.push(Mismatch {
                        param: store.name(id).to_owned(),
                        entry,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    Ok(report)
}

type CaseFn = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var> + Send + Sync>;

/// One scalar-valued function of the tensors in `store`.
pub struct GradCase {
    pub name: &'static str,
    pub store: ParamStore,
    pub f: CaseFn,
}

impl GradCase {
    pub fn check(&self, cfg: GradCheckConfig) -> Result<GradCheckReport> {
        check(&self.store, cfg, &self.f)
    }
}

/// Contracts `v` with a fixed non-uniform weight so every entry of the
/// gradient is distinct.
pub fn contract(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (0.37 * i as f64 + 0.1).sin() + 0.5).collect();
    let w = tape.leaf(Tensor::new(shape, w)?);
    let prod = tape.mul(v, w)?;
    tape.sum(prod, None)
}

/// Entries of magnitude in [0.1, 1] with random sign, away from the kinks of
/// `relu`, `abs` and `clamp(-0.5, 0.5)`.
fn away_from_kinks(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let m: f64 = rng.gen_range(0.1..1.0);
            if (m - 0.5).abs() > 0.02 {
                break if rng.gen_bool(0.5) { m } else { -m };
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn positive(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.5..2.0)).collect()).expect("shape matches data")
}

fn case(name: &'static str, store: ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Result<Var> + Send + Sync + 'static) -> GradCase {
    GradCase {
        name,
        store,
        f: Box::new(f),
    }
}

fn unary(name: &'static str, input: Tensor, op: fn(&mut Tape, Var) -> Result<Var>) -> GradCase {
    let mut store = ParamStore::new();
    let a = store.insert("a", input).expect("fresh store");
    case(name, store, move |t, s| {
        let x = t.param(s, a);
        let y = op(t, x)?;
        contract(t, y)
    })
}

fn binary(name: &'static str, rng: &mut impl Rng, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> GradCase {
    let mut store = ParamStore::new();
    let a = store.insert("a", away_from_kinks(rng, &[2, 3])).expect("fresh store");
    let b = store.insert("b", away_from_kinks(rng, &[2, 3])).expect("fresh store");
    case(name, store, move |t, s| {
        let (x, y) = (t.param(s, a), t.param(s, b));
        let z = op(t, x, y)?;
        contract(t, z)
    })
}

/// Every differentiable primitive plus the recurrent and dense building blocks.
pub fn primitive_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = vec![
        binary("add", r, |t, a, b| t.add(a, b)),
        binary("sub", r, |t, a, b| t.sub(a, b)),
        binary("mul", r, |t, a, b| t.mul(a, b)),
        binary("concat_rows", r, |t, a, b| t.concat(&[a, b], 0)),
        binary("concat_cols", r, |t, a, b| t.concat(&[a, b, a], 1)),
    ];
    let m23 = |r: &mut ChaCha8Rng| away_from_kinks(r, &[2, 3]);
    let ops: [(&'static str, fn(&mut Tape, Var) -> Result<Var>); 17] = [
        ("scale", |t, a| Ok(t.scale(a, -1.7))),
        ("relu", |t, a| Ok(t.relu(a))),
        ("sigmoid", |t, a| Ok(t.sigmoid(a))),
        ("tanh", |t, a| Ok(t.tanh(a))),
        ("exp", |t, a| Ok(t.exp(a))),
        ("abs", |t, a| Ok(t.abs(a))),
        ("clamp", |t, a| Ok(t.clamp(a, -0.5, 0.5))),
        ("softmax_rows", |t, a| t.softmax(a, 1)),
        ("softmax_cols", |t, a| t.softmax(a, 0)),
        ("log_softmax", |t, a| t.log_softmax(a, 1)),
        ("sum_all", |t, a| t.sum(a, None)),
        ("sum_axis0", |t, a| t.sum(a, Some(0))),
        ("sum_axis1", |t, a| t.sum(a, Some(1))),
        ("mean", |t, a| Ok(t.mean(a))),
        ("slice", |t, a| t.slice(a, 1, 1, 3)),
        ("gather_rows", |t, a| t.gather_rows(a, &[1, 0, 1])),
        ("reshape", |t, a| t.reshape(a, &[3, 2])),
    ];
    for (name, op) in ops {
        let x = m23(r);
        cases.push(unary(name, x, op));
    }
    let x = positive(r, &[2, 3]);
    cases.push(unary("log", x, |t, a| Ok(t.log(a))));
    let x = away_from_kinks(r, &[1, 2, 4, 4]);
    cases.push(unary("avg_pool2", x, |t, a| t.avg_pool2(a)));
    let x = away_from_kinks(r, &[1, 1, 5, 5]);
    cases.push(unary("avg_pool2_odd", x, |t, a| t.avg_pool2(a)));

    let mut store = ParamStore::new();
    let a = store.insert("a", away_from_kinks(r, &[3, 4])).expect("fresh store");
    let b = store.insert("b", away_from_kinks(r, &[4, 2])).expect("fresh store");
    cases.push(case("matmul", store, move |t, s| {
        let (x, y) = (t.param(s, a), t.param(s, b));
        let z = t.matmul(x, y)?;
        contract(t, z)
    }));

    for (name, axis, bias_len) in [("add_bias_cols", 1, 3), ("add_bias_rows", 0, 2)] {
        let mut store = ParamStore::new();
        let a = store.insert("a", away_from_kinks(r, &[2, 3])).expect("fresh store");
        let b = store.insert("bias", away_from_kinks(r, &[bias_len])).expect("fresh store");
        cases.push(case(name, store, move |t, s| {
            let (x, y) = (t.param(s, a), t.param(s, b));
            let z = t.add_bias(x, y, axis)?;
            contract(t, z)
        }));
    }

    for (name, spec) in [
        ("conv2d_same", Conv2dSpec::same(3)),
        ("conv2d_strided", Conv2dSpec { stride: 2, padding: 1 }),
    ] {
        let mut store = ParamStore::new();
        let x = store.insert("input", away_from_kinks(r, &[2, 2, 5, 5])).expect("fresh store");
        let k = store.insert("kernel", away_from_kinks(r, &[3, 2, 3, 3])).expect("fresh store");
        cases.push(case(name, store, move |t, s| {
            let (xv, kv) = (t.param(s, x), t.param(s, k));
            let y = t.conv2d(xv, kv, spec)?;
            contract(t, y)
        }));
    }

    cases.extend(block_cases(r));
    cases
}

fn perturb(store: &mut ParamStore, rng: &mut impl Rng) {
    // zero-initialised biases would leave some rectifiers exactly at their kink
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

fn block_cases(r: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "linear", 3, 2, r).expect("fresh store");
    let x = store.insert("x", away_from_kinks(r, &[4, 3])).expect("fresh store");
    perturb(&mut store, r);
    cases.push(case("linear", store, move |t, s| {
        let xv = t.param(s, x);
        let y = lin.forward(t, s, xv)?;
        contract(t, y)
    }));

    let mut store = ParamStore::new();
    let mlp = Mlp2::new(&mut store, "mlp", 3, 5, 2, r).expect("fresh store");
    let x = store.insert("x", away_from_kinks(r, &[4, 3])).expect("fresh store");
    perturb(&mut store, r);
    cases.push(case("mlp2", store, move |t, s| {
        let xv = t.param(s, x);
        let y = mlp.forward(t, s, xv)?;
        contract(t, y)
    }));

    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", 3, 4, r).expect("fresh store");
    let x = store.insert("x", away_from_kinks(r, &[2, 3])).expect("fresh store");
    let h = store.insert("h", away_from_kinks(r, &[2, 4])).expect("fresh store");
    perturb(&mut store, r);
    cases.push(case("gru_cell", store, move |t, s| {
        let (xv, hv) = (t.param(s, x), t.param(s, h));
        let y = cell.step(t, s, xv, hv)?;
        contract(t, y)
    }));

    let mut store = ParamStore::new();
    let layer = BiGruLayer::new(&mut store, "bigru", 2, 3, r).expect("fresh store");
    let xs: Vec<ParamId> = (0..3)
        .map(|i| store.insert(format!("x{i}"), away_from_kinks(r, &[2, 2])).expect("fresh store"))
        .collect();
    perturb(&mut store, r);
    cases.push(case("bigru", store, move |t, s| {
        let seq: Vec<Var> = xs.iter().map(|&id| t.param(s, id)).collect();
        let states = bigru(t, s, &layer, &seq)?;
        let steps = states.concat_steps(t)?;
        let all = t.concat(&steps, 1)?;
        contract(t, all)
    }));
    cases
}
