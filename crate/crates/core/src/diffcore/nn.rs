//! Layers composed from tape primitives, so their gradients need no extra code.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.weight(format!("{name}.w"), &[input, output], input, rng)?,
            bias: store.zeros(format!("{name}.b"), &[output])?,
            input,
            output,
        })
    }

    /// `x: [B, input] -> [B, output]`
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b, 1)
    }
}

/// Two linear layers with a rectifier between them; the output is left raw.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Mlp2 {
            hidden: Linear::new(store, &format!("{name}.l1"), input, hidden, rng)?,
            out: Linear::new(store, &format!("{name}.l2"), hidden, output, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }

    /// Forward pass that also returns the rectified hidden activations.
    pub fn forward_with_hidden(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<(Var, Var)> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h);
        Ok((h, self.out.forward(tape, store, h)?))
    }

    pub fn params(&self) -> [ParamId; 4] {
        [
            self.hidden.weight,
            self.hidden.bias,
            self.out.weight,
            self.out.bias,
        ]
    }
}

/// Gated recurrent unit with reset gate applied after the hidden projection:
///
/// ```text
/// z  = sigmoid(x Wz + bxz + h Uz + bhz)
/// r  = sigmoid(x Wr + bxr + h Ur + bhr)
/// n  = tanh(x Wn + bxn + r * (h Un + bhn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(GruCell {
            wx: store.weight(format!("{name}.wx"), &[input, 3 * hidden], input, rng)?,
            wh: store.weight(format!("{name}.wh"), &[hidden, 3 * hidden], hidden, rng)?,
            bx: store.zeros(format!("{name}.bx"), &[3 * hidden])?,
            bh: store.zeros(format!("{name}.bh"), &[3 * hidden])?,
            input,
            hidden,
        })
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        gru_cell(tape, store, self, x, h)
    }
}

/// One recurrent update `h_prev -> h_next` for a batch of rows.
pub fn gru_cell(
    tape: &mut Tape,
    store: &ParamStore,
    cell: &GruCell,
    x: Var,
    h_prev: Var,
) -> Result<Var> {
    let (xs, hs) = (tape.shape(x).to_vec(), tape.shape(h_prev).to_vec());
    if xs.len() != 2 || xs[1] != cell.input || hs != [xs[0], cell.hidden] {
        return Err(Error::shape("gru_cell", &xs, &hs));
    }
    let hd = cell.hidden;
    let wx = tape.param(store, cell.wx);
    let wh = tape.param(store, cell.wh);
    let bx = tape.param(store, cell.bx);
    let bh = tape.param(store, cell.bh);

    let gx = tape.matmul(x, wx)?;
    let gx = tape.add_bias(gx, bx, 1)?;
    let gh = tape.matmul(h_prev, wh)?;
    let gh = tape.add_bias(gh, bh, 1)?;

    let xz = tape.slice(gx, 1, 0, hd)?;
    let xr = tape.slice(gx, 1, hd, 2 * hd)?;
    let xn = tape.slice(gx, 1, 2 * hd, 3 * hd)?;
    let hz = tape.slice(gh, 1, 0, hd)?;
    let hr = tape.slice(gh, 1, hd, 2 * hd)?;
    let hn = tape.slice(gh, 1, 2 * hd, 3 * hd)?;

    let z = tape.add(xz, hz)?;
    let z = tape.sigmoid(z);
    let r = tape.add(xr, hr)?;
    let r = tape.sigmoid(r);
    let rn = tape.mul(r, hn)?;
    let n = tape.add(xn, rn)?;
    let n = tape.tanh(n);

    // n + z * (h - n)
    let diff = tape.sub(h_prev, n)?;
    let zd = tape.mul(z, diff)?;
    tape.add(n, zd)
}

#[derive(Debug, Clone)]
pub struct BiGruLayer {
    pub forward: GruCell,
    pub backward: GruCell,
}

/// Per-step states of a bidirectional pass.
#[derive(Debug, Clone)]
pub struct BiStates {
    /// `forward[t]` has consumed elements `0..=t`.
    pub forward: Vec<Var>,
    /// `backward[t]` has consumed elements `t..len`.
    pub backward: Vec<Var>,
}

impl BiStates {
    /// Per-step `[forward_t ; backward_t]`.
    pub fn concat_steps(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.forward
            .iter()
            .zip(&self.backward)
            .map(|(&f, &b)| tape.concat(&[f, b], 1))
            .collect()
    }
}

impl BiGruLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(BiGruLayer {
            forward: GruCell::new(store, &format!("{name}.fwd"), input, hidden, rng)?,
            backward: GruCell::new(store, &format!("{name}.bwd"), input, hidden, rng)?,
        })
    }
}

/// Runs both directions over `sequence` (each element `[B, input]`) from zero states.
pub fn bigru(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &BiGruLayer,
    sequence: &[Var],
) -> Result<BiStates> {
    let first = *sequence.first().ok_or(Error::EmptySequence)?;
    let rows = tape.shape(first)[0];
    let h0 = tape.leaf(Tensor::zeros(&[rows, layer.forward.hidden]));

    let mut forward = Vec::with_capacity(sequence.len());
    let mut h = h0;
    for &x in sequence {
        h = layer.forward.step(tape, store, x, h)?;
        forward.push(h);
    }

    let mut backward = vec![h0; sequence.len()];
    let mut h = h0;
    for (t, &x) in sequence.iter().enumerate().rev() {
        h = layer.backward.step(tape, store, x, h)?;
        backward[t] = h;
    }
    Ok(BiStates { forward, backward })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gru_keeps_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = GruCell::new(&mut store, "g", 3, 4, &mut rng).unwrap();
        store.zero_all();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.3, -1.2, 5.0, 2.0, 0.1, -0.7]).unwrap());
        let h = tape.leaf(Tensor::zeros(&[2, 4]));
        let out = cell.step(&mut tape, &store, x, h).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_bigru_matches_both_cells() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = BiGruLayer::new(&mut store, "bi", 2, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.4, -0.9]).unwrap());
        let states = bigru(&mut tape, &store, &layer, &[x]).unwrap();

        let h0 = tape.leaf(Tensor::zeros(&[1, 3]));
        let f = layer.forward.step(&mut tape, &store, x, h0).unwrap();
        let b = layer.backward.step(&mut tape, &store, x, h0).unwrap();
        assert_eq!(tape.value(states.forward[0]), tape.value(f));
        assert_eq!(tape.value(states.backward[0]), tape.value(b));
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = BiGruLayer::new(&mut store, "bi", 2, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            bigru(&mut tape, &store, &layer, &[]),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn gru_rejects_mismatched_widths() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = GruCell::new(&mut store, "g", 3, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2]));
        let h = tape.leaf(Tensor::zeros(&[1, 4]));
        assert!(cell.step(&mut tape, &store, x, h).is_err());
    }
}
