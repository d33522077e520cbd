//! Dense layers, ELU multilayer perceptrons and GRU cells.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::params::{leaf, visit_child, visit_child_mut, Module, Parameters, VarSet};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[in, out]`
    pub w: Array,
    /// `[1, out]`
    pub b: Array,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

impl Dense {
    /// Uniform in `±1/sqrt(in)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            w: Array::uniform(&[input, output], -bound, bound, rng),
            b: Array::uniform(&[1, output], -bound, bound, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: Array::zeros(&[input, output]), b: Array::zeros(&[1, output]) }
    }

    pub fn input_size(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn output_size(&self) -> usize {
        self.w.shape()[1]
    }
}

impl Parameters for Dense {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array)) {
        f("w", &self.w);
        f("b", &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

impl VarSet for DenseVars {
    fn collect(&self, out: &mut Vec<Var>) {
        out.push(self.w);
        out.push(self.b);
    }

    fn assign(&mut self, src: &mut dyn Iterator<Item = Var>) {
        self.w = src.next().expect("too few vars for Dense");
        self.b = src.next().expect("too few vars for Dense");
    }
}

impl Module for Dense {
    type Vars = DenseVars;

    fn bind(&self, tape: &Tape, trainable: bool) -> DenseVars {
        DenseVars { w: leaf(tape, &self.w, trainable), b: leaf(tape, &self.b, trainable) }
    }
}

pub fn dense_forward(tape: &Tape, layer: &DenseVars, x: Var) -> Var {
    tape.add_row(tape.matmul(x, layer.w), layer.b)
}

/// Input → hidden… → output map with ELU on hidden layers and a linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<DenseVars>,
    input: usize,
    output: usize,
}

impl MlpParams {
    /// `sizes = [in, hidden…, out]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        Self { layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() }
    }

    /// Zero the output layer so the map starts at the constant zero.
    pub fn with_zero_head(mut self) -> Self {
        if let Some(last) = self.layers.last_mut() {
            *last = Dense::zeros(last.input_size(), last.output_size());
        }
        self
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_size)
    }

    /// Check that consecutive layer shapes are compatible.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Invalid("MLP has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_size() != pair[1].input_size() {
                return Err(Error::shape(
                    "MlpParams::validate",
                    format!(
                        "layer {} outputs {} but layer {} takes {}",
                        i,
                        pair[0].output_size(),
                        i + 1,
                        pair[1].input_size()
                    ),
                ));
            }
        }
        for l in &self.layers {
            if l.b.len() != l.output_size() {
                return Err(Error::shape("MlpParams::validate", "bias length"));
            }
        }
        Ok(())
    }

    /// An MLP that computes `x·m + bias` exactly for inputs whose entries
    /// all exceed `-shift`: the first hidden layer adds `shift` so every ELU
    /// stays in its identity branch, and the head removes it again.
    pub fn affine(hidden: &[usize], m: &Array, bias: &[f64], shift: f64) -> Result<Self> {
        let (input, output) = (m.rows(), m.cols());
        if bias.len() != output {
            return Err(Error::shape("MlpParams::affine", "bias length"));
        }
        if hidden.iter().any(|&h| h < input) {
            return Err(Error::Invalid(format!(
                "affine MLP needs hidden widths >= input width {input}"
            )));
        }
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut mlp = Self::zeros(&sizes);
        let n_hidden = hidden.len();
        for (li, layer) in mlp.layers.iter_mut().enumerate() {
            if li < n_hidden {
                for i in 0..input {
                    layer.w.set2(i, i, 1.0);
                }
                if li == 0 {
                    for i in 0..input {
                        layer.b.set2(0, i, shift);
                    }
                }
            } else {
                for i in 0..input {
                    for j in 0..output {
                        layer.w.set2(i, j, m.get2(i, j));
                    }
                }
                for (j, &bj) in bias.iter().enumerate() {
                    let col: f64 = (0..input).map(|i| m.get2(i, j)).sum();
                    layer.b.set2(0, j, bj - shift * col);
                }
            }
        }
        Ok(mlp)
    }

    /// Evaluate on a fresh tape without tracking gradients.
    pub fn forward_value(&self, x: &Array) -> Result<Array> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let y = mlp_forward(&tape, &vars, xv)?;
        let out = tape.value(y).clone();
        Ok(out)
    }
}

impl Parameters for MlpParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array)) {
        for (i, l) in self.layers.iter().enumerate() {
            visit_child(&format!("l{i}"), l, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            visit_child_mut(&format!("l{i}"), l, f);
        }
    }
}

impl VarSet for MlpVars {
    fn collect(&self, out: &mut Vec<Var>) {
        for l in &self.layers {
            l.collect(out);
        }
    }

    fn assign(&mut self, src: &mut dyn Iterator<Item = Var>) {
        for l in &mut self.layers {
            l.assign(src);
        }
    }
}

impl Module for MlpParams {
    type Vars = MlpVars;

    fn bind(&self, tape: &Tape, trainable: bool) -> MlpVars {
        MlpVars {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            input: self.input_size(),
            output: self.output_size(),
        }
    }
}

impl MlpVars {
    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn output_size(&self) -> usize {
        self.output
    }
}

pub fn mlp_forward(tape: &Tape, mlp: &MlpVars, x: Var) -> Result<Var> {
    let cols = tape.value(x).cols();
    if cols != mlp.input {
        return Err(Error::shape(
            "mlp_forward",
            format!("input has {} features, MLP expects {}", cols, mlp.input),
        ));
    }
    let last = mlp.layers.len() - 1;
    let mut h = x;
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = dense_forward(tape, layer, h);
        if i < last {
            h = tape.elu(h);
        }
    }
    Ok(h)
}

/// One GRU cell, gate order (reset, update, candidate):
///
/// ```text
/// r  = σ(x·Wir + bir + h·Whr + bhr)
/// z  = σ(x·Wiz + biz + h·Whz + bhz)
/// n  = tanh(x·Win + bin + r ⊙ (h·Whn + bhn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    /// `[in, 3H]`
    pub w_ih: Array,
    /// `[H, 3H]`
    pub w_hh: Array,
    /// `[1, 3H]`
    pub b_ih: Array,
    /// `[1, 3H]`
    pub b_hh: Array,
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
    input: usize,
    hidden: usize,
}

impl GruParams {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        Self {
            w_ih: Array::uniform(&[input, 3 * hidden], -bound, bound, rng),
            w_hh: Array::uniform(&[hidden, 3 * hidden], -bound, bound, rng),
            b_ih: Array::uniform(&[1, 3 * hidden], -bound, bound, rng),
            b_hh: Array::uniform(&[1, 3 * hidden], -bound, bound, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Array::zeros(&[input, 3 * hidden]),
            w_hh: Array::zeros(&[hidden, 3 * hidden]),
            b_ih: Array::zeros(&[1, 3 * hidden]),
            b_hh: Array::zeros(&[1, 3 * hidden]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size();
        let ok = self.w_ih.cols() == 3 * h
            && self.w_hh.cols() == 3 * h
            && self.b_ih.len() == 3 * h
            && self.b_hh.len() == 3 * h;
        if ok {
            Ok(())
        } else {
            Err(Error::shape("GruParams::validate", "hidden size differs across gates"))
        }
    }

    pub fn step_value(&self, input: &Array, h: &Array) -> Result<Array> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let x = tape.constant(input.clone());
        let hv = tape.constant(h.clone());
        let out = gru_step(&tape, &vars, x, hv)?;
        let v = tape.value(out).clone();
        Ok(v)
    }
}

impl Parameters for GruParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array)) {
        f("w_ih", &self.w_ih);
        f("w_hh", &self.w_hh);
        f("b_ih", &self.b_ih);
        f("b_hh", &self.b_hh);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        f("w_ih", &mut self.w_ih);
        f("w_hh", &mut self.w_hh);
        f("b_ih", &mut self.b_ih);
        f("b_hh", &mut self.b_hh);
    }
}

impl VarSet for GruVars {
    fn collect(&self, out: &mut Vec<Var>) {
        out.extend([self.w_ih, self.w_hh, self.b_ih, self.b_hh]);
    }

    fn assign(&mut self, src: &mut dyn Iterator<Item = Var>) {
        for v in [&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh] {
            *v = src.next().expect("too few vars for GRU");
        }
    }
}

impl Module for GruParams {
    type Vars = GruVars;

    fn bind(&self, tape: &Tape, trainable: bool) -> GruVars {
        GruVars {
            w_ih: leaf(tape, &self.w_ih, trainable),
            w_hh: leaf(tape, &self.w_hh, trainable),
            b_ih: leaf(tape, &self.b_ih, trainable),
            b_hh: leaf(tape, &self.b_hh, trainable),
            input: self.input_size(),
            hidden: self.hidden_size(),
        }
    }
}

pub fn gru_step(tape: &Tape, gru: &GruVars, input: Var, h: Var) -> Result<Var> {
    let (in_cols, in_rows) = {
        let v = tape.value(input);
        (v.cols(), v.rows())
    };
    let (h_cols, h_rows) = {
        let v = tape.value(h);
        (v.cols(), v.rows())
    };
    if in_cols != gru.input || h_cols != gru.hidden || in_rows != h_rows {
        return Err(Error::shape(
            "gru_step",
            format!(
                "input [{in_rows},{in_cols}] and state [{h_rows},{h_cols}] \
                 for a cell with input {} and hidden {}",
                gru.input, gru.hidden
            ),
        ));
    }
    let n = gru.hidden;
    let gi = tape.add_row(tape.matmul(input, gru.w_ih), gru.b_ih);
    let gh = tape.add_row(tape.matmul(h, gru.w_hh), gru.b_hh);
    let r = tape.sigmoid(tape.add(tape.slice_cols(gi, 0, n), tape.slice_cols(gh, 0, n)));
    let z = tape.sigmoid(tape.add(tape.slice_cols(gi, n, n), tape.slice_cols(gh, n, n)));
    let cand = tape.tanh(tape.add(
        tape.slice_cols(gi, 2 * n, n),
        tape.mul(r, tape.slice_cols(gh, 2 * n, n)),
    ));
    // n + z ⊙ (h − n)
    Ok(tape.add(cand, tape.mul(z, tape.sub(h, cand))))
}
