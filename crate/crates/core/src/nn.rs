//! Dense ReLU networks with softmax output, trained by plain SGD on
//! cross-entropy. The same type backs the emotion classifier shared through
//! federated averaging and the attacker's property classifier.
//!
//! Parameters flatten layer by layer, weight (row-major, `[fan_in × fan_out]`)
//! then bias, so the first-layer block of any flattened gradient is its
//! leading `fan_in * fan_out + fan_out` entries.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub const CHECKPOINT_HEADER: &str = "fpb-model-v1";

/// Hidden widths of the emotion classifier.
pub const TASK_HIDDEN: [usize; 2] = [256, 128];
pub const TASK_DROPOUT: f64 = 0.2;

/// Layer widths (input first, classes last) and the dropout rate applied
/// after every hidden ReLU in training mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    widths: Vec<usize>,
    dropout: f64,
}

impl Architecture {
    pub fn new(widths: Vec<usize>, dropout: f64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("a network needs at least input and output widths"));
        }
        if widths.contains(&0) {
            return Err(Error::config(format!("zero-width layer in {widths:?}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(Self { widths, dropout })
    }

    /// The emotion classifier: input → 256 → 128 → classes, dropout 0.2.
    pub fn task(input: usize, classes: usize) -> Result<Self> {
        Self::new(vec![input, TASK_HIDDEN[0], TASK_HIDDEN[1], classes], TASK_DROPOUT)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Length of the first layer's weight-plus-bias block.
    pub fn first_layer_len(&self) -> usize {
        self.widths[0] * self.widths[1] + self.widths[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[fan_in × fan_out]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Forward-pass mode. Dropout masks are drawn from the supplied stream in
/// training mode only.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Stream),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    layers: Vec<Dense>,
}

struct Trace {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Combined ReLU-derivative and dropout scale for each hidden layer.
    gates: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        let layers = arch
            .widths
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { arch, layers }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: Architecture, rng: &mut Stream) -> Self {
        let mut params = Self::zeros(arch);
        for layer in &mut params.layers {
            let (fan_in, fan_out) = layer.weight.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer
                .weight
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-bound..bound));
        }
        params
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn from_flat(arch: Architecture, values: &[f64]) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                values.len()
            )));
        }
        let mut params = Self::zeros(arch);
        let mut offset = 0;
        for layer in &mut params.layers {
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w = values[offset];
                offset += 1;
            }
        }
        Ok(params)
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.arch.input_dim() {
            return Err(Error::config(format!(
                "input has {cols} features, network expects {}",
                self.arch.input_dim()
            )));
        }
        Ok(())
    }

    fn trace(&self, xs: ArrayView2<'_, f64>, mut mode: Mode<'_>) -> Trace {
        let keep = 1.0 - self.arch.dropout;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut gates = Vec::with_capacity(last);
        let mut current = xs.to_owned();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weight);
            z += &layer.bias;
            inputs.push(current);
            if idx == last {
                return Trace {
                    inputs,
                    gates,
                    logits: z,
                };
            }
            let mut gate = z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            if let Mode::Train(rng) = &mut mode {
                if self.arch.dropout > 0.0 {
                    let scale = 1.0 / keep;
                    gate.iter_mut().for_each(|g| {
                        let kept = rng.random::<f64>() < keep;
                        *g = if kept { *g * scale } else { 0.0 };
                    });
                }
            }
            z *= &gate;
            gates.push(gate);
            current = z;
        }
        unreachable!("architecture has at least one layer")
    }

    /// Class probabilities for each row of `xs`.
    pub fn forward_batch(&self, xs: ArrayView2<'_, f64>, mode: Mode<'_>) -> Result<Array2<f64>> {
        self.check_input(xs.ncols())?;
        let mut logits = self.trace(xs, mode).logits;
        softmax_rows(&mut logits);
        Ok(logits)
    }

    pub fn forward(&self, x: &[f64], mode: Mode<'_>) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward_batch(xs, mode)?.into_raw_vec_and_offset().0)
    }

    /// Argmax class in eval mode; ties go to the lowest index.
    pub fn predict_batch(&self, xs: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let probs = self.forward_batch(xs, Mode::Eval)?;
        Ok(probs.rows().into_iter().map(|r| argmax(r.iter().copied())).collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.predict_batch(xs)?[0])
    }

    /// Mean cross-entropy gradient over a batch, flattened in parameter order,
    /// together with the mean loss.
    pub fn compute_gradient(&self, batch: &[(&[f64], usize)], mode: Mode<'_>) -> Result<(Vec<f64>, f64)> {
        if batch.is_empty() {
            return Err(Error::usage("gradient of an empty batch"));
        }
        let dim = self.arch.input_dim();
        let mut xs = Array2::zeros((batch.len(), dim));
        for (mut row, (x, _)) in xs.rows_mut().into_iter().zip(batch) {
            self.check_input(x.len())?;
            row.assign(&ndarray::aview1(x));
        }
        let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
        self.gradient_of(xs.view(), &labels, mode)
    }

    /// Same as [`compute_gradient`](Self::compute_gradient) over a dense
    /// `[batch × input]` matrix.
    pub fn gradient_of(
        &self,
        xs: ArrayView2<'_, f64>,
        labels: &[usize],
        mode: Mode<'_>,
    ) -> Result<(Vec<f64>, f64)> {
        let n = xs.nrows();
        if n == 0 {
            return Err(Error::usage("gradient of an empty batch"));
        }
        if labels.len() != n {
            return Err(Error::usage("label count differs from batch size"));
        }
        self.check_input(xs.ncols())?;
        let classes = self.arch.output_dim();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::usage(format!("label {bad} outside [0, {classes})")));
        }

        let Trace {
            inputs,
            gates,
            mut logits,
        } = self.trace(xs, mode);

        let mut loss = 0.0;
        for (mut row, &y) in logits.rows_mut().into_iter().zip(labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            row.mapv_inplace(|v| (v - lse).exp());
            row[y] -= 1.0;
        }
        let inv_n = 1.0 / n as f64;
        loss *= inv_n;
        let mut delta = logits;
        delta *= inv_n;

        let mut grad = vec![0.0; self.param_count()];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.weight.len() + layer.bias.len();
        }
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let gw = inputs[idx].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            let start = offsets[idx];
            let wlen = layer.weight.len();
            grad[start..start + wlen]
                .iter_mut()
                .zip(gw.iter())
                .for_each(|(g, v)| *g = *v);
            grad[start + wlen..start + wlen + gb.len()]
                .iter_mut()
                .zip(gb.iter())
                .for_each(|(g, v)| *g = *v);
            if idx > 0 {
                let mut back = delta.dot(&layer.weight.t());
                back *= &gates[idx - 1];
                delta = back;
            }
        }
        Ok((grad, loss))
    }

    /// Mean cross-entropy in eval mode.
    pub fn loss(&self, xs: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
        let probs = self.forward_batch(xs, Mode::Eval)?;
        let total: f64 = probs
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(r, &y)| -r[y].max(f64::MIN_POSITIVE).ln())
            .sum();
        Ok(total / labels.len().max(1) as f64)
    }

    /// `self − lr · grad`, elementwise.
    pub fn sgd_step(&self, grad: &[f64], lr: f64) -> Result<ModelParams> {
        let mut next = self.clone();
        next.sgd_step_in_place(grad, lr)?;
        Ok(next)
    }

    pub fn sgd_step_in_place(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.param_count() {
            return Err(Error::usage(format!(
                "gradient has {} entries, model has {}",
                grad.len(),
                self.param_count()
            )));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::usage(format!("learning rate {lr} must be positive")));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("non-finite gradient entry"));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w -= lr * grad[offset];
                offset += 1;
            }
        }
        if !self.is_finite() {
            return Err(Error::numeric("parameters overflowed during SGD step"));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let widths: Vec<String> = self.arch.widths.iter().map(|w| w.to_string()).collect();
        writeln!(out, "{CHECKPOINT_HEADER}").unwrap();
        writeln!(out, "widths {}", widths.join(" ")).unwrap();
        writeln!(out, "dropout {}", self.arch.dropout).unwrap();
        for (idx, layer) in self.layers.iter().enumerate() {
            let (rows, cols) = layer.weight.dim();
            writeln!(out, "layer {idx} {rows} {cols}").unwrap();
            for row in layer.weight.rows() {
                writeln!(out, "{}", join_values(row.iter())).unwrap();
            }
            writeln!(out, "{}", join_values(layer.bias.iter())).unwrap();
        }
        out
    }

    pub fn from_checkpoint(text: &str, origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(origin, msg.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_HEADER) {
            return Err(bad("missing fpb-model-v1 header"));
        }
        let widths: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("widths "))
            .ok_or_else(|| bad("missing widths line"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad width")))
            .collect::<Result<_>>()?;
        let dropout: f64 = lines
            .next()
            .and_then(|l| l.strip_prefix("dropout "))
            .ok_or_else(|| bad("missing dropout line"))?
            .trim()
            .parse()
            .map_err(|_| bad("bad dropout"))?;
        let arch = Architecture::new(widths, dropout)?;
        let mut values = Vec::with_capacity(arch.param_count());
        for (idx, w) in arch.widths.windows(2).enumerate() {
            let expected = format!("layer {idx} {} {}", w[0], w[1]);
            if lines.next() != Some(expected.as_str()) {
                return Err(bad(&format!("expected `{expected}`")));
            }
            for _ in 0..=w[0] {
                let line = lines.next().ok_or_else(|| bad("truncated layer"))?;
                for tok in line.split_whitespace() {
                    values.push(tok.parse::<f64>().map_err(|_| bad("bad parameter value"))?);
                }
            }
        }
        let params = Self::from_flat(arch, &values).map_err(|e| bad(&e.to_string()))?;
        if !params.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text, path)
    }
}

fn join_values<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small_arch() -> Architecture {
        Architecture::new(vec![10, 7, 5, 4], 0.2).unwrap()
    }

    /// Straight-line evaluation, one neuron at a time.
    fn reference_forward(params: &ModelParams, x: &[f64]) -> Vec<f64> {
        let mut act = x.to_vec();
        let n = params.layers().len();
        for (idx, layer) in params.layers().iter().enumerate() {
            let (fan_in, fan_out) = layer.weight.dim();
            let mut next = vec![0.0; fan_out];
            for j in 0..fan_out {
                let mut s = layer.bias[j];
                for i in 0..fan_in {
                    s += act[i] * layer.weight[[i, j]];
                }
                next[j] = if idx + 1 < n { s.max(0.0) } else { s };
            }
            act = next;
        }
        let max = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = act.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }

    fn random_input(rng: &mut Stream, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let params = ModelParams::zeros(Architecture::task(40, 4).unwrap());
        let probs = params.forward(&[0.3; 40], Mode::Eval).unwrap();
        for p in probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let mut rng = seeded(11);
        let params = ModelParams::init(small_arch(), &mut rng);
        for _ in 0..20 {
            let x = random_input(&mut rng, 10);
            let got = params.forward(&x, Mode::Eval).unwrap();
            let want = reference_forward(&params, &x);
            assert_eq!(got.len(), 4);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "{g} vs {w}");
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_mode_is_repeatable_and_train_mode_is_seeded() {
        let mut rng = seeded(3);
        let params = ModelParams::init(small_arch(), &mut rng);
        let x = random_input(&mut rng, 10);
        assert_eq!(
            params.forward(&x, Mode::Eval).unwrap(),
            params.forward(&x, Mode::Eval).unwrap()
        );
        let a = params.forward(&x, Mode::Train(&mut seeded(5))).unwrap();
        let b = params.forward(&x, Mode::Train(&mut seeded(5))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let params = ModelParams::zeros(small_arch());
        assert!(matches!(params.forward(&[0.0; 9], Mode::Eval), Err(Error::Config(_))));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let params = ModelParams::zeros(small_arch());
        assert!(matches!(params.compute_gradient(&[], Mode::Eval), Err(Error::Usage(_))));
    }

    #[test]
    fn confident_correct_output_has_vanishing_gradient() {
        let arch = Architecture::new(vec![2, 3, 3, 2], 0.0).unwrap();
        let mut params = ModelParams::zeros(arch);
        // route a constant through the hidden layers and make class 1 win by a mile
        params.layers_mut()[0].bias.fill(1.0);
        params.layers_mut()[1].bias.fill(1.0);
        params.layers_mut()[2].bias[1] = 60.0;
        let x = [0.5, -0.5];
        let (grad, loss) = params.compute_gradient(&[(&x, 1)], Mode::Eval).unwrap();
        assert!(loss < 1e-12);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm <= 1e-6, "norm {norm}");
    }

    #[test]
    fn duplicating_the_batch_leaves_the_gradient_unchanged() {
        let mut rng = seeded(21);
        let params = ModelParams::init(small_arch(), &mut rng);
        let xs: Vec<Vec<f64>> = (0..5).map(|_| random_input(&mut rng, 10)).collect();
        let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 4)).collect();
        let doubled: Vec<(&[f64], usize)> = batch.iter().chain(batch.iter()).cloned().collect();
        let (g1, l1) = params.compute_gradient(&batch, Mode::Eval).unwrap();
        let (g2, l2) = params.compute_gradient(&doubled, Mode::Eval).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step_edge_cases() {
        let mut rng = seeded(8);
        let params = ModelParams::init(small_arch(), &mut rng);
        let n = params.param_count();

        let same = params.sgd_step(&vec![0.0; n], 0.0005).unwrap();
        assert_eq!(same, params);

        let zeroed = params.sgd_step(&params.flatten(), 1.0).unwrap();
        assert!(zeroed.flatten().iter().all(|&v| v == 0.0));

        let mut unit = vec![0.0; n];
        unit[17] = 1.0;
        let stepped = params.sgd_step(&unit, 0.0005).unwrap();
        let before = params.flatten();
        let after = stepped.flatten();
        for i in 0..n {
            if i == 17 {
                assert_eq!(after[i], before[i] - 0.0005);
            } else {
                assert_eq!(after[i], before[i]);
            }
        }

        let mut bad = vec![0.0; n];
        bad[0] = f64::NAN;
        assert!(matches!(params.sgd_step(&bad, 0.1), Err(Error::Numeric(_))));
        assert!(matches!(params.sgd_step(&[0.0; 3], 0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn fifty_steps_reduce_the_loss() {
        let mut rng = seeded(99);
        let params = ModelParams::init(Architecture::task(10, 4).unwrap(), &mut rng);
        let xs: Vec<Vec<f64>> = (0..20).map(|_| random_input(&mut rng, 10)).collect();
        let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 4)).collect();
        let (_, start) = params.compute_gradient(&batch, Mode::Eval).unwrap();
        let mut current = params;
        for _ in 0..50 {
            let (g, _) = current.compute_gradient(&batch, Mode::Eval).unwrap();
            current.sgd_step_in_place(&g, 0.0005).unwrap();
        }
        let (_, end) = current.compute_gradient(&batch, Mode::Eval).unwrap();
        assert!(start - end >= 1e-4, "loss {start} -> {end}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = seeded(4);
        let params = ModelParams::init(small_arch(), &mut rng);
        let text = params.to_checkpoint();
        assert!(text.starts_with("fpb-model-v1\n"));
        let back = ModelParams::from_checkpoint(&text, Path::new("mem")).unwrap();
        assert_eq!(back, params);
        let broken = text.replacen("fpb-model-v1", "fpb-model-v0", 1);
        assert!(matches!(
            ModelParams::from_checkpoint(&broken, Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax([0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax([0.1, 0.4, 0.4, 0.1]), 1);
    }
}
