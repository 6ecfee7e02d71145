//! Multi-layer perceptron shared by every teacher and student.
//!
//! Hidden layers use rectified-linear activations and the output layer a
//! softmax over the place classes. Training is plain mini-batch gradient
//! descent on mean cross-entropy with analytic backpropagation.
//!
//! Weight matrices are stored row-major with one row per *input* unit
//! (`weights[i * out_dim + o]`), which makes the first layer cheap on the
//! sparse RRF inputs the simulator feeds it.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DfrdError, Result};
use crate::rrf::{rank_of, OneHotLabel, RankVector, ScoreVector};
use crate::seed;

const MAGIC: &[u8; 8] = b"DFRDMLP1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub in_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(in_dim: usize, hidden_dims: Vec<usize>, out_dim: usize, seed: u64) -> Self {
        MlpConfig {
            in_dim,
            hidden_dims,
            out_dim,
            seed,
        }
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.in_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.out_dim);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(DfrdError::InvalidConfig(format!(
                "all MLP dims must be >= 1, got {:?}",
                self.dims()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `in_dim x out_dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// `out = bias + x W`; zero inputs are skipped.
    fn affine(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    config: MlpConfig,
    layers: Vec<Layer>,
}

/// Parameter gradients, shaped like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w *= s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    /// All gradient values in parameter-file order.
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    out
}

/// Training target for one example.
#[derive(Debug, Clone, Copy)]
pub enum TargetRef<'a> {
    Hard(OneHotLabel),
    /// A probability distribution over classes.
    Soft(&'a [f64]),
}

/// Anything that can be fed to [`train`] / [`loss_and_grad`].
pub trait Supervised {
    fn input(&self) -> &[f64];
    fn target(&self) -> TargetRef<'_>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub input: ScoreVector,
    pub label: OneHotLabel,
}

impl Supervised for LabeledSample {
    fn input(&self) -> &[f64] {
        self.input.as_slice()
    }

    fn target(&self) -> TargetRef<'_> {
        TargetRef::Hard(self.label)
    }
}

/// Example with a soft (distribution) target.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSample {
    pub input: ScoreVector,
    pub target: Vec<f64>,
}

impl Supervised for SoftSample {
    fn input(&self) -> &[f64] {
        self.input.as_slice()
    }

    fn target(&self) -> TargetRef<'_> {
        TargetRef::Soft(&self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub samples: Vec<LabeledSample>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<LabeledSample>) -> Self {
        LabeledDataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub shuffle_seed: u64,
    /// Stops training after this many parameter updates, even mid-epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_updates: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            step_size: 0.01,
            shuffle_seed: 0,
            max_updates: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DfrdError::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(DfrdError::InvalidConfig(
                "step_size must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-call scratch buffers for forward/backward passes.
struct Workspace {
    /// Post-activation outputs per layer; the last holds softmax probabilities.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    fn new(model: &MlpModel) -> Self {
        let widest = model.config.dims().into_iter().max().unwrap_or(1);
        Workspace {
            acts: model.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `-ln p`, clamped at underflow; NaN propagates.
fn neg_log(p: f64) -> f64 {
    if p > 0.0 {
        -p.ln()
    } else if p == 0.0 {
        -f64::MIN_POSITIVE.ln()
    } else {
        f64::NAN
    }
}

/// Initializes weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn init_mlp<R: Rng + ?Sized>(config: &MlpConfig, rng: &mut R) -> Result<MlpModel> {
    config.validate()?;
    let dims = config.dims();
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut layer = Layer::zeros(fan_in, fan_out);
            for v in &mut layer.weights {
                *v = rng.random_range(-bound..=bound);
            }
            layer
        })
        .collect();
    Ok(MlpModel {
        config: config.clone(),
        layers,
    })
}

impl MlpModel {
    /// Initializes from `config.seed`.
    pub fn seeded(config: &MlpConfig) -> Result<Self> {
        init_mlp(config, &mut seed::rng(config.seed))
    }

    /// A model with every parameter zero (uniform softmax output).
    pub fn zeros(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .dims()
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(MlpModel {
            config: config.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn in_dim(&self) -> usize {
        self.config.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters in file order.
    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    /// Mutable access to the `idx`-th parameter in file order.
    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            if idx < l.weights.len() {
                return &mut l.weights[idx];
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// FNV-1a fingerprint of the parameter bytes.
    pub fn checksum(&self) -> u64 {
        let bytes: Vec<u8> = self
            .flat_params()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        seed::fnv1a(&bytes)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.in_dim {
            return Err(DfrdError::invalid(format!(
                "input has length {}, model expects {}",
                x.len(),
                self.config.in_dim
            )));
        }
        Ok(())
    }

    fn forward_into(&self, x: &[f64], ws: &mut Workspace) {
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(li);
            let input = if li == 0 { x } else { &before[li - 1] };
            let out = &mut after[0];
            layer.affine(input, out);
            if li == last {
                softmax_in_place(out);
            } else {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }

    fn probs_raw(&self, x: &[f64]) -> Vec<f64> {
        let mut ws = Workspace::new(self);
        self.forward_into(x, &mut ws);
        ws.acts.pop().expect("at least one layer")
    }

    /// Forward pass on a raw slice; returns class probabilities.
    pub fn forward_slice(&self, x: &[f64]) -> Result<ScoreVector> {
        self.check_input(x)?;
        ScoreVector::new(self.probs_raw(x))
    }

    /// Adds gradients of `-log p(target)` for one example into `grads`;
    /// returns that loss.
    fn backprop(
        &self,
        x: &[f64],
        target: TargetRef<'_>,
        ws: &mut Workspace,
        grads: &mut Gradients,
    ) -> f64 {
        self.forward_into(x, ws);
        let probs = ws.acts.last().expect("at least one layer");
        let mut delta = std::mem::take(&mut ws.delta);
        let mut delta_prev = std::mem::take(&mut ws.delta_prev);
        delta.clear();
        delta.extend_from_slice(probs);
        let loss = match target {
            TargetRef::Hard(y) => {
                delta[y.0] -= 1.0;
                neg_log(probs[y.0])
            }
            TargetRef::Soft(q) => {
                let mut l = 0.0;
                for (c, &qc) in q.iter().enumerate() {
                    delta[c] -= qc;
                    if qc > 0.0 {
                        l += qc * neg_log(probs[c]);
                    }
                }
                l
            }
        };

        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let g = &mut grads.layers[li];
            let input: &[f64] = if li == 0 { x } else { &ws.acts[li - 1] };
            for (b, d) in g.bias.iter_mut().zip(&delta) {
                *b += d;
            }
            for (i, &xi) in input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &mut g.weights[i * layer.out_dim..(i + 1) * layer.out_dim];
                for (w, d) in row.iter_mut().zip(&delta) {
                    *w += xi * d;
                }
            }
            if li > 0 {
                delta_prev.clear();
                for (i, &ai) in input.iter().enumerate() {
                    // ReLU derivative: zero where the unit was inactive.
                    if ai <= 0.0 {
                        delta_prev.push(0.0);
                        continue;
                    }
                    let row = &layer.weights[i * layer.out_dim..(i + 1) * layer.out_dim];
                    delta_prev.push(row.iter().zip(&delta).map(|(w, d)| w * d).sum());
                }
                std::mem::swap(&mut delta, &mut delta_prev);
            }
        }
        ws.delta = delta;
        ws.delta_prev = delta_prev;
        loss
    }

    fn apply(&mut self, grads: &Gradients, step: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= step * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= step * gb;
            }
        }
    }

    /// Writes the binary model file.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let dims = self.config.dims();
        w.write_all(MAGIC)?;
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in &dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in self.flat_params() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a binary model file. The loaded config carries seed 0.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DfrdError::ModelFormat("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        if n < 2 {
            return Err(DfrdError::ModelFormat(format!("need >= 2 dims, got {n}")));
        }
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b4)?;
            dims.push(u32::from_le_bytes(b4) as usize);
        }
        let config = MlpConfig::new(dims[0], dims[1..n - 1].to_vec(), dims[n - 1], 0);
        config
            .validate()
            .map_err(|e| DfrdError::ModelFormat(e.to_string()))?;
        let mut model = MlpModel::zeros(&config)?;
        let mut b8 = [0u8; 8];
        for l in &mut model.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                r.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
                if !v.is_finite() {
                    return Err(DfrdError::ModelFormat("non-finite parameter".into()));
                }
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(DfrdError::ModelFormat(format!(
                "{} trailing bytes",
                rest.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        MlpModel::read_from(fs::read(path)?.as_slice())
    }
}

/// Class probabilities for `x`.
pub fn forward_softmax(model: &MlpModel, x: &ScoreVector) -> Result<ScoreVector> {
    model.forward_slice(x.as_slice())
}

/// Ranks of the classes under the model's softmax; rank 1 is the Top-1 class.
pub fn predict_rank(model: &MlpModel, x: &ScoreVector) -> Result<RankVector> {
    rank_of(&forward_softmax(model, x)?)
}

/// Top-1 class for `x`.
pub fn predict_top1(model: &MlpModel, x: &[f64]) -> Result<usize> {
    Ok(model.forward_slice(x)?.argmax())
}

fn check_example<S: Supervised>(model: &MlpModel, s: &S) -> Result<()> {
    model.check_input(s.input())?;
    match s.target() {
        TargetRef::Hard(y) if y.0 >= model.out_dim() => Err(DfrdError::invalid(format!(
            "label {} out of range for {} classes",
            y.0,
            model.out_dim()
        ))),
        TargetRef::Soft(q) if q.len() != model.out_dim() => Err(DfrdError::invalid(format!(
            "soft target has length {}, expected {}",
            q.len(),
            model.out_dim()
        ))),
        _ => Ok(()),
    }
}

/// Mean cross-entropy over `batch` and its exact gradient.
pub fn loss_and_grad<S: Supervised>(model: &MlpModel, batch: &[S]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(DfrdError::invalid("empty batch"));
    }
    for s in batch {
        check_example(model, s)?;
    }
    let mut ws = Workspace::new(model);
    let mut grads = Gradients::zeros_like(model);
    let total: f64 = batch
        .iter()
        .map(|s| model.backprop(s.input(), s.target(), &mut ws, &mut grads))
        .sum();
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Mini-batch gradient descent. Returns the trained model and the per-epoch
/// mean training loss.
pub fn train<S: Supervised>(
    model: &MlpModel,
    data: &[S],
    tc: &TrainConfig,
) -> Result<(MlpModel, Vec<f64>)> {
    tc.validate()?;
    if data.is_empty() {
        return Err(DfrdError::invalid("empty training set"));
    }
    for s in data {
        check_example(model, s)?;
    }
    let mut model = model.clone();
    let mut rng = seed::rng(tc.shuffle_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut ws = Workspace::new(&model);
    let mut grads = Gradients::zeros_like(&model);
    let mut trace = Vec::with_capacity(tc.epochs);
    let budget = tc.max_updates.unwrap_or(usize::MAX);
    let mut updates = 0usize;

    for epoch in 0..tc.epochs {
        if updates >= budget {
            break;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            if updates >= budget {
                break;
            }
            grads.scale(0.0);
            for &i in chunk {
                let s = &data[i];
                epoch_loss += model.backprop(s.input(), s.target(), &mut ws, &mut grads);
            }
            grads.scale(1.0 / chunk.len() as f64);
            model.apply(&grads, tc.step_size);
            updates += 1;
            seen += chunk.len();
        }
        let mean = epoch_loss / seen as f64;
        if !mean.is_finite() {
            return Err(DfrdError::TrainingDiverged { epoch });
        }
        trace.push(mean);
    }
    Ok((model, trace))
}

/// Largest relative disagreement between backprop and central differences
/// with step `h`, over every parameter. Denominators are floored at 1e-6.
pub fn gradient_check<S: Supervised>(model: &MlpModel, batch: &[S], h: f64) -> Result<f64> {
    let (_, analytic) = loss_and_grad(model, batch)?;
    let analytic = analytic.flat();
    let mut m = model.clone();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let orig = *m.param_mut(i);
        *m.param_mut(i) = orig + h;
        let lp = loss_and_grad(&m, batch)?.0;
        *m.param_mut(i) = orig - h;
        let lm = loss_and_grad(&m, batch)?.0;
        *m.param_mut(i) = orig;
        let n = (lp - lm) / (2.0 * h);
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(x: Vec<f64>, y: usize) -> LabeledSample {
        LabeledSample {
            input: ScoreVector::new(x).unwrap(),
            label: OneHotLabel(y),
        }
    }

    fn random_batch(rng: &mut seed::SimRng, n: usize, in_dim: usize, c: usize) -> Vec<LabeledSample> {
        (0..n)
            .map(|_| {
                let x = (0..in_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                sample(x, rng.random_range(0..c))
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = MlpConfig::new(7, vec![5, 3], 4, 9);
        let a = MlpModel::seeded(&cfg).unwrap();
        let b = MlpModel::seeded(&cfg).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        for l in a.layers() {
            let bound = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= bound));
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_hidden_layers_is_linear_softmax() {
        let cfg = MlpConfig::new(3, vec![], 2, 1);
        let m = MlpModel::seeded(&cfg).unwrap();
        assert_eq!(m.layers().len(), 1);
        let p = m.forward_slice(&[0.2, -0.1, 0.4]).unwrap();
        let l = &m.layers()[0];
        let z: Vec<f64> = (0..2)
            .map(|o| (0..3).map(|i| [0.2, -0.1, 0.4][i] * l.weights[i * 2 + o]).sum())
            .collect();
        let e0 = z[0].exp() / (z[0].exp() + z[1].exp());
        assert!((p.as_slice()[0] - e0).abs() < 1e-12);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(MlpModel::seeded(&MlpConfig::new(0, vec![], 2, 1)).is_err());
        assert!(MlpModel::seeded(&MlpConfig::new(2, vec![0], 2, 1)).is_err());
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = MlpModel::zeros(&MlpConfig::new(100, vec![256], 100, 0)).unwrap();
        let x = ScoreVector::new(vec![0.3; 100]).unwrap();
        let p = forward_softmax(&m, &x).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 0.01).abs() < 1e-15));
        let r = predict_rank(&m, &x).unwrap();
        let expected: Vec<u32> = (1..=100).collect();
        assert_eq!(r.as_slice(), expected.as_slice());
    }

    #[test]
    fn softmax_sums_to_one() {
        let cfg = MlpConfig::new(6, vec![8], 5, 4);
        let m = MlpModel::seeded(&cfg).unwrap();
        let mut rng = seed::rng(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-50.0..50.0)).collect();
            let p = m.forward_slice(&x).unwrap();
            assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let m = MlpModel::seeded(&MlpConfig::new(3, vec![2], 2, 0)).unwrap();
        assert!(m.forward_slice(&[1.0, 2.0]).is_err());
        assert!(loss_and_grad(&m, &[sample(vec![1.0], 0)]).is_err());
        assert!(loss_and_grad(&m, &[sample(vec![1.0, 0.0, 0.0], 2)]).is_err());
    }

    #[test]
    fn uniform_model_loss_is_log_c() {
        let m = MlpModel::zeros(&MlpConfig::new(4, vec![3], 100, 0)).unwrap();
        let batch = vec![sample(vec![1.0, 0.0, 0.5, 0.0], 17), sample(vec![0.0; 4], 99)];
        let (loss, _) = loss_and_grad(&m, &batch).unwrap();
        assert!((loss - 100f64.ln()).abs() < 1e-12);
        assert!((loss - 4.6052).abs() < 1e-4);
    }

    #[test]
    fn empty_batch_is_error() {
        let m = MlpModel::zeros(&MlpConfig::new(2, vec![], 2, 0)).unwrap();
        assert!(loss_and_grad::<LabeledSample>(&m, &[]).is_err());
    }

    #[test]
    fn duplicated_batch_has_same_loss_and_grad() {
        let mut rng = seed::rng(8);
        let m = MlpModel::seeded(&MlpConfig::new(5, vec![4], 3, 2)).unwrap();
        let batch = random_batch(&mut rng, 6, 5, 3);
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        let (l1, g1) = loss_and_grad(&m, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&m, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.flat().iter().zip(g2.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // Central differences on the same loss, independent of backprop.
    fn fd_grad<S: Supervised>(model: &MlpModel, batch: &[S], h: f64) -> Vec<f64> {
        let mut m = model.clone();
        (0..m.param_count())
            .map(|i| {
                let orig = *m.param_mut(i);
                *m.param_mut(i) = orig + h;
                let lp = loss_and_grad(&m, batch).unwrap().0;
                *m.param_mut(i) = orig - h;
                let lm = loss_and_grad(&m, batch).unwrap().0;
                *m.param_mut(i) = orig;
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seed::rng(77);
        let m = MlpModel::seeded(&MlpConfig::new(6, vec![5, 4], 3, 13)).unwrap();
        let batch = random_batch(&mut rng, 5, 6, 3);
        let (_, g) = loss_and_grad(&m, &batch).unwrap();
        let fd = fd_grad(&m, &batch, 1e-4);
        for (a, n) in g.flat().iter().zip(&fd) {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(err < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn soft_target_gradients_match_finite_differences() {
        let mut rng = seed::rng(5);
        let m = MlpModel::seeded(&MlpConfig::new(4, vec![6], 3, 3)).unwrap();
        let batch: Vec<SoftSample> = (0..4)
            .map(|_| SoftSample {
                input: ScoreVector::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap(),
                target: vec![0.5, 0.3, 0.2],
            })
            .collect();
        let (_, g) = loss_and_grad(&m, &batch).unwrap();
        let fd = fd_grad(&m, &batch, 1e-4);
        for (a, n) in g.flat().iter().zip(&fd) {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(err < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    fn toy_separable() -> Vec<LabeledSample> {
        // Three clusters around the axes of R^3, 20 points total.
        let mut rng = seed::rng(31);
        (0..20)
            .map(|i| {
                let c = i % 3;
                let mut x: Vec<f64> = (0..3).map(|_| rng.random_range(-0.2..0.2)).collect();
                x[c] += 1.0;
                sample(x, c)
            })
            .collect()
    }

    fn accuracy(m: &MlpModel, data: &[LabeledSample]) -> f64 {
        let hits = data
            .iter()
            .filter(|s| predict_top1(m, s.input.as_slice()).unwrap() == s.label.0)
            .count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn toy_problem_is_learned() {
        let data = toy_separable();
        let m = MlpModel::seeded(&MlpConfig::new(3, vec![16], 3, 1)).unwrap();
        let tc = TrainConfig {
            epochs: 200,
            batch_size: 4,
            step_size: 0.1,
            shuffle_seed: 2,
            max_updates: None,
        };
        let (trained, trace) = train(&m, &data, &tc).unwrap();
        assert_eq!(trace.len(), 200);
        assert_eq!(accuracy(&trained, &data), 1.0);
    }

    #[test]
    fn loss_decreases_with_small_step() {
        let data = toy_separable();
        let m = MlpModel::seeded(&MlpConfig::new(3, vec![16], 3, 1)).unwrap();
        let tc = TrainConfig {
            epochs: 50,
            batch_size: 4,
            step_size: 0.01,
            shuffle_seed: 2,
            max_updates: None,
        };
        let (_, trace) = train(&m, &data, &tc).unwrap();
        assert!(trace.last().unwrap() <= trace.first().unwrap());
    }

    #[test]
    fn zero_step_leaves_model_unchanged() {
        let data = toy_separable();
        let m = MlpModel::seeded(&MlpConfig::new(3, vec![8], 3, 1)).unwrap();
        let tc = TrainConfig {
            step_size: 0.0,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&m, &data, &tc).unwrap();
        assert_eq!(trained, m);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_separable();
        let m = MlpModel::seeded(&MlpConfig::new(3, vec![8], 3, 1)).unwrap();
        let tc = TrainConfig::default();
        let (a, ta) = train(&m, &data, &tc).unwrap();
        let (b, tb) = train(&m, &data, &tc).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.flat_params(), b.flat_params());
    }

    #[test]
    fn divergence_is_reported() {
        let data = vec![sample(vec![1e308, 1e308], 0), sample(vec![1e308, -1e308], 1)];
        let mut m = MlpModel::zeros(&MlpConfig::new(2, vec![], 2, 1)).unwrap();
        m.layers_mut()[0].weights = vec![1.5, -1.5, 1.5, -1.5];
        let tc = TrainConfig {
            epochs: 5,
            batch_size: 2,
            step_size: 0.1,
            shuffle_seed: 0,
            max_updates: None,
        };
        match train(&m, &data, &tc) {
            Err(DfrdError::TrainingDiverged { epoch }) => assert!(epoch < 5),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn shifting_logits_keeps_ranks() {
        let cfg = MlpConfig::new(4, vec![], 5, 6);
        let m = MlpModel::seeded(&cfg).unwrap();
        let mut shifted = m.clone();
        shifted.layers_mut()[0].bias.iter_mut().for_each(|b| *b += 3.5);
        let x = ScoreVector::new(vec![0.1, 0.9, -0.3, 0.4]).unwrap();
        assert_eq!(predict_rank(&m, &x).unwrap(), predict_rank(&shifted, &x).unwrap());
        let r = predict_rank(&m, &x).unwrap();
        assert_eq!(r.top1(), forward_softmax(&m, &x).unwrap().argmax());
    }

    #[test]
    fn model_file_roundtrip_and_layout() {
        let m = MlpModel::seeded(&MlpConfig::new(3, vec![2], 2, 5)).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"DFRDMLP1");
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[12..16], &3u32.to_le_bytes());
        assert_eq!(&buf[16..20], &2u32.to_le_bytes());
        assert_eq!(&buf[20..24], &2u32.to_le_bytes());
        assert_eq!(&buf[24..32], &m.layers()[0].weights[0].to_le_bytes());
        assert_eq!(buf.len(), 24 + 8 * m.param_count());
        let back = MlpModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.flat_params(), m.flat_params());
        assert_eq!(back.config().dims(), m.config().dims());

        assert!(MlpModel::read_from(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(MlpModel::read_from(bad.as_slice()).is_err());
    }
}
