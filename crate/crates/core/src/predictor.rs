//! Feed-forward price predictor with hand-written reverse mode, Adam, and
//! MSE pretraining.
//!
//! Weights are one flat vector: for each layer the `out × in` matrix in
//! row-major order followed by its `out` biases. Hidden layers use ReLU; the
//! output layer is affine.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureWindow, Sample};
use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    /// `[input, hidden..., output]`.
    pub layers: Vec<usize>,
    pub seed: u64,
}

impl NetSpec {
    pub fn new(layers: Vec<usize>, seed: u64) -> Self {
        Self { layers, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 || self.layers.contains(&0) {
            return Err(Error::invalid("network needs at least input and output widths, all positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layers.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Uniform `±1/√fan_in` weights and biases from the spec's seed.
    pub fn init(&self) -> Result<Weights> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut data = Vec::with_capacity(self.num_params());
        for w in self.layers.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                data.push(rng.random_range(-bound..bound));
            }
        }
        Ok(Weights {
            layers: self.layers.clone(),
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub layers: Vec<usize>,
    pub data: Vec<f64>,
}

impl Weights {
    pub fn zeros(layers: &[usize]) -> Self {
        let n = layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self {
            layers: layers.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        let expect: usize = self.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if self.layers.len() < 2 || self.data.len() != expect {
            return Err(Error::shape(format!(
                "weights hold {} values, layers {:?} need {expect}",
                self.data.len(),
                self.layers
            )));
        }
        if x.len() != self.layers[0] {
            return Err(Error::shape(format!(
                "input of length {} for a network expecting {}",
                x.len(),
                self.layers[0]
            )));
        }
        Ok(())
    }
}

/// Layer outputs after activation, input first.
fn activations(x: &[f64], w: &Weights) -> Vec<Vec<f64>> {
    let mut acts = vec![x.to_vec()];
    let mut off = 0;
    let last = w.layers.len() - 2;
    for (l, dims) in w.layers.windows(2).enumerate() {
        let (n_in, n_out) = (dims[0], dims[1]);
        let mat = &w.data[off..off + n_in * n_out];
        let bias = &w.data[off + n_in * n_out..off + n_in * n_out + n_out];
        let input = &acts[l];
        let out: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &mat[o * n_in..(o + 1) * n_in];
                let z = bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                if l < last {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect();
        off += n_in * n_out + n_out;
        acts.push(out);
    }
    acts
}

pub fn forward(x: &[f64], w: &Weights) -> Result<Vec<f64>> {
    w.check(x)?;
    Ok(activations(x, w).pop().unwrap())
}

/// `upstreamᵀ ∂forward/∂w` by reverse accumulation.
pub fn vjp(x: &[f64], w: &Weights, upstream: &[f64]) -> Result<Vec<f64>> {
    w.check(x)?;
    if upstream.len() != *w.layers.last().unwrap() {
        return Err(Error::shape("upstream length differs from network output"));
    }
    let acts = activations(x, w);
    let mut grad = vec![0.0; w.data.len()];
    let mut offsets = Vec::with_capacity(w.layers.len() - 1);
    let mut off = 0;
    for dims in w.layers.windows(2) {
        offsets.push(off);
        off += dims[0] * dims[1] + dims[1];
    }
    let mut delta = upstream.to_vec();
    let last = w.layers.len() - 2;
    for l in (0..=last).rev() {
        let (n_in, n_out) = (w.layers[l], w.layers[l + 1]);
        if l < last {
            // ReLU gate at this layer's output
            for (d, a) in delta.iter_mut().zip(&acts[l + 1]) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let base = offsets[l];
        let input = &acts[l];
        for o in 0..n_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            let row = &mut grad[base + o * n_in..base + (o + 1) * n_in];
            for (g, a) in row.iter_mut().zip(input) {
                *g += d * a;
            }
            grad[base + n_in * n_out + o] += d;
        }
        if l > 0 {
            let mat = &w.data[base..base + n_in * n_out];
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (nx, m) in next.iter_mut().zip(&mat[o * n_in..(o + 1) * n_in]) {
                    *nx += d * m;
                }
            }
            delta = next;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_num: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_num: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient skips the step and
/// returns `false`.
pub fn adam_step(w: &mut Weights, grad: &[f64], state: &mut AdamState) -> Result<bool> {
    if grad.len() != w.data.len() || state.m.len() != w.data.len() || state.v.len() != w.data.len() {
        return Err(Error::shape("weights, gradient and optimizer state differ in length"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        log::warn!("non-finite gradient; skipping optimizer step {}", state.step + 1);
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        w.data[i] -= state.lr * mh / (vh.sqrt() + state.eps_num);
    }
    Ok(true)
}

/// Per-channel z-score of inputs and a scalar affine map of outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Length of each input channel.
    pub channel_len: usize,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: f64,
    pub output_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-8 { std } else { 1.0 })
}

impl Normalization {
    pub fn identity(channels: usize, channel_len: usize) -> Self {
        Self {
            channel_len,
            input_mean: vec![0.0; channels],
            input_std: vec![1.0; channels],
            output_mean: 0.0,
            output_std: 1.0,
        }
    }

    /// Statistics of a training set's channel-major features and targets.
    pub fn fit(samples: &[Sample], channel_len: usize) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("cannot normalize an empty dataset"))?;
        let dim = first.x.x.len();
        if channel_len == 0 || dim % channel_len != 0 {
            return Err(Error::shape("feature length is not a multiple of the channel length"));
        }
        let channels = dim / channel_len;
        let mut input_mean = Vec::with_capacity(channels);
        let mut input_std = Vec::with_capacity(channels);
        for c in 0..channels {
            let (m, s) = mean_std(
                samples
                    .iter()
                    .flat_map(|s| s.x.x[c * channel_len..(c + 1) * channel_len].iter().copied()),
            );
            input_mean.push(m);
            input_std.push(s);
        }
        let (output_mean, output_std) = mean_std(samples.iter().flat_map(|s| s.x.target.iter().copied()));
        Ok(Self {
            channel_len,
            input_mean,
            input_std,
            output_mean,
            output_std,
        })
    }

    pub fn input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let c = (i / self.channel_len).min(self.input_mean.len() - 1);
                (v - self.input_mean[c]) / self.input_std[c]
            })
            .collect()
    }

    pub fn output(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| self.output_mean + self.output_std * v).collect()
    }

    pub fn target(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.output_mean) / self.output_std).collect()
    }
}

/// A network together with the normalization it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricePredictor {
    pub spec: NetSpec,
    pub normalization: Normalization,
    pub weights: Weights,
}

impl PricePredictor {
    pub fn predict(&self, x: &FeatureWindow) -> Result<Vec<f64>> {
        self.predict_raw(&x.x)
    }

    pub fn predict_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = forward(&self.normalization.input(x), &self.weights)?;
        Ok(self.normalization.output(&z))
    }

    /// `upstreamᵀ ∂λ̂/∂w` on the price scale.
    pub fn vjp(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let scaled: Vec<f64> = upstream.iter().map(|u| u * self.normalization.output_std).collect();
        vjp(&self.normalization.input(x), &self.weights, &scaled)
    }
}

pub const CHECKPOINT_FORMAT: &str = "storbid-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub spec: NetSpec,
    pub normalization: Normalization,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed training epochs.
    pub epoch: usize,
    #[serde(default)]
    pub adam: Option<AdamState>,
    pub weights: Vec<f64>,
}

impl Checkpoint {
    pub fn new(predictor: &PricePredictor, epoch: usize, adam: Option<AdamState>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            spec: predictor.spec.clone(),
            normalization: predictor.normalization.clone(),
            step: adam.as_ref().map_or(0, |a| a.step),
            epoch,
            adam,
            weights: predictor.weights.data.clone(),
        }
    }

    pub fn predictor(&self) -> Result<PricePredictor> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("unsupported checkpoint format {:?}", self.format)));
        }
        let weights = Weights {
            layers: self.spec.layers.clone(),
            data: self.weights.clone(),
        };
        if weights.data.len() != self.spec.num_params() {
            return Err(Error::shape("checkpoint weight count does not match its network"));
        }
        Ok(PricePredictor {
            spec: self.spec.clone(),
            normalization: self.normalization.clone(),
            weights,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Self = serde_json::from_reader(f)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!(
                "checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                ck.format
            )));
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Mean-squared-error training of a fresh network on `dataset`.
/// Returns the predictor and the per-epoch mean training MSE on the price scale.
pub fn pretrain_mse(dataset: &[Sample], spec: &NetSpec, cfg: &PretrainConfig) -> Result<(PricePredictor, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("pretraining needs a non-empty dataset"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    spec.validate()?;
    let dim = dataset[0].x.x.len();
    let t_len = dataset[0].x.target.len();
    if spec.input_dim() != dim || spec.output_dim() != t_len {
        return Err(Error::shape(format!(
            "network {:?} does not map {dim} features to {t_len} prices",
            spec.layers
        )));
    }
    let channel_len = crate::domain::FEATURE_LOOKBACK.min(dim);
    let norm = Normalization::fit(dataset, channel_len)?;
    let inputs: Vec<(Vec<f64>, Vec<f64>)> = dataset
        .iter()
        .map(|s| (norm.input(&s.x.x), norm.target(&s.x.target)))
        .collect();
    let mut weights = spec.init()?;
    let mut adam = AdamState::new(weights.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let scale2 = norm.output_std * norm.output_std;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let w = &weights;
            let terms = exec::map(batch, |&i| -> Result<(f64, Vec<f64>)> {
                let (x, y) = &inputs[i];
                let pred = forward(x, w)?;
                let resid: Vec<f64> = pred.iter().zip(y).map(|(p, t)| p - t).collect();
                let loss = resid.iter().map(|r| r * r).sum::<f64>() / t_len as f64;
                let up: Vec<f64> = resid.iter().map(|r| 2.0 * r / t_len as f64).collect();
                Ok((loss, vjp(x, w, &up)?))
            });
            let mut grad = vec![0.0; weights.len()];
            for t in terms {
                let (l, g) = t?;
                epoch_loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam_step(&mut weights, &grad, &mut adam)?;
        }
        trace.push(epoch_loss / inputs.len() as f64 * scale2);
    }
    Ok((
        PricePredictor {
            spec: spec.clone(),
            normalization: norm,
            weights,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_output() {
        let w = Weights::zeros(&[3, 4, 2]);
        assert_eq!(forward(&[1.0, 2.0, 3.0], &w).unwrap(), vec![0.0, 0.0]);
        assert_eq!(vjp(&[1.0, 2.0, 3.0], &w, &[0.0, 0.0]).unwrap(), vec![0.0; w.len()]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut w = Weights::zeros(&[3, 3]);
        for i in 0..3 {
            w.data[i * 3 + i] = 1.0;
        }
        assert_eq!(forward(&[4.0, -1.0, 2.5], &w).unwrap(), vec![4.0, -1.0, 2.5]);
    }

    #[test]
    fn linear_layer_vjp_is_outer_product() {
        let spec = NetSpec::new(vec![3, 2], 5);
        let w = spec.init().unwrap();
        let x = [1.0, -2.0, 0.5];
        let u = [0.3, -1.1];
        let g = vjp(&x, &w, &u).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert!((g[o * 3 + i] - u[o] * x[i]).abs() < 1e-15);
            }
            assert!((g[6 + o] - u[o]).abs() < 1e-15);
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = NetSpec::new(vec![16, 8, 4], 9);
        let a = spec.init().unwrap();
        assert_eq!(a, spec.init().unwrap());
        assert_eq!(a.len(), 16 * 8 + 8 + 8 * 4 + 4);
        assert!(a.data[..16 * 8 + 8].iter().all(|v| v.abs() <= 0.25));
        assert_ne!(a, NetSpec::new(vec![16, 8, 4], 10).init().unwrap());
    }

    #[test]
    fn shape_errors() {
        let w = Weights::zeros(&[3, 2]);
        assert!(forward(&[1.0], &w).is_err());
        assert!(vjp(&[1.0, 2.0, 3.0], &w, &[1.0]).is_err());
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut w = Weights { layers: vec![1, 1], data: vec![1.0, 2.0] };
        let mut st = AdamState::new(2, 0.1);
        adam_step(&mut w, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(w.data, vec![1.0, 2.0]);
        let mut w = Weights { layers: vec![1, 1], data: vec![1.0, 2.0] };
        let mut st = AdamState::new(2, 0.1);
        adam_step(&mut w, &[4.0, -0.5], &mut st).unwrap();
        // bias-corrected first step moves each coordinate by lr·g/(|g| + eps)
        assert!((w.data[0] - (1.0 - 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-12);
        assert!((w.data[1] - (2.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adam_descends_quadratic_and_skips_nan() {
        let mut w = Weights { layers: vec![1, 1], data: vec![3.0, 0.0] };
        let mut st = AdamState::new(2, 0.1);
        let f = |w: &Weights| w.data[0] * w.data[0];
        let f0 = f(&w);
        for _ in 0..2 {
            let g = [2.0 * w.data[0], 0.0];
            adam_step(&mut w, &g, &mut st).unwrap();
        }
        assert!(f(&w) < f0);
        let before = w.clone();
        assert!(!adam_step(&mut w, &[f64::NAN, 0.0], &mut st).unwrap());
        assert_eq!(w, before);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn normalization_round_trip() {
        let n = Normalization {
            channel_len: 2,
            input_mean: vec![1.0, 10.0],
            input_std: vec![2.0, 5.0],
            output_mean: 30.0,
            output_std: 4.0,
        };
        assert_eq!(n.input(&[3.0, 1.0, 20.0, 10.0]), vec![1.0, 0.0, 2.0, 0.0]);
        let y = [26.0, 38.0];
        assert_eq!(n.output(&n.target(&y)), y.to_vec());
    }
}
