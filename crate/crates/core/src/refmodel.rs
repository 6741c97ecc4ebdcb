//! Desk-scale reference classifier used to exercise the surgery pipeline
//! end to end: token embedding, mean pool over the context window, a
//! stack of tanh linear layers, and a linear head over the vocabulary.
//!
//! Checkpoints store f32; every forward, gradient, and update here runs
//! in f64 and truncates only when a ParamSet is materialized. Gradient
//! correctness is pinned by central finite differences in the test suite.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::paramset::ParamSet;
use crate::tensor::Tensor;

/// Architecture description. `hidden_dims[0]` is the embedding width;
/// each later entry adds a tanh linear layer of that width; a linear
/// head maps the last width back to the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct RefModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
}

impl RefModelConfig {
    pub fn new(vocab_size: usize, context_len: usize, hidden_dims: Vec<usize>, seed: u64) -> Result<RefModelConfig> {
        if vocab_size < 2 || context_len == 0 || hidden_dims.is_empty() || hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "degenerate model config: vocab {vocab_size}, context {context_len}, dims {hidden_dims:?}"
            )));
        }
        Ok(RefModelConfig {
            vocab_size,
            context_len,
            hidden_dims,
            seed,
        })
    }

    /// Reads the architecture back out of a checkpoint's names and
    /// shapes. The context length is not recoverable from weights (the
    /// mean pool is length-agnostic), so the caller supplies it.
    pub fn infer(model: &ParamSet, context_len: u64) -> Result<RefModelConfig> {
        let embed = model
            .get(EMBED_NAME)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks {EMBED_NAME:?}")))?;
        if embed.shape().len() != 2 {
            return Err(Error::Incompatible(format!(
                "{EMBED_NAME:?} must be 2-D, found shape {:?}",
                embed.shape()
            )));
        }
        let vocab_size = embed.shape()[0];
        let mut hidden_dims = vec![embed.shape()[1]];
        let mut layer = 1;
        loop {
            match model.get(&weight_name(layer)) {
                Some(w) if w.shape().len() == 2 => {
                    if model.get(&weight_name(layer + 1)).is_some() {
                        hidden_dims.push(w.shape()[0]);
                        layer += 1;
                    } else {
                        // Last linear layer is the head; its fan-out is the vocab.
                        break;
                    }
                }
                _ => {
                    return Err(Error::Incompatible(format!(
                        "checkpoint lacks {:?}",
                        weight_name(layer)
                    )))
                }
            }
        }
        RefModelConfig::new(vocab_size, context_len as usize, hidden_dims, 0)
    }

    fn layer_count(&self) -> usize {
        self.hidden_dims.len()
    }
}

pub const EMBED_NAME: &str = "layer.0.embed";

pub fn weight_name(layer: usize) -> String {
    format!("layer.{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer.{layer}.bias")
}

/// A classification batch: `n` rows of `context_len` token ids plus one
/// target token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    context_len: usize,
    tokens: Vec<u32>,
    targets: Vec<u32>,
}

impl Batch {
    pub fn new(context_len: usize, tokens: Vec<u32>, targets: Vec<u32>) -> Result<Batch> {
        if context_len == 0 {
            return Err(Error::InvalidArgument("context_len must be positive".into()));
        }
        if tokens.len() != context_len * targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tokens do not tile {} rows of {}",
                tokens.len(),
                targets.len(),
                context_len
            )));
        }
        Ok(Batch {
            context_len,
            tokens,
            targets,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.targets.len()
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.context_len..(i + 1) * self.context_len]
    }

    pub fn target(&self, i: usize) -> u32 {
        self.targets[i]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[u32], u32)> {
        (0..self.n_samples()).map(move |i| (self.row(i), self.target(i)))
    }

    /// Concatenation; both sides must share a context length.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.context_len != other.context_len {
            return Err(Error::InvalidArgument(format!(
                "cannot concat context {} with {}",
                self.context_len, other.context_len
            )));
        }
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(&other.tokens);
        let mut targets = self.targets.clone();
        targets.extend_from_slice(&other.targets);
        Batch::new(self.context_len, tokens, targets)
    }

    /// Keeps the first `n` rows.
    pub fn take(&self, n: usize) -> Batch {
        let n = n.min(self.n_samples());
        Batch {
            context_len: self.context_len,
            tokens: self.tokens[..n * self.context_len].to_vec(),
            targets: self.targets[..n].to_vec(),
        }
    }

    /// Deterministically shuffles row order.
    pub fn shuffled(&self, seed: u64) -> Batch {
        let mut order: Vec<usize> = (0..self.n_samples()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut tokens = Vec::with_capacity(self.tokens.len());
        let mut targets = Vec::with_capacity(self.targets.len());
        for &i in &order {
            tokens.extend_from_slice(self.row(i));
            targets.push(self.target(i));
        }
        Batch {
            context_len: self.context_len,
            tokens,
            targets,
        }
    }
}

/// Inputs observed by one linear layer over a batch, keyed by the weight
/// tensor they feed. The matrix is `[n_samples, fan_in]`, f32 like every
/// other stored artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibRecord {
    pub layer: String,
    pub activations: Tensor,
}

// In-memory f64 view of a checkpoint, validated against a config.
struct Net {
    vocab: usize,
    dims: Vec<usize>,
    embed: Vec<f64>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Net {
    fn from_param_set(model: &ParamSet, cfg: &RefModelConfig) -> Result<Net> {
        let l = cfg.layer_count();
        let expected_names = 1 + 2 * l;
        if model.len() != expected_names {
            return Err(Error::Incompatible(format!(
                "model has {} tensors, config wants {}",
                model.len(),
                expected_names
            )));
        }
        let embed_t = model
            .get(EMBED_NAME)
            .ok_or_else(|| Error::Incompatible(format!("missing {EMBED_NAME:?}")))?;
        expect_shape(EMBED_NAME, embed_t, &[cfg.vocab_size, cfg.hidden_dims[0]])?;
        let embed = embed_t.to_f64_vec();

        let mut weights = Vec::with_capacity(l);
        let mut biases = Vec::with_capacity(l);
        for layer in 1..=l {
            let (fan_in, fan_out) = layer_extent(cfg, layer);
            let wn = weight_name(layer);
            let wt = model
                .get(&wn)
                .ok_or_else(|| Error::Incompatible(format!("missing {wn:?}")))?;
            expect_shape(&wn, wt, &[fan_out, fan_in])?;
            weights.push(wt.to_f64_vec());
            let bn = bias_name(layer);
            let bt = model
                .get(&bn)
                .ok_or_else(|| Error::Incompatible(format!("missing {bn:?}")))?;
            expect_shape(&bn, bt, &[fan_out])?;
            biases.push(bt.to_f64_vec());
        }
        Ok(Net {
            vocab: cfg.vocab_size,
            dims: cfg.hidden_dims.clone(),
            embed,
            weights,
            biases,
        })
    }

    fn to_param_set(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert(
            EMBED_NAME,
            f32_tensor(vec![self.vocab, self.dims[0]], &self.embed),
        );
        for (idx, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let layer = idx + 1;
            let fan_in = self.dims[layer - 1];
            let fan_out = b.len();
            ps.insert(weight_name(layer), f32_tensor(vec![fan_out, fan_in], w));
            ps.insert(bias_name(layer), f32_tensor(vec![fan_out], b));
        }
        ps
    }

    fn layer_count(&self) -> usize {
        self.weights.len()
    }

    // Forward for one sample. `acts[l]` receives the input to linear
    // layer l+1; `acts[L]` receives the logits.
    fn forward_sample(&self, tokens: &[u32], acts: &mut Vec<Vec<f64>>) -> Result<()> {
        acts.clear();
        let h0 = self.dims[0];
        let mut pooled = vec![0.0f64; h0];
        for &t in tokens {
            let t = t as usize;
            if t >= self.vocab {
                return Err(Error::TokenOutOfRange {
                    id: t as u32,
                    vocab: self.vocab,
                });
            }
            for (p, e) in pooled.iter_mut().zip(&self.embed[t * h0..(t + 1) * h0]) {
                *p += e;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        for p in &mut pooled {
            *p *= inv;
        }
        acts.push(pooled);

        let l = self.layer_count();
        for layer_idx in 0..l {
            let input = acts.last().expect("pushed above");
            let fan_in = input.len();
            let w = &self.weights[layer_idx];
            let mut z = self.biases[layer_idx].clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = 0.0;
                for (x, wv) in input.iter().zip(row) {
                    acc += x * wv;
                }
                *zo += acc;
            }
            if layer_idx + 1 < l {
                for v in &mut z {
                    *v = v.tanh();
                }
            }
            acts.push(z);
        }
        Ok(())
    }

    // Backward for one sample; adds `weight load-scaled` gradients into `g`.
    // Returns the sample's NLL. `acts` must come from forward_sample.
    fn backprop_sample(
        &self,
        tokens: &[u32],
        target: u32,
        acts: &[Vec<f64>],
        scale: f64,
        g: &mut NetGrads,
    ) -> Result<f64> {
        let l = self.layer_count();
        let logits = &acts[l];
        if target as usize >= self.vocab {
            return Err(Error::TokenOutOfRange {
                id: target,
                vocab: self.vocab,
            });
        }
        let ls = log_softmax(logits);
        let loss = -ls[target as usize];

        // dz for the head: softmax - onehot.
        let mut dz: Vec<f64> = ls.iter().map(|&v| v.exp()).collect();
        dz[target as usize] -= 1.0;

        for layer_idx in (0..l).rev() {
            let input = &acts[layer_idx];
            let fan_in = input.len();
            let w = &self.weights[layer_idx];
            let gw = &mut g.weights[layer_idx];
            let gb = &mut g.biases[layer_idx];
            let mut dinput = vec![0.0f64; fan_in];
            for (o, &dzo) in dz.iter().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let grow = &mut gw[o * fan_in..(o + 1) * fan_in];
                let contrib = dzo * scale;
                for i in 0..fan_in {
                    grow[i] += contrib * input[i];
                    dinput[i] += dzo * row[i];
                }
                gb[o] += contrib;
            }
            if layer_idx > 0 {
                // acts[layer_idx] is tanh output; derivative is 1 - a^2.
                dz = dinput
                    .iter()
                    .zip(input)
                    .map(|(&d, &a)| d * (1.0 - a * a))
                    .collect();
            } else {
                let h0 = self.dims[0];
                let inv = scale / tokens.len() as f64;
                for &t in tokens {
                    let row = &mut g.embed[t as usize * h0..(t as usize + 1) * h0];
                    for (gv, dv) in row.iter_mut().zip(&dinput) {
                        *gv += dv * inv;
                    }
                }
            }
        }
        Ok(loss)
    }
}

struct NetGrads {
    embed: Vec<f64>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl NetGrads {
    fn zeros_like(net: &Net) -> NetGrads {
        NetGrads {
            embed: vec![0.0; net.embed.len()],
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn reset(&mut self) {
        self.embed.iter_mut().for_each(|v| *v = 0.0);
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn expect_shape(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            left: t.shape().to_vec(),
            right: shape.to_vec(),
        });
    }
    Ok(())
}

// (fan_in, fan_out) of linear layer `layer` (1-based; the last one is the head).
fn layer_extent(cfg: &RefModelConfig, layer: usize) -> (usize, usize) {
    let fan_in = cfg.hidden_dims[layer - 1];
    let fan_out = if layer == cfg.layer_count() {
        cfg.vocab_size
    } else {
        cfg.hidden_dims[layer]
    };
    (fan_in, fan_out)
}

fn f32_tensor(shape: Vec<usize>, data: &[f64]) -> Tensor {
    Tensor::from_f32(shape, data.iter().map(|&v| v as f32).collect())
        .expect("finite by construction")
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|v| v - lse).collect()
}

/// Numerically stable softmax of one logit row.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).iter().map(|v| v.exp()).collect()
}

/// Seeded random initialization: embeddings and weights are scaled
/// uniforms, biases start at zero.
pub fn init_model(cfg: &RefModelConfig) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |n: usize, scale: f64| -> Vec<f64> {
        (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect()
    };
    let mut net = Net {
        vocab: cfg.vocab_size,
        dims: cfg.hidden_dims.clone(),
        embed: Vec::new(),
        weights: Vec::new(),
        biases: Vec::new(),
    };
    net.embed = draw(cfg.vocab_size * cfg.hidden_dims[0], 0.5);
    for layer in 1..=cfg.layer_count() {
        let (fan_in, fan_out) = layer_extent(cfg, layer);
        let scale = 1.0 / (fan_in as f64).sqrt();
        net.weights.push(draw(fan_in * fan_out, scale));
        net.biases.push(vec![0.0; fan_out]);
    }
    net.to_param_set()
}

/// Runs the model over a batch. Returns `[n, vocab]` logits (f64) and,
/// when `capture` is set, one CalibRecord per linear layer holding the
/// exact inputs that layer saw (truncated to f32, the storage width).
pub fn forward(
    model: &ParamSet,
    cfg: &RefModelConfig,
    batch: &Batch,
    capture: bool,
) -> Result<(Tensor, Option<Vec<CalibRecord>>)> {
    if batch.context_len() != cfg.context_len {
        return Err(Error::InvalidArgument(format!(
            "batch context {} does not match config context {}",
            batch.context_len(),
            cfg.context_len
        )));
    }
    let net = Net::from_param_set(model, cfg)?;
    let n = batch.n_samples();
    let l = net.layer_count();
    let mut logits = Vec::with_capacity(n * net.vocab);
    let mut captured: Vec<Vec<f32>> = vec![Vec::new(); l];
    let mut acts = Vec::new();
    for (tokens, _) in batch.rows() {
        net.forward_sample(tokens, &mut acts)?;
        if capture {
            for (layer_idx, act) in acts[..l].iter().enumerate() {
                captured[layer_idx].extend(act.iter().map(|&v| v as f32));
            }
        }
        logits.extend_from_slice(&acts[l]);
    }
    let logits = Tensor::from_f64(vec![n, net.vocab], logits)?;
    let records = if capture {
        let mut out = Vec::with_capacity(l);
        for (layer_idx, rows) in captured.into_iter().enumerate() {
            let fan_in = net.dims[layer_idx];
            out.push(CalibRecord {
                layer: weight_name(layer_idx + 1),
                activations: Tensor::from_f32(vec![n, fan_in], rows)?,
            });
        }
        Some(out)
    } else {
        None
    };
    Ok((logits, records))
}

/// Mean negative log-likelihood over the batch and its gradient for
/// every parameter tensor, keyed like the model.
pub fn loss_and_grads(
    model: &ParamSet,
    cfg: &RefModelConfig,
    batch: &Batch,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if batch.n_samples() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.context_len() != cfg.context_len {
        return Err(Error::InvalidArgument(format!(
            "batch context {} does not match config context {}",
            batch.context_len(),
            cfg.context_len
        )));
    }
    let net = Net::from_param_set(model, cfg)?;
    let mut grads = NetGrads::zeros_like(&net);
    let scale = 1.0 / batch.n_samples() as f64;
    let mut acts = Vec::new();
    let mut total = 0.0;
    for (tokens, target) in batch.rows() {
        net.forward_sample(tokens, &mut acts)?;
        total += net.backprop_sample(tokens, target, &acts, scale, &mut grads)?;
    }
    let loss = total * scale;

    let mut out = BTreeMap::new();
    out.insert(
        EMBED_NAME.to_string(),
        Tensor::from_f64(vec![net.vocab, net.dims[0]], grads.embed)?,
    );
    for (idx, (w, b)) in grads.weights.into_iter().zip(grads.biases).enumerate() {
        let layer = idx + 1;
        let (fan_in, fan_out) = layer_extent(cfg, layer);
        out.insert(
            weight_name(layer),
            Tensor::from_f64(vec![fan_out, fan_in], w)?,
        );
        out.insert(bias_name(layer), Tensor::from_f64(vec![fan_out], b)?);
    }
    Ok((loss, out))
}

/// Plain SGD: `epochs` passes over the batch in seeded shuffled order,
/// one update per sample at fixed `lr`. Deterministic for a given seed.
/// `epochs = 0` returns the model unchanged.
pub fn train(
    model: &ParamSet,
    cfg: &RefModelConfig,
    data: &Batch,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<ParamSet> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("lr must be positive, got {lr}")));
    }
    if data.context_len() != cfg.context_len {
        return Err(Error::InvalidArgument(format!(
            "batch context {} does not match config context {}",
            data.context_len(),
            cfg.context_len
        )));
    }
    if epochs == 0 {
        return Ok(model.clone());
    }
    let mut net = Net::from_param_set(model, cfg)?;
    let mut grads = NetGrads::zeros_like(&net);
    let mut order: Vec<usize> = (0..data.n_samples()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acts = Vec::new();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let tokens = data.row(i);
            net.forward_sample(tokens, &mut acts)?;
            grads.reset();
            net.backprop_sample(tokens, data.target(i), &acts, 1.0, &mut grads)?;
            for (v, g) in net.embed.iter_mut().zip(&grads.embed) {
                *v -= lr * g;
            }
            for (w, gw) in net.weights.iter_mut().zip(&grads.weights) {
                for (v, g) in w.iter_mut().zip(gw) {
                    *v -= lr * g;
                }
            }
            for (b, gb) in net.biases.iter_mut().zip(&grads.biases) {
                for (v, g) in b.iter_mut().zip(gb) {
                    *v -= lr * g;
                }
            }
        }
    }
    let mut out = net.to_param_set();
    for (k, v) in model.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    Ok(out)
}

/// Refusal rate and task accuracy of a model on two labeled batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub refusal_rate: f64,
    pub task_accuracy: f64,
}

/// Fraction of `safety_set` rows whose argmax is `refuse_token`, and
/// fraction of `task_set` rows whose argmax hits the row's target.
pub fn eval_suite(
    model: &ParamSet,
    cfg: &RefModelConfig,
    safety_set: &Batch,
    task_set: &Batch,
    refuse_token: u32,
) -> Result<EvalReport> {
    Ok(EvalReport {
        refusal_rate: argmax_rate(model, cfg, safety_set, |_, row_target| {
            let _ = row_target;
            refuse_token
        })?,
        task_accuracy: argmax_rate(model, cfg, task_set, |_, row_target| row_target)?,
    })
}

fn argmax_rate(
    model: &ParamSet,
    cfg: &RefModelConfig,
    batch: &Batch,
    wanted: impl Fn(usize, u32) -> u32,
) -> Result<f64> {
    if batch.n_samples() == 0 {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let (logits, _) = forward(model, cfg, batch, false)?;
    let rows = logits.as_f64()?;
    let vocab = cfg.vocab_size;
    let mut hits = 0usize;
    for i in 0..batch.n_samples() {
        let row = &rows[i * vocab..(i + 1) * vocab];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best as u32 == wanted(i, batch.target(i)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch.n_samples() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dtype;

    fn tiny_cfg() -> RefModelConfig {
        RefModelConfig::new(6, 3, vec![4, 5], 11).unwrap()
    }

    fn batch(cfg: &RefModelConfig, rows: &[(&[u32], u32)]) -> Batch {
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        for (r, t) in rows {
            tokens.extend_from_slice(r);
            targets.push(*t);
        }
        Batch::new(cfg.context_len, tokens, targets).unwrap()
    }

    #[test]
    fn zero_model_gives_uniform_softmax_and_ln_v_loss() {
        let cfg = tiny_cfg();
        let model: ParamSet = init_model(&cfg)
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec(), Dtype::F32)))
            .collect();
        let b = batch(&cfg, &[(&[1, 2, 3], 4)]);
        let (logits, _) = forward(&model, &cfg, &b, false).unwrap();
        let p = softmax(logits.as_f64().unwrap());
        for v in &p {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
        let (loss, _) = loss_and_grads(&model, &cfg, &b).unwrap();
        assert!((loss - (6.0f64).ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let cfg = tiny_cfg();
        let model = init_model(&cfg);
        let b = batch(&cfg, &[(&[0, 1, 2], 0), (&[5, 5, 5], 1)]);
        let (logits, _) = forward(&model, &cfg, &b, false).unwrap();
        let rows = logits.as_f64().unwrap();
        for i in 0..2 {
            let s: f64 = softmax(&rows[i * 6..(i + 1) * 6]).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    // One linear layer over a known embedding, checked against matrices
    // multiplied by hand.
    #[test]
    fn single_layer_forward_matches_hand_product() {
        let cfg = RefModelConfig::new(3, 2, vec![2], 0).unwrap();
        let mut model = ParamSet::new();
        model.insert(
            EMBED_NAME,
            Tensor::from_f32(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0]).unwrap(),
        );
        model.insert(
            "layer.1.weight",
            Tensor::from_f32(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap(),
        );
        model.insert(
            "layer.1.bias",
            Tensor::from_f32(vec![3], vec![0.1, 0.2, 0.3]).unwrap(),
        );
        // tokens 0 and 2: pooled = ((1,0) + (2,-1)) / 2 = (1.5, -0.5)
        let b = Batch::new(2, vec![0, 2], vec![0]).unwrap();
        let (logits, _) = forward(&model, &cfg, &b, false).unwrap();
        let z = logits.as_f64().unwrap();
        // W @ pooled + b = (1*1.5 + 2*-0.5 + .1, -1*1.5 + .5*-0.5 + .2, 0*1.5 + 3*-0.5 + .3)
        let want = [0.6, -1.55, -1.2];
        for (got, want) in z.iter().zip(&want) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn duplicated_rows_leave_mean_gradient_unchanged() {
        let cfg = tiny_cfg();
        let model = init_model(&cfg);
        let one = batch(&cfg, &[(&[1, 4, 2], 3)]);
        let four = batch(
            &cfg,
            &[(&[1, 4, 2], 3), (&[1, 4, 2], 3), (&[1, 4, 2], 3), (&[1, 4, 2], 3)],
        );
        let (l1, g1) = loss_and_grads(&model, &cfg, &one).unwrap();
        let (l4, g4) = loss_and_grads(&model, &cfg, &four).unwrap();
        assert!((l1 - l4).abs() < 1e-13);
        for (name, t1) in &g1 {
            let a = t1.as_f64().unwrap();
            let b = g4[name].as_f64().unwrap();
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0), "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn out_of_range_tokens_error() {
        let cfg = tiny_cfg();
        let model = init_model(&cfg);
        let b = batch(&cfg, &[(&[1, 2, 6], 0)]);
        assert!(matches!(
            forward(&model, &cfg, &b, false),
            Err(Error::TokenOutOfRange { id: 6, .. })
        ));
        let b2 = batch(&cfg, &[(&[1, 2, 3], 9)]);
        assert!(matches!(
            loss_and_grads(&model, &cfg, &b2),
            Err(Error::TokenOutOfRange { id: 9, .. })
        ));
    }

    #[test]
    fn capture_replay_is_bit_identical() {
        let cfg = tiny_cfg();
        let model = init_model(&cfg);
        let b = batch(&cfg, &[(&[0, 1, 2], 0), (&[3, 4, 5], 1), (&[2, 2, 2], 5)]);
        let (_, r1) = forward(&model, &cfg, &b, true).unwrap();
        let (_, r2) = forward(&model, &cfg, &b, true).unwrap();
        let (r1, r2) = (r1.unwrap(), r2.unwrap());
        assert_eq!(r1.len(), 2);
        assert_eq!(r1[0].layer, "layer.1.weight");
        assert_eq!(r1[1].layer, "layer.2.weight");
        assert_eq!(r1[0].activations.shape(), &[3, 4]);
        assert_eq!(r1[1].activations.shape(), &[3, 5]);
        for (a, b) in r1.iter().zip(&r2) {
            assert!(a.activations.bit_eq(&b.activations));
        }
    }

    // Quick finite-difference spot check; the full multi-config sweep
    // with the 1e-4 gate lives in the acceptance suite.
    #[test]
    fn gradients_agree_with_finite_differences() {
        let cfg = tiny_cfg();
        let model = init_model(&cfg);
        let b = batch(&cfg, &[(&[1, 2, 3], 4), (&[0, 5, 0], 2)]);
        let (_, grads) = loss_and_grads(&model, &cfg, &b).unwrap();

        // Perturb a shadow f64 copy so the difference quotient is exact.
        let f64_model: ParamSet = model
            .iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    Tensor::from_f64(t.shape().to_vec(), t.to_f64_vec()).unwrap(),
                )
            })
            .collect();
        let h = 1e-4;
        for name in ["layer.1.weight", "layer.0.embed", "layer.2.bias"] {
            let base = f64_model.get(name).unwrap().to_f64_vec();
            let g = grads[name].as_f64().unwrap();
            for idx in [0usize, base.len() / 2, base.len() - 1] {
                let probe = |delta: f64| -> f64 {
                    let mut m = f64_model.clone();
                    let mut vals = base.clone();
                    vals[idx] += delta;
                    m.insert(
                        name,
                        Tensor::from_f64(f64_model.get(name).unwrap().shape().to_vec(), vals)
                            .unwrap(),
                    );
                    loss_and_grads(&m, &cfg, &b).unwrap().0
                };
                let fd = (probe(h) - probe(-h)) / (2.0 * h);
                let denom = fd.abs().max(g[idx].abs()).max(1e-8);
                assert!(
                    (fd - g[idx]).abs() / denom < 1e-4,
                    "{name}[{idx}]: fd {fd} vs grad {}",
                    g[idx]
                );
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_identity() {
        let cfg = tiny_cfg();
        let model = init_model(&cfg);
        let b = batch(&cfg, &[(&[1, 2, 3], 4), (&[0, 5, 0], 2), (&[3, 3, 1], 0)]);
        let t0 = train(&model, &cfg, &b, 0.1, 0, 9).unwrap();
        assert!(t0.bit_eq(&model));
        let t1 = train(&model, &cfg, &b, 0.1, 5, 9).unwrap();
        let t2 = train(&model, &cfg, &b, 0.1, 5, 9).unwrap();
        assert!(t1.bit_eq(&t2));
        assert!(!t1.bit_eq(&model));
    }

    #[test]
    fn config_inference_recovers_architecture() {
        let cfg = RefModelConfig::new(9, 4, vec![3, 7, 5], 1).unwrap();
        let model = init_model(&cfg);
        let inferred = RefModelConfig::infer(&model, 4).unwrap();
        assert_eq!(inferred.vocab_size, 9);
        assert_eq!(inferred.hidden_dims, vec![3, 7, 5]);
    }
}
