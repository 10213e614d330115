//! Supervised training of the predictor against oracle routing.
//!
//! The loss is the softmax cross-entropy of every MoE-layer head, summed over
//! layers and averaged over the tokens of a batch. Sparsemax is only used at
//! prediction time. Each trace batch is one optimisation step (Adam).

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sru::{layer_backward, sru_forward_cached};
use super::{head_logits, SruParams, DEFAULT_SRU_LAYERS};
use crate::error::{Error, Result};
use crate::workload::RoutingTrace;

const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub num_sru_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.001,
            seed: 0,
            num_sru_layers: DEFAULT_SRU_LAYERS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedPredictor {
    pub params: SruParams,
    /// `(epoch, loss)`; epoch 0 is the loss at initialization, later entries
    /// are the mean per-batch loss seen during that epoch.
    pub loss_curve: Vec<(usize, f64)>,
}

impl TrainedPredictor {
    pub fn write_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "epoch,loss")?;
        for (epoch, loss) in &self.loss_curve {
            writeln!(out, "{epoch},{loss}")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn check_labels(embeddings: &Array2<f64>, labels: &[Vec<usize>], params: &SruParams) -> Result<()> {
    if labels.len() != params.num_moe_layers() {
        return Err(Error::Config(format!(
            "{} label rows for {} heads",
            labels.len(),
            params.num_moe_layers()
        )));
    }
    if embeddings.ncols() != params.d_model() {
        return Err(Error::Config(format!(
            "batch width {} does not match predictor width {}",
            embeddings.ncols(),
            params.d_model()
        )));
    }
    let e = params.num_experts();
    for row in labels {
        if row.len() != embeddings.nrows() || row.iter().any(|&k| k >= e) {
            return Err(Error::Config("labels do not fit the batch".into()));
        }
    }
    Ok(())
}

/// Softmax cross-entropy of one head; returns `(loss sum, d loss / d logits)`
/// with the gradient already divided by the token count.
fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let tokens = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (t, row) in logits.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_norm = max + sum.ln();
        loss += log_norm - row[labels[t]];
        for (k, &v) in row.iter().enumerate() {
            grad[[t, k]] = (v - log_norm).exp() / tokens;
        }
        grad[[t, labels[t]]] -= 1.0 / tokens;
    }
    (loss, grad)
}

/// Mean-over-tokens loss of one batch.
pub fn batch_loss(params: &SruParams, embeddings: &Array2<f64>, labels: &[Vec<usize>]) -> Result<f64> {
    check_labels(embeddings, labels, params)?;
    let caches = sru_forward_cached(embeddings, &params.layers)?;
    let top = caches.last().map_or(embeddings, |c| &c.h);
    let total: f64 = head_logits(top, params)
        .iter()
        .zip(labels)
        .map(|(logits, row)| cross_entropy(logits, row).0)
        .sum();
    Ok(total / embeddings.nrows() as f64)
}

/// Loss of one batch and its gradient w.r.t. every parameter.
pub fn loss_and_grad(
    params: &SruParams,
    embeddings: &Array2<f64>,
    labels: &[Vec<usize>],
) -> Result<(f64, SruParams)> {
    check_labels(embeddings, labels, params)?;
    let caches = sru_forward_cached(embeddings, &params.layers)?;
    let top = caches.last().map_or(embeddings, |c| &c.h);

    let mut grads = params.zeros_like();
    let mut d_top = Array2::zeros(top.dim());
    let mut total = 0.0;
    for (l, (logits, row)) in head_logits(top, params).iter().zip(labels).enumerate() {
        let (loss, d_logits) = cross_entropy(logits, row);
        total += loss;
        grads.heads[l].weights = d_logits.t().dot(top);
        grads.heads[l].bias = d_logits.sum_axis(Axis(0));
        d_top += &d_logits.dot(&params.heads[l].weights);
    }

    let mut dh = d_top;
    for (i, cache) in caches.iter().enumerate().rev() {
        let (dx, layer_grads) = layer_backward(cache, &params.layers[i], &dh);
        grads.layers[i] = layer_grads;
        dh = dx;
    }
    Ok((total / embeddings.nrows() as f64, grads))
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: SruParams,
    v: SruParams,
}

impl Adam {
    fn new(params: &SruParams, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    fn update(&mut self, params: &mut SruParams, grads: &SruParams) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

pub fn train_predictor(trace: &RoutingTrace, config: &TrainConfig) -> Result<TrainedPredictor> {
    trace.validate()?;
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {}",
            config.learning_rate
        )));
    }
    let shape = trace.shape;
    let mut params = SruParams::init(
        shape.d_model,
        config.num_sru_layers,
        shape.num_layers,
        shape.experts_per_layer,
        config.seed,
    )?;

    let mut initial = 0.0;
    for batch in &trace.batches {
        initial += batch_loss(&params, &batch.embeddings, &batch.oracle_routing)?;
    }
    let mut loss_curve = vec![(0, initial / trace.batches.len() as f64)];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..trace.batches.len()).collect();
    let mut adam = Adam::new(&params, config.learning_rate);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &b in &order {
            let batch = &trace.batches[b];
            let (loss, grads) = match loss_and_grad(&params, &batch.embeddings, &batch.oracle_routing) {
                Ok(v) => v,
                Err(Error::Numeric(_)) => return Err(Error::Training { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Training { epoch, loss });
            }
            sum += loss;
            adam.update(&mut params, &grads);
        }
        let mean = sum / order.len() as f64;
        loss_curve.push((epoch, mean));
    }

    Ok(TrainedPredictor { params, loss_curve })
}
