//! Softmax distributions over candidate scores and the KL objective used to
//! distill generation feedback into the retriever and reranker.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, ParamStore, Var};

/// Temperature-1 softmax with max subtraction.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::contract("softmax over zero candidates"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("score {i} is not finite")));
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

fn check_support(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::contract(format!(
            "distributions over {} and {} candidates",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `KL(p || q) = sum p log(p / q)`, with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_support(p, q)?;
    let mut total = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi > 0.0 {
            if *qi <= 0.0 {
                return Err(Error::Numeric(
                    "KL target has zero mass where the model does not".into(),
                ));
            }
            total += pi * (pi / qi).ln();
        }
    }
    Ok(total)
}

/// `KL(softmax(scores) || target)` on the graph; `scores` is `n x 1` or
/// `1 x n` and the target is a constant.
pub fn kl_loss(g: &mut Graph, scores: Var, target: &[f64]) -> Result<Var> {
    let (r, c) = g.shape(scores);
    let row = if r == 1 { scores } else { g.transpose(scores)? };
    check_support(&vec![0.0; r * c], target)?;
    if target.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Numeric("KL target must be strictly positive".into()));
    }
    let log_p = g.log_softmax_rows(row)?;
    let p = g.exp(log_p)?;
    let log_q: Vec<f64> = target.iter().map(|t| t.ln()).collect();
    let log_q = g.constant_row(&log_q);
    let diff = g.sub(log_p, log_q)?;
    let weighted = g.mul(p, diff)?;
    g.sum(weighted)
}

/// Optimizer schedule shared by the retriever and reranker stages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 200,
            batch_size: 8,
            lr: 1e-3,
            seed: 17,
        }
    }
}

/// Runs `cfg.steps` Adam steps, each on the mean loss of a mini-batch of
/// example indices drawn from seeded epoch shuffles. `loss_of` builds the
/// loss for one example. Returns the per-step loss trace.
pub(crate) fn distill(
    stage: &'static str,
    store: &mut ParamStore,
    num_examples: usize,
    cfg: &DistillConfig,
    mut loss_of: impl FnMut(&mut Graph, &ParamStore, usize) -> Result<Var>,
) -> Result<Vec<f64>> {
    if num_examples == 0 {
        return Err(Error::Training {
            stage,
            step: 0,
            message: "no training examples".into(),
        });
    }
    if cfg.lr < 0.0 {
        return Err(Error::config(format!(
            "learning rate must be non-negative, got {}",
            cfg.lr
        )));
    }
    let batch = cfg.batch_size.clamp(1, num_examples);
    let mut rng = seeded(cfg.seed);
    let mut adam = AdamState::new(store, AdamConfig::default());
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..num_examples).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let picked: Vec<usize> = order.drain(..batch).collect();
        let wrap = |e: Error| Error::Training {
            stage,
            step,
            message: e.to_string(),
        };
        let mut g = Graph::new();
        let mut losses = Vec::with_capacity(batch);
        for &i in &picked {
            losses.push(loss_of(&mut g, store, i).map_err(wrap)?);
        }
        let stacked = g.concat_rows(&losses).map_err(wrap)?;
        let loss = g.mean(stacked).map_err(wrap)?;
        let value = g.scalar(loss)?;
        if !value.is_finite() {
            return Err(wrap(Error::Numeric(format!("loss is {value}"))));
        }
        let grads = g.backward(loss)?;
        store.zero_grad();
        store.accumulate(&grads);
        if cfg.lr > 0.0 {
            adam_step(store, &mut adam, cfg.lr)?;
        }
        trace.push(value);
    }
    log::debug!(
        "{stage}: first loss {:?}, last loss {:?}",
        trace.first(),
        trace.last()
    );
    Ok(trace)
}
