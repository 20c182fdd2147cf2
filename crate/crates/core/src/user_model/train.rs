//! Contrastive training loop for the user encoder.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::{sample_views, AugmentationConfig, AugmentedView};
use super::encoder::UserEncoder;
use super::loss::infonce_loss;
use crate::error::{Error, Result};
use crate::nn::seeded;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub augment: AugmentationConfig,
    pub seed: u64,
}

impl Default for UserTrainConfig {
    fn default() -> Self {
        UserTrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            tau: 0.1,
            augment: AugmentationConfig::default(),
            seed: 17,
        }
    }
}

/// Mean loss per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UserTrainTrace {
    pub epoch_losses: Vec<f64>,
}

/// Splits `order` into batches of `size`, folding a trailing singleton into
/// the previous batch so every batch has in-batch negatives.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let size = size.max(2);
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end += 1;
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

fn view_slots<'a>(view: &AugmentedView<usize>, history: &'a [Vec<f64>]) -> Vec<Option<&'a [f64]>> {
    view.items
        .iter()
        .map(|i| i.map(|i| history[i].as_slice()))
        .collect()
}

/// Trains `encoder` in place on per-user embedded histories. A learning rate
/// of zero leaves the weights untouched.
pub fn train_user_encoder(
    encoder: &mut UserEncoder,
    histories: &[Vec<Vec<f64>>],
    cfg: &UserTrainConfig,
) -> Result<UserTrainTrace> {
    if histories.len() < 2 {
        return Err(Error::contract(
            "contrastive training needs at least 2 users",
        ));
    }
    if cfg.lr < 0.0 {
        return Err(Error::config(format!(
            "learning rate must be non-negative, got {}",
            cfg.lr
        )));
    }
    cfg.augment.validate()?;
    let max_len = encoder.config.max_len;
    let histories: Vec<&[Vec<f64>]> = histories
        .iter()
        .map(|h| &h[h.len().saturating_sub(max_len)..])
        .collect();
    if let Some(u) = histories.iter().position(|h| h.is_empty()) {
        return Err(Error::contract(format!("user {u} has an empty history")));
    }

    let mut rng = seeded(cfg.seed);
    let mut adam = AdamState::new(&encoder.store, AdamConfig::default());
    let mut trace = UserTrainTrace::default();
    let mut order: Vec<usize> = (0..histories.len()).collect();
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for batch in batches(&order, cfg.batch_size) {
            let mut g = Graph::new();
            let mut firsts: Vec<Var> = Vec::with_capacity(batch.len());
            let mut seconds: Vec<Var> = Vec::with_capacity(batch.len());
            for &u in batch {
                let positions: Vec<usize> = (0..histories[u].len()).collect();
                let (a, b) = sample_views(&positions, &cfg.augment, &mut rng);
                firsts.push(encoder.forward(
                    &mut g,
                    &encoder.store,
                    &view_slots(&a, histories[u]),
                )?);
                seconds.push(encoder.forward(
                    &mut g,
                    &encoder.store,
                    &view_slots(&b, histories[u]),
                )?);
            }
            let first = g.concat_rows(&firsts)?;
            let second = g.concat_rows(&seconds)?;
            let loss =
                infonce_loss(&mut g, first, second, cfg.tau).map_err(|e| Error::Training {
                    stage: "user-encoder",
                    step,
                    message: e.to_string(),
                })?;
            let value = g.scalar(loss)?;
            if !value.is_finite() {
                return Err(Error::Training {
                    stage: "user-encoder",
                    step,
                    message: format!("loss is {value}"),
                });
            }
            let grads = g.backward(loss)?;
            encoder.store.zero_grad();
            encoder.store.accumulate(&grads);
            if cfg.lr > 0.0 {
                adam_step(&mut encoder.store, &mut adam, cfg.lr)?;
            }
            total += value;
            count += 1;
            step += 1;
        }
        trace.epoch_losses.push(total / count as f64);
        log::debug!("user encoder epoch loss {:.5}", total / count as f64);
    }
    Ok(trace)
}
