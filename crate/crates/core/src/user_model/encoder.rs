//! One-layer transformer that pools a user's embedded history into a single
//! user embedding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, USER_ENCODER_MAGIC};
use crate::error::{Error, Result};
use crate::nn::{glorot, seeded, Mlp};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ffn_hidden: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(dim: usize, max_len: usize, seed: u64) -> Self {
        EncoderConfig {
            dim,
            heads: 2,
            max_len,
            ffn_hidden: 4 * dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.max_len == 0 || self.ffn_hidden == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "head count {} must divide dimension {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    positions: ParamId,
    mask: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ffn: Mlp,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// Trainable user encoder. Weights live in `store` so callers can run the
/// optimizer and checkpoint code over them directly.
#[derive(Clone, Debug)]
pub struct UserEncoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    layout: Layout,
}

impl UserEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = seeded(config.seed);
        let mut store = ParamStore::new();
        let scaled = |rows, cols, scale: f64, rng: &mut _| {
            let mut t = glorot(rows, cols, rng);
            t.values_mut().iter_mut().for_each(|v| *v *= scale);
            t
        };
        let positions = store.add(
            "encoder.positions",
            scaled(config.max_len, d, 0.1, &mut rng),
        );
        let mask = store.add("encoder.mask", scaled(1, d, 0.1, &mut rng));
        let wq = store.add("encoder.attn.wq", glorot(d, d, &mut rng));
        let wk = store.add("encoder.attn.wk", glorot(d, d, &mut rng));
        let wv = store.add("encoder.attn.wv", glorot(d, d, &mut rng));
        let wo = store.add("encoder.attn.wo", glorot(d, d, &mut rng));
        let ln1_gain = store.add("encoder.ln1.gain", Tensor::row(vec![1.0; d]));
        let ln1_bias = store.add("encoder.ln1.bias", Tensor::zeros(vec![1, d]));
        let ffn = Mlp::new(&mut store, "encoder.ffn", d, config.ffn_hidden, d, &mut rng);
        let ln2_gain = store.add("encoder.ln2.gain", Tensor::row(vec![1.0; d]));
        let ln2_bias = store.add("encoder.ln2.bias", Tensor::zeros(vec![1, d]));
        Ok(UserEncoder {
            config,
            store,
            layout: Layout {
                positions,
                mask,
                wq,
                wk,
                wv,
                wo,
                ln1_gain,
                ln1_bias,
                ffn,
                ln2_gain,
                ln2_bias,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Stacks the history rows, substituting the mask embedding for `None`.
    fn input_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slots: &[Option<&[f64]>],
    ) -> Result<Var> {
        let d = self.config.dim;
        if slots.is_empty() {
            return Err(Error::contract("cannot encode an empty history"));
        }
        if slots.len() > self.config.max_len {
            return Err(Error::contract(format!(
                "history length {} exceeds the positional table ({})",
                slots.len(),
                self.config.max_len
            )));
        }
        let mask = g.param(store, self.layout.mask);
        let mut parts = Vec::with_capacity(slots.len());
        let mut run: Vec<f64> = Vec::new();
        let mut run_rows = 0;
        for slot in slots {
            match slot {
                Some(row) => {
                    if row.len() != d {
                        return Err(Error::dim(format!(
                            "document embedding has {} dims, expected {d}",
                            row.len()
                        )));
                    }
                    run.extend_from_slice(row);
                    run_rows += 1;
                }
                None => {
                    if run_rows > 0 {
                        parts.push(g.constant(&Tensor::matrix(
                            run_rows,
                            d,
                            std::mem::take(&mut run),
                        )?)?);
                        run_rows = 0;
                    }
                    parts.push(mask);
                }
            }
        }
        if run_rows > 0 {
            parts.push(g.constant(&Tensor::matrix(run_rows, d, run)?)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    }

    /// Builds the encoder graph for one (possibly masked) history and returns
    /// the pooled `1 x d` embedding.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slots: &[Option<&[f64]>],
    ) -> Result<Var> {
        let l = &self.layout;
        let d = self.config.dim;
        let n = slots.len();
        let e = self.input_rows(g, store, slots)?;
        let p = g.param(store, l.positions);
        let p = g.slice_rows(p, 0, n)?;
        let x = g.add(e, p)?;

        let wq = g.param(store, l.wq);
        let wk = g.param(store, l.wk);
        let wv = g.param(store, l.wv);
        let wo = g.param(store, l.wo);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let dh = d / self.config.heads;
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = g.softmax_rows(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let attn_out = g.matmul(joined, wo)?;

        let h1 = g.add(x, attn_out)?;
        let h1 = self.affine_norm(g, store, h1, l.ln1_gain, l.ln1_bias)?;
        let ff = l.ffn.forward(g, store, h1)?;
        let h2 = g.add(h1, ff)?;
        let h2 = self.affine_norm(g, store, h2, l.ln2_gain, l.ln2_bias)?;
        g.mean_rows(h2)
    }

    fn affine_norm(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        gain: ParamId,
        bias: ParamId,
    ) -> Result<Var> {
        let n = g.layer_norm_rows(x)?;
        let gain = g.param(store, gain);
        let bias = g.param(store, bias);
        let scaled = g.mul_row(n, gain)?;
        g.add_row(scaled, bias)
    }

    /// Embedding of a full (unmasked) history, most recent `max_len` rows.
    pub fn encode(&self, history: &[Vec<f64>]) -> Result<Vec<f64>> {
        let start = history.len().saturating_sub(self.config.max_len);
        let slots: Vec<Option<&[f64]>> = history[start..]
            .iter()
            .map(|r| Some(r.as_slice()))
            .collect();
        let mut g = Graph::new();
        let out = self.forward(&mut g, &self.store, &slots)?;
        Ok(g.value(out).to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_value(self.config)?;
        checkpoint::save(
            path,
            USER_ENCODER_MAGIC,
            self.config.dim,
            &meta,
            &self.store,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck = checkpoint::load(path, USER_ENCODER_MAGIC)?;
        let config: EncoderConfig =
            serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("encoder config: {e}"),
            })?;
        let mut enc = UserEncoder::new(config)?;
        enc.store
            .load_map(&ck.params)
            .map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        Ok(enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::Rng;

    fn random_history(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut cfg = EncoderConfig::new(6, 4, 0);
        cfg.heads = 4;
        assert!(UserEncoder::new(cfg).is_err());
    }

    #[test]
    fn too_long_history_is_contract_error() {
        let enc = UserEncoder::new(EncoderConfig::new(4, 3, 0)).unwrap();
        let h = random_history(4, 4, 1);
        let slots: Vec<Option<&[f64]>> = h.iter().map(|r| Some(r.as_slice())).collect();
        let mut g = Graph::new();
        assert!(matches!(
            enc.forward(&mut g, &enc.store, &slots),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn position_sensitive() {
        let enc = UserEncoder::new(EncoderConfig::new(8, 6, 3)).unwrap();
        let h = random_history(5, 8, 4);
        let mut rev = h.clone();
        rev.reverse();
        let a = enc.encode(&h).unwrap();
        let b = enc.encode(&rev).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn gradients_reach_positions_mask_and_layer() {
        let enc = UserEncoder::new(EncoderConfig::new(8, 6, 5)).unwrap();
        let h = random_history(4, 8, 6);
        let slots = vec![
            Some(h[0].as_slice()),
            None,
            Some(h[2].as_slice()),
            Some(h[3].as_slice()),
        ];
        let mut g = Graph::new();
        let out = enc.forward(&mut g, &enc.store, &slots).unwrap();
        let target = g.constant_row(&[0.3, -1.0, 0.7, 0.1, -0.4, 0.9, 0.0, -0.2]);
        let prod = g.mul(out, target).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        for name in [
            "encoder.positions",
            "encoder.mask",
            "encoder.attn.wq",
            "encoder.ffn.0.weight",
        ] {
            let id = enc.store.id_of(name).unwrap();
            let grad = grads.param(id).unwrap();
            assert!(
                grad.iter().any(|x| x.abs() > 1e-12),
                "{name} has zero gradient"
            );
        }
    }

    #[test]
    fn gradient_check() {
        let enc = UserEncoder::new(EncoderConfig::new(4, 5, 7)).unwrap();
        let h = random_history(3, 4, 8);
        let f = |g: &mut Graph, store: &ParamStore| {
            let slots = vec![Some(h[0].as_slice()), None, Some(h[2].as_slice())];
            let out = enc.forward(g, store, &slots)?;
            let sq = g.mul(out, out)?;
            g.sum(sq)
        };
        let err = finite_diff_check(f, &enc.store, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = UserEncoder::new(EncoderConfig::new(4, 5, 9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("user.ckpt");
        enc.save(&path).unwrap();
        let back = UserEncoder::load(&path).unwrap();
        assert_eq!(back.config, enc.config);
        assert_eq!(back.store.to_map(), enc.store.to_map());
    }
}
