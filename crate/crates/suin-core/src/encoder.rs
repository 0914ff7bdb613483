//! Self-attention sequence encoder: maps a behavior history to a fixed
//! d′-dimensional behavior embedding (the final-position hidden state), and
//! a next-item pretraining loop over train-split users.
//!
//! One residual attention block per `blocks`: causal single-head attention
//! followed by ReLU feed-forward, both with additive skip connections. There
//! is no normalization layer, so zero-initialized projections reduce a block
//! to the identity.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::io::TensorBundle;
use crate::optim::{Adam, ParamSet};
use crate::tensor::{bce_from_probs, Graph, Tensor, TensorId};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Behavior-embedding width d′.
    pub d_prime: usize,
    /// Maximum history length fed to the encoder; longer histories keep
    /// their most recent items.
    pub max_len: usize,
    pub blocks: usize,
    pub heads: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_prime: 16,
            max_len: 20,
            blocks: 1,
            heads: 1,
            epochs: 3,
            lr: 0.001,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_prime == 0 || self.max_len == 0 || self.blocks == 0 {
            return Err(Error::Config("encoder dims, max_len, and blocks must be positive".into()));
        }
        if self.heads != 1 {
            return Err(Error::Config("encoder supports a single attention head".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub v_items: u64,
    pub params: ParamSet,
    pub frozen: bool,
}

/// One train-split user's history offered to pretraining.
#[derive(Debug, Clone)]
pub struct PretrainUser<'a> {
    pub user_id: u64,
    pub items: &'a [u64],
    pub split: Split,
}

impl EncoderParams {
    pub fn init(v_items: u64, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_prime;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut item_emb = Tensor::uniform(vec![v_items as usize, d], 0.1, &mut rng);
        for x in item_emb.data[..d].iter_mut() {
            *x = 0.0; // pad row stays neutral
        }
        params.insert("enc.item_emb", item_emb);
        params.insert(
            "enc.pos_emb",
            Tensor::uniform(vec![config.max_len, d], 0.1, &mut rng),
        );
        for b in 0..config.blocks {
            for proj in ["wq", "wk", "wv"] {
                params.insert(&format!("enc.b{b}.{proj}"), Tensor::glorot(d, d, &mut rng));
            }
            params.insert(&format!("enc.b{b}.ffn_w1"), Tensor::glorot(d, d, &mut rng));
            params.insert(&format!("enc.b{b}.ffn_b1"), Tensor::zeros(vec![d]));
            params.insert(&format!("enc.b{b}.ffn_w2"), Tensor::glorot(d, d, &mut rng));
            params.insert(&format!("enc.b{b}.ffn_b2"), Tensor::zeros(vec![d]));
        }
        Ok(EncoderParams {
            config,
            v_items,
            params,
            frozen: false,
        })
    }

    /// Hidden states for every position of `items` (truncated to the most
    /// recent `max_len`): returns the [n, d′] matrix after all blocks.
    fn forward_hidden(
        &self,
        g: &mut Graph,
        ids: &BTreeMap<String, TensorId>,
        items: &[u64],
    ) -> Result<TensorId> {
        let window = if items.len() > self.config.max_len {
            &items[items.len() - self.config.max_len..]
        } else {
            items
        };
        let n = window.len();
        let d = self.config.d_prime;
        let item_rows: Vec<usize> = window.iter().map(|&i| i as usize).collect();
        let e = g.gather_rows(ids["enc.item_emb"], &item_rows)?;
        let pos_rows: Vec<usize> = (0..n).collect();
        let p = g.gather_rows(ids["enc.pos_emb"], &pos_rows)?;
        let mut x = g.add(e, p)?;

        for b in 0..self.config.blocks {
            let q = g.matmul(x, ids[&format!("enc.b{b}.wq")])?;
            let k = g.matmul(x, ids[&format!("enc.b{b}.wk")])?;
            let v = g.matmul(x, ids[&format!("enc.b{b}.wv")])?;
            let kt = g.transpose(k)?;
            let logits = g.matmul(q, kt)?;
            let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
            let mut ctx_rows = Vec::with_capacity(n);
            for t in 0..n {
                let row = g.gather_rows(logits, &[t])?;
                let row = g.reshape(row, vec![n])?;
                let mask: Vec<bool> = (0..n).map(|j| j <= t).collect();
                let alpha = g.softmax_masked(row, &mask)?;
                let alpha = g.reshape(alpha, vec![1, n])?;
                ctx_rows.push(g.matmul(alpha, v)?);
            }
            let ctx = g.concat(&ctx_rows)?;
            let h = g.add(x, ctx)?;

            let b1 = g.expand_rows(ids[&format!("enc.b{b}.ffn_b1")], n)?;
            let f1 = g.matmul(h, ids[&format!("enc.b{b}.ffn_w1")])?;
            let f1 = g.add(f1, b1)?;
            let f1 = g.relu(f1);
            let b2 = g.expand_rows(ids[&format!("enc.b{b}.ffn_b2")], n)?;
            let f2 = g.matmul(f1, ids[&format!("enc.b{b}.ffn_w2")])?;
            let f2 = g.add(f2, b2)?;
            x = g.add(h, f2)?;
        }
        Ok(x)
    }

    /// Behavior embedding: the final-position hidden state.
    pub fn encode(&self, user_id: u64, items: &[u64]) -> Result<Vec<f64>> {
        let states = self.encode_positions(user_id, items)?;
        Ok(states.into_iter().next_back().unwrap())
    }

    /// Per-position hidden states (exposed for causality checks).
    pub fn encode_positions(&self, user_id: u64, items: &[u64]) -> Result<Vec<Vec<f64>>> {
        if items.is_empty() {
            return Err(Error::EmptyHistory(user_id));
        }
        let mut g = Graph::new();
        let ids = self.params.bind(&mut g);
        let h = self.forward_hidden(&mut g, &ids, items)?;
        let d = self.config.d_prime;
        let values = g.value(h);
        Ok(values.chunks(d).map(<[f64]>::to_vec).collect())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut bundle = TensorBundle::from_params(&self.params);
        bundle.push_u64("meta.v_items", vec![1], vec![self.v_items]);
        bundle.push_u64(
            "meta.config",
            vec![6],
            vec![
                self.config.d_prime as u64,
                self.config.max_len as u64,
                self.config.blocks as u64,
                self.config.heads as u64,
                self.config.epochs as u64,
                self.config.seed,
            ],
        );
        bundle.push_f64("meta.lr", vec![1], vec![self.config.lr]);
        bundle.push_u64("meta.frozen", vec![1], vec![u64::from(self.frozen)]);
        bundle.write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bundle = TensorBundle::read(path)?;
        let params = bundle.to_params()?;
        let (_, c) = bundle.u64("meta.config")?;
        if c.len() != 6 {
            return Err(Error::Format("encoder bundle has malformed meta.config".into()));
        }
        let config = EncoderConfig {
            d_prime: c[0] as usize,
            max_len: c[1] as usize,
            blocks: c[2] as usize,
            heads: c[3] as usize,
            epochs: c[4] as usize,
            lr: bundle.scalar_f64("meta.lr")?,
            seed: c[5],
        };
        Ok(EncoderParams {
            config,
            v_items: bundle.scalar_u64("meta.v_items")?,
            params,
            frozen: bundle.scalar_u64("meta.frozen")? != 0,
        })
    }
}

/// Pretrain with next-item BCE: each position scores its true successor
/// against one uniform negative. Only train-split users are admitted.
/// Returns the trained (frozen) encoder and the per-epoch mean loss.
pub fn pretrain_encoder(
    users: &[PretrainUser],
    v_items: u64,
    config: &EncoderConfig,
) -> Result<(EncoderParams, Vec<f64>)> {
    config.validate()?;
    if let Some(bad) = users.iter().find(|u| u.split != Split::Train) {
        return Err(Error::Leakage(format!(
            "user {} is tagged {} and cannot enter encoder pretraining",
            bad.user_id, bad.split
        )));
    }
    let usable: Vec<&PretrainUser> = users.iter().filter(|u| u.items.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Config("encoder pretraining corpus has no user with 2+ interactions".into()));
    }
    let mut encoder = EncoderParams::init(v_items, config.clone())?;
    let mut adam = Adam::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &ui in &order {
            let user = usable[ui];
            let window = if user.items.len() > config.max_len + 1 {
                &user.items[user.items.len() - config.max_len - 1..]
            } else {
                user.items
            };
            let inputs = &window[..window.len() - 1];
            let targets = &window[1..];

            let mut g = Graph::new();
            let ids = encoder.params.bind(&mut g);
            let h = encoder.forward_hidden(&mut g, &ids, inputs)?;

            let target_rows: Vec<usize> = targets.iter().map(|&i| i as usize).collect();
            let mut neg_rows = Vec::with_capacity(targets.len());
            for &t in targets {
                let neg = loop {
                    let cand = rng.gen_range(1..v_items);
                    if cand != t {
                        break cand;
                    }
                };
                neg_rows.push(neg as usize);
            }
            let pos_emb = g.gather_rows(ids["enc.item_emb"], &target_rows)?;
            let neg_emb = g.gather_rows(ids["enc.item_emb"], &neg_rows)?;

            let d = config.d_prime;
            let ones = g.constant(vec![1.0; d], vec![d, 1])?;
            let pos_prod = g.mul(h, pos_emb)?;
            let pos_scores = g.matmul(pos_prod, ones)?;
            let neg_prod = g.mul(h, neg_emb)?;
            let neg_scores = g.matmul(neg_prod, ones)?;

            let n = inputs.len();
            let scores = g.concat(&[pos_scores, neg_scores])?;
            let scores = g.reshape(scores, vec![2 * n])?;
            let probs = g.sigmoid(scores);
            let labels: Vec<u8> = std::iter::repeat_n(1u8, n)
                .chain(std::iter::repeat_n(0u8, n))
                .collect();
            let loss = bce_from_probs(&mut g, probs, &labels)?;
            loss_sum += g.scalar_value(loss);

            g.backward(loss)?;
            encoder.params.pull_grads(&g, &ids);
            adam.step(
                &mut encoder.params,
                &format!("pretrain epoch {epoch} user {}", user.user_id),
            )?;
        }
        epoch_losses.push(loss_sum / usable.len() as f64);
    }
    encoder.frozen = true;
    Ok((encoder, epoch_losses))
}
