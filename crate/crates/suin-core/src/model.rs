//! End-to-end CTR model: item embedding layer, a pluggable sequence-pooling
//! stage (user-aware attention, item-only target attention, or average
//! pooling), and a ReLU MLP head trained with binary cross-entropy.
//!
//! Ablation variants reshape the same machinery: dropping the user stream,
//! feeding adapted behavior embeddings straight into the MLP, replacing
//! retrieved neighbors with random train users, disabling augmentation, or
//! zero-freezing the position tables.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    adapt, attend, item_side, position_rows, user_side, AdapterIds, AttentionIds,
};
use crate::augment::{
    assign_position_ids, build_augmented, AugmentedSequence, BehaviorSequence, PositionScheme,
};
use crate::data::{derive_seed, TrainingSample};
use crate::error::{Error, Result};
use crate::io::TensorBundle;
use crate::metrics;
use crate::optim::{Adam, ParamSet};
use crate::pool::SimilarUserResult;
use crate::tensor::{bce_from_probs, Graph, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Retrieved neighbors, user-aware attention.
    Full,
    /// Retrieved neighbors, item-only target attention.
    NoUta,
    /// NoUta plus adapted behavior embeddings as extra MLP features.
    NoUtaKeepBe,
    /// User-aware attention over uniformly sampled train-user neighbors.
    RandomUsers,
    /// No augmentation (K=0), item-only target attention.
    NoSuNoUta,
    /// Full machinery with position tables zeroed and frozen.
    NoPos,
}

pub const ALL_VARIANTS: [Variant; 6] = [
    Variant::Full,
    Variant::NoUta,
    Variant::NoUtaKeepBe,
    Variant::RandomUsers,
    Variant::NoSuNoUta,
    Variant::NoPos,
];

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::NoUta => "no_uta",
            Variant::NoUtaKeepBe => "no_uta_keep_be",
            Variant::RandomUsers => "random_users",
            Variant::NoSuNoUta => "no_su_no_uta",
            Variant::NoPos => "no_pos",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_uta" => Ok(Variant::NoUta),
            "no_uta_keep_be" => Ok(Variant::NoUtaKeepBe),
            "random_users" => Ok(Variant::RandomUsers),
            "no_su_no_uta" => Ok(Variant::NoSuNoUta),
            "no_pos" => Ok(Variant::NoPos),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected full, no_uta, no_uta_keep_be, random_users, no_su_no_uta, or no_pos)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    Suin,
    Avg,
    TargetAttention,
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PoolingMode::Suin => "suin",
            PoolingMode::Avg => "avg",
            PoolingMode::TargetAttention => "target_attention",
        };
        f.write_str(s)
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "suin" => Ok(PoolingMode::Suin),
            "avg" => Ok(PoolingMode::Avg),
            "target_attention" => Ok(PoolingMode::TargetAttention),
            other => Err(Error::Config(format!(
                "unknown pooling mode {other:?} (expected suin, avg, or target_attention)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub v_items: u64,
    /// CTR/user embedding width.
    pub d: usize,
    /// Item embedding width.
    pub d_item: usize,
    /// Behavior-embedding width produced by the sequence encoder.
    pub d_prime: usize,
    /// Slot width of the augmented sequence.
    pub l: usize,
    /// Neighbor count.
    pub k: usize,
    pub variant: Variant,
    /// Overrides the variant's pooling stage when set (e.g. `avg` for the
    /// naive-augmentation baseline).
    pub pooling: Option<PoolingMode>,
    pub position_scheme: PositionScheme,
    pub mlp_hidden: Vec<usize>,
    pub adapter_hidden: usize,
    /// Adapter-only dropout rate; inactive at evaluation.
    pub dropout: f64,
    /// Pool with each stream's projections applied to the other stream's
    /// embeddings (the aggregation formula read literally). Requires
    /// d_item == d.
    pub swap_pooling_projections: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(v_items: u64, variant: Variant) -> Self {
        ModelConfig {
            v_items,
            d: 16,
            d_item: 16,
            d_prime: 16,
            l: 20,
            k: 5,
            variant,
            pooling: None,
            position_scheme: PositionScheme::Utpe,
            mlp_hidden: vec![200, 80],
            adapter_hidden: 32,
            dropout: 0.0,
            swap_pooling_projections: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.v_items < 2 {
            return Err(Error::Config("need at least one real item besides the pad".into()));
        }
        if self.d == 0 || self.d_item == 0 || self.d_prime == 0 || self.l == 0 || self.adapter_hidden == 0 {
            return Err(Error::Config("model widths and slot width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.swap_pooling_projections {
            if self.d_item != self.d {
                return Err(Error::Config(format!(
                    "swapped pooling projections need d_item == d, got {} and {}",
                    self.d_item, self.d
                )));
            }
            if self.pooling_mode() != PoolingMode::Suin {
                return Err(Error::Config(
                    "swapped pooling projections only apply to the user-aware pooling stage".into(),
                ));
            }
        }
        if self.variant == Variant::NoSuNoUta && self.pooling == Some(PoolingMode::Suin) {
            return Err(Error::Config(
                "the augmentation-free variant has no user stream to pool with".into(),
            ));
        }
        Ok(())
    }

    /// Neighbor slots actually used: 0 when augmentation is disabled.
    pub fn effective_k(&self) -> usize {
        if self.variant == Variant::NoSuNoUta {
            0
        } else {
            self.k
        }
    }

    pub fn pooling_mode(&self) -> PoolingMode {
        if let Some(p) = self.pooling {
            return p;
        }
        match self.variant {
            Variant::Full | Variant::RandomUsers | Variant::NoPos => PoolingMode::Suin,
            Variant::NoUta | Variant::NoUtaKeepBe | Variant::NoSuNoUta => {
                PoolingMode::TargetAttention
            }
        }
    }

    pub fn keep_be(&self) -> bool {
        self.variant == Variant::NoUtaKeepBe
    }

    pub fn pooled_width(&self) -> usize {
        match self.pooling_mode() {
            PoolingMode::Suin => self.d_item + self.d,
            PoolingMode::TargetAttention | PoolingMode::Avg => self.d_item,
        }
    }

    /// MLP input: pooled vector, target item embedding, and (keep-BE only)
    /// one adapted behavior embedding per slot.
    pub fn mlp_input_width(&self) -> usize {
        let mut w = self.pooled_width() + self.d_item;
        if self.keep_be() {
            w += (self.effective_k() + 1) * self.d;
        }
        w
    }
}

/// All learnable state plus the configuration that shaped it.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl ModelParams {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let (d, di, dp) = (config.d, config.d_item, config.d_prime);
        let rows = position_rows(config.l, config.effective_k());

        let mut item_emb = Tensor::uniform(vec![config.v_items as usize, di], 0.1, &mut rng);
        for x in item_emb.data[..di].iter_mut() {
            *x = 0.0; // pad row stays neutral
        }
        params.insert("ctr.item_emb", item_emb);

        let freeze_pos = config.variant == Variant::NoPos;
        let mut p_item = Tensor::zeros(vec![rows, di]);
        let mut p_user = Tensor::zeros(vec![rows, d]);
        if freeze_pos {
            p_item = p_item.frozen();
            p_user = p_user.frozen();
        }
        params.insert("attn.p_item", p_item);
        params.insert("attn.p_user", p_user);

        for name in ["attn.w_item_q", "attn.w_item_k", "attn.w_item_v"] {
            params.insert(name, Tensor::glorot(di, di, &mut rng));
        }
        for name in ["attn.w_user_q", "attn.w_user_k", "attn.w_user_v"] {
            params.insert(name, Tensor::glorot(d, d, &mut rng));
        }

        let ah = config.adapter_hidden;
        params.insert("adapter.w1", Tensor::glorot(dp, ah, &mut rng));
        params.insert("adapter.b1", Tensor::zeros(vec![1, ah]));
        params.insert("adapter.w2", Tensor::glorot(ah, d, &mut rng));
        params.insert("adapter.b2", Tensor::zeros(vec![1, d]));

        let mut widths = vec![config.mlp_input_width()];
        widths.extend_from_slice(&config.mlp_hidden);
        widths.push(1);
        for i in 0..widths.len() - 1 {
            params.insert(&format!("head.w{i}"), Tensor::glorot(widths[i], widths[i + 1], &mut rng));
            params.insert(&format!("head.b{i}"), Tensor::zeros(vec![1, widths[i + 1]]));
        }
        Ok(ModelParams { config, params })
    }

    fn attention_ids(ids: &BTreeMap<String, TensorId>) -> AttentionIds {
        AttentionIds {
            p_item: ids["attn.p_item"],
            p_user: ids["attn.p_user"],
            w_item_q: ids["attn.w_item_q"],
            w_item_k: ids["attn.w_item_k"],
            w_item_v: ids["attn.w_item_v"],
            w_user_q: ids["attn.w_user_q"],
            w_user_k: ids["attn.w_user_k"],
            w_user_v: ids["attn.w_user_v"],
        }
    }

    fn adapter_ids(ids: &BTreeMap<String, TensorId>) -> AdapterIds {
        AdapterIds {
            w1: ids["adapter.w1"],
            b1: ids["adapter.b1"],
            w2: ids["adapter.w2"],
            b2: ids["adapter.b2"],
        }
    }

    /// Adapted behavior embedding per slot (None for missing slots).
    fn adapt_slots(
        &self,
        g: &mut Graph,
        ids: &BTreeMap<String, TensorId>,
        ctx: &SampleContext,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Option<TensorId>>> {
        let aids = Self::adapter_ids(ids);
        let mut out = Vec::with_capacity(ctx.slot_e_b.len());
        for slot in &ctx.slot_e_b {
            match slot {
                Some(e_b) => {
                    if e_b.len() != self.config.d_prime {
                        return Err(Error::Config(format!(
                            "behavior embedding width {} does not match configured d_prime {}",
                            e_b.len(),
                            self.config.d_prime
                        )));
                    }
                    let c = g.constant(e_b.clone(), vec![1, self.config.d_prime])?;
                    let dropped = rng
                        .as_deref_mut()
                        .map(|r| (r, self.config.dropout));
                    out.push(Some(adapt(g, c, &aids, dropped)?));
                }
                None => out.push(None),
            }
        }
        Ok(out)
    }

    /// Pooled sequence representation for one sample: [1, pooled_width].
    /// Also returns the attention weights when the stage has any.
    fn pool_sample(
        &self,
        g: &mut Graph,
        ids: &BTreeMap<String, TensorId>,
        target_item: u64,
        ctx: &SampleContext,
        adapted: &[Option<TensorId>],
    ) -> Result<(TensorId, Option<Vec<f64>>)> {
        let attn = Self::attention_ids(ids);
        let aug = &ctx.aug;
        match self.config.pooling_mode() {
            PoolingMode::Suin => {
                let item = item_side(g, aug, target_item, ids["ctr.item_emb"], &attn)?;
                let user = user_side(g, aug, adapted, &attn)?;
                let out = attend(
                    g,
                    &item,
                    Some(&user),
                    &aug.mask,
                    &attn,
                    self.config.swap_pooling_projections,
                )?;
                Ok((out.pooled, Some(out.weights)))
            }
            PoolingMode::TargetAttention => {
                let item = item_side(g, aug, target_item, ids["ctr.item_emb"], &attn)?;
                let out = attend(g, &item, None, &aug.mask, &attn, false)?;
                Ok((out.pooled, Some(out.weights)))
            }
            PoolingMode::Avg => {
                let rows: Vec<usize> = aug
                    .mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(|(i, _)| aug.item_ids[i] as usize)
                    .collect();
                if rows.is_empty() {
                    return Err(Error::EmptyAttention);
                }
                let e = g.gather_rows(ids["ctr.item_emb"], &rows)?;
                let m = rows.len();
                let ones = g.constant(vec![1.0 / m as f64; m], vec![1, m])?;
                Ok((g.matmul(ones, e)?, None))
            }
        }
    }

    /// One sample's MLP input row [1, mlp_input_width].
    fn sample_row(
        &self,
        g: &mut Graph,
        ids: &BTreeMap<String, TensorId>,
        target_item: u64,
        ctx: &SampleContext,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let needs_user = self.config.pooling_mode() == PoolingMode::Suin;
        let needs_adapted = needs_user || self.config.keep_be();
        let adapted = if needs_adapted {
            self.adapt_slots(g, ids, ctx, rng)?
        } else {
            vec![None; ctx.slot_e_b.len()]
        };
        let (pooled, _) = self.pool_sample(g, ids, target_item, ctx, &adapted)?;

        let e_t = g.gather_rows(ids["ctr.item_emb"], &[target_item as usize])?;
        let pw = self.config.pooled_width();
        let mut pieces = vec![g.reshape(pooled, vec![pw])?, g.reshape(e_t, vec![self.config.d_item])?];
        if self.config.keep_be() {
            for slot in &adapted {
                match slot {
                    Some(a) => pieces.push(g.reshape(*a, vec![self.config.d])?),
                    None => pieces.push(g.constant(vec![0.0; self.config.d], vec![self.config.d])?),
                }
            }
        }
        let row = g.concat(&pieces)?;
        g.reshape(row, vec![1, self.config.mlp_input_width()])
    }

    fn mlp(
        &self,
        g: &mut Graph,
        ids: &BTreeMap<String, TensorId>,
        x: TensorId,
    ) -> Result<TensorId> {
        let b = g.shape(x)[0];
        let layers = self.config.mlp_hidden.len() + 1;
        let mut h = x;
        for i in 0..layers {
            let w = ids[&format!("head.w{i}")];
            let bias = ids[&format!("head.b{i}")];
            let bias = g.expand_rows(bias, b)?;
            h = g.matmul(h, w)?;
            h = g.add(h, bias)?;
            if i + 1 < layers {
                h = g.relu(h);
            }
        }
        g.reshape(h, vec![b])
    }

    /// Predicted probabilities for a batch: builds every sample's row,
    /// stacks them, and runs the shared MLP head. `rng` enables adapter
    /// dropout (training only).
    pub fn forward_probs(
        &self,
        g: &mut Graph,
        ids: &BTreeMap<String, TensorId>,
        batch: &[(u64, &SampleContext)],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(batch.len());
        for (target, ctx) in batch {
            rows.push(self.sample_row(g, ids, *target, ctx, rng.as_deref_mut())?);
        }
        let x = g.concat(&rows)?;
        let logits = self.mlp(g, ids, x)?;
        Ok(g.sigmoid(logits))
    }

    /// Attention-weight dump for one sample: (position ID, slot, weight)
    /// per position. Errors under average pooling, which has no weights.
    pub fn attention_weights(
        &self,
        target_item: u64,
        ctx: &SampleContext,
    ) -> Result<Vec<(u64, usize, f64)>> {
        let mut g = Graph::new();
        let ids = self.params.bind(&mut g);
        let needs_user = self.config.pooling_mode() == PoolingMode::Suin;
        let adapted = if needs_user {
            self.adapt_slots(&mut g, &ids, ctx, None)?
        } else {
            vec![None; ctx.slot_e_b.len()]
        };
        let (_, weights) = self.pool_sample(&mut g, &ids, target_item, ctx, &adapted)?;
        let weights = weights.ok_or_else(|| {
            Error::Config("average pooling produces no attention weights".into())
        })?;
        Ok(ctx
            .aug
            .position_ids
            .iter()
            .zip(&ctx.aug.slot_of)
            .zip(&weights)
            .map(|((&p, &s), &w)| (p, s, w))
            .collect())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut bundle = TensorBundle::from_params(&self.params);
        let c = &self.config;
        bundle.push_u64(
            "meta.config",
            vec![12],
            vec![
                c.v_items,
                c.d as u64,
                c.d_item as u64,
                c.d_prime as u64,
                c.l as u64,
                c.k as u64,
                variant_code(c.variant),
                c.pooling.map_or(0, |p| pooling_code(p) + 1),
                scheme_code(c.position_scheme),
                c.adapter_hidden as u64,
                u64::from(c.swap_pooling_projections),
                c.seed,
            ],
        );
        bundle.push_u64(
            "meta.mlp_hidden",
            vec![c.mlp_hidden.len()],
            c.mlp_hidden.iter().map(|&w| w as u64).collect(),
        );
        bundle.push_f64("meta.dropout", vec![1], vec![c.dropout]);
        bundle.write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bundle = TensorBundle::read(path)?;
        let params = bundle.to_params()?;
        let (_, m) = bundle.u64("meta.config")?;
        if m.len() != 12 {
            return Err(Error::Format("model bundle has malformed meta.config".into()));
        }
        let (_, hidden) = bundle.u64("meta.mlp_hidden")?;
        let config = ModelConfig {
            v_items: m[0],
            d: m[1] as usize,
            d_item: m[2] as usize,
            d_prime: m[3] as usize,
            l: m[4] as usize,
            k: m[5] as usize,
            variant: variant_from_code(m[6])?,
            pooling: match m[7] {
                0 => None,
                p => Some(pooling_from_code(p - 1)?),
            },
            position_scheme: scheme_from_code(m[8])?,
            mlp_hidden: hidden.iter().map(|&w| w as usize).collect(),
            adapter_hidden: m[9] as usize,
            dropout: bundle.scalar_f64("meta.dropout")?,
            swap_pooling_projections: m[10] != 0,
            seed: m[11],
        };
        Ok(ModelParams { config, params })
    }
}

fn variant_code(v: Variant) -> u64 {
    ALL_VARIANTS.iter().position(|&x| x == v).unwrap() as u64
}

fn variant_from_code(c: u64) -> Result<Variant> {
    ALL_VARIANTS
        .get(c as usize)
        .copied()
        .ok_or_else(|| Error::Format(format!("unknown variant code {c}")))
}

fn pooling_code(p: PoolingMode) -> u64 {
    match p {
        PoolingMode::Suin => 0,
        PoolingMode::Avg => 1,
        PoolingMode::TargetAttention => 2,
    }
}

fn pooling_from_code(c: u64) -> Result<PoolingMode> {
    match c {
        0 => Ok(PoolingMode::Suin),
        1 => Ok(PoolingMode::Avg),
        2 => Ok(PoolingMode::TargetAttention),
        other => Err(Error::Format(format!("unknown pooling code {other}"))),
    }
}

fn scheme_code(s: PositionScheme) -> u64 {
    match s {
        PositionScheme::Utpe => 0,
        PositionScheme::Tpe => 1,
        PositionScheme::Stpe => 2,
        PositionScheme::None => 3,
    }
}

fn scheme_from_code(c: u64) -> Result<PositionScheme> {
    match c {
        0 => Ok(PositionScheme::Utpe),
        1 => Ok(PositionScheme::Tpe),
        2 => Ok(PositionScheme::Stpe),
        3 => Ok(PositionScheme::None),
        other => Err(Error::Format(format!("unknown position scheme code {other}"))),
    }
}

/// Everything the model needs to score one sample besides its parameters.
#[derive(Debug, Clone)]
pub struct SampleContext {
    pub aug: AugmentedSequence,
    /// Frozen behavior embedding per slot (d′ wide); None for missing slots.
    pub slot_e_b: Vec<Option<Vec<f64>>>,
    /// Unpadded history length, for sequence-length grouping.
    pub true_len: usize,
}

/// Shared corpus-level inputs for context construction.
#[derive(Debug, Clone, Copy)]
pub struct ContextInputs<'a> {
    /// Canonical post-holdout history per user (neighbor slot content).
    pub histories: &'a BTreeMap<u64, Vec<u64>>,
    /// Retrieved neighbor lists per user.
    pub neighbors: &'a BTreeMap<u64, Vec<(u64, f64)>>,
    /// Behavior embedding per user from the frozen encoder.
    pub embeddings: &'a BTreeMap<u64, Vec<f64>>,
    /// Train-split user IDs (random-neighbor candidate pool), sorted.
    pub train_users: &'a [u64],
}

#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub user_id: u64,
    pub target_item: u64,
    pub label: u8,
}

/// Samples plus deduplicated per-sample contexts, ready for batching.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub samples: Vec<PreparedSample>,
    pub contexts: Vec<SampleContext>,
    /// Context index per sample.
    pub ctx_of: Vec<usize>,
}

impl PreparedSet {
    pub fn build(
        samples: &[TrainingSample],
        inputs: &ContextInputs,
        config: &ModelConfig,
    ) -> Result<PreparedSet> {
        config.validate()?;
        let k_eff = config.effective_k();
        let mut prepared = Vec::with_capacity(samples.len());
        let mut contexts: Vec<SampleContext> = Vec::new();
        let mut ctx_of = Vec::with_capacity(samples.len());
        let mut index: BTreeMap<(u64, &[u64]), usize> = BTreeMap::new();

        for s in samples {
            if s.label > 1 {
                return Err(Error::Config(format!("label {} is not binary", s.label)));
            }
            if s.target_item == 0 || s.target_item >= config.v_items {
                return Err(Error::Config(format!(
                    "target item {} outside table of {} rows",
                    s.target_item, config.v_items
                )));
            }
            if s.history.is_empty() {
                return Err(Error::EmptyHistory(s.user_id));
            }
            if s.history.contains(&s.target_item) {
                return Err(Error::Leakage(format!(
                    "user {}: target item {} appears in its own history",
                    s.user_id, s.target_item
                )));
            }
            let key = (s.user_id, s.history.as_slice());
            let ctx_idx = match index.get(&key) {
                Some(&i) => i,
                None => {
                    let ctx = build_context(s, inputs, config, k_eff)?;
                    contexts.push(ctx);
                    index.insert(key, contexts.len() - 1);
                    contexts.len() - 1
                }
            };
            ctx_of.push(ctx_idx);
            prepared.push(PreparedSample {
                user_id: s.user_id,
                target_item: s.target_item,
                label: s.label,
            });
        }
        Ok(PreparedSet {
            samples: prepared,
            contexts,
            ctx_of,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn context(&self, sample_idx: usize) -> &SampleContext {
        &self.contexts[self.ctx_of[sample_idx]]
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

fn build_context(
    s: &TrainingSample,
    inputs: &ContextInputs,
    config: &ModelConfig,
    k_eff: usize,
) -> Result<SampleContext> {
    let neighbor_list: Vec<(u64, f64)> = if k_eff == 0 {
        Vec::new()
    } else if config.variant == Variant::RandomUsers {
        random_neighbors(s.user_id, inputs.train_users, k_eff, config.seed)
    } else {
        inputs
            .neighbors
            .get(&s.user_id)
            .map(|v| v.iter().take(k_eff).copied().collect())
            .unwrap_or_default()
    };
    let target_seq = BehaviorSequence {
        user_id: s.user_id,
        items: s.history.clone(),
    };
    let nbrs = SimilarUserResult {
        entries: neighbor_list,
        warned: false,
    };
    let aug = build_augmented(
        &target_seq,
        &nbrs,
        |uid| inputs.histories.get(&uid).map(|v| v.as_slice()),
        config.l,
        k_eff,
    )?;
    let aug = assign_position_ids(aug, config.position_scheme);

    let mut slot_e_b = Vec::with_capacity(k_eff + 1);
    for slot in &aug.slot_users {
        match slot {
            Some(uid) => {
                let e = inputs.embeddings.get(uid).ok_or_else(|| {
                    Error::Internal(format!("user {uid} has no behavior embedding"))
                })?;
                slot_e_b.push(Some(e.clone()));
            }
            None => slot_e_b.push(None),
        }
    }
    Ok(SampleContext {
        aug,
        slot_e_b,
        true_len: s.history.len(),
    })
}

/// Uniform train-user neighbors (excluding the target user), deterministic
/// per user under the model seed. Scores are zero placeholders.
fn random_neighbors(user_id: u64, train_users: &[u64], k: usize, seed: u64) -> Vec<(u64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, user_id.wrapping_add(0x5EED)));
    let mut picked: Vec<u64> = Vec::with_capacity(k);
    let candidates: Vec<u64> = train_users.iter().copied().filter(|&u| u != user_id).collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    while picked.len() < k.min(candidates.len()) {
        let c = candidates[rng.gen_range(0..candidates.len())];
        if !picked.contains(&c) {
            picked.push(c);
        }
    }
    picked.into_iter().map(|u| (u, 0.0)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 512,
            lr: 0.001,
            patience: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_logloss: f64,
    pub wall_secs: f64,
}

/// Early-stopping bookkeeping: stop after `patience` consecutive epochs
/// without a validation improvement, keeping the best epoch's snapshot.
pub(crate) struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    bad: usize,
}

impl EarlyStopper {
    pub(crate) fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: None, bad: 0 }
    }

    /// Returns (improved, stop).
    pub(crate) fn observe(&mut self, auc: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|b| auc > b);
        if improved {
            self.best = Some(auc);
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        (improved, self.bad >= self.patience)
    }
}

/// Train with Adam and early stopping; the model is left holding the
/// parameters of the best validation epoch. Returns one log row per epoch
/// actually run.
pub fn train(
    model: &mut ModelParams,
    train_set: &PreparedSet,
    val_set: &PreparedSet,
    tc: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training needs non-empty train and val sets".into()));
    }
    if tc.batch_size == 0 || tc.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let mut adam = Adam::new(tc.lr);
    let mut stopper = EarlyStopper::new(tc.patience);
    let mut best: Option<ParamSet> = None;
    let mut logs = Vec::new();

    for epoch in 1..=tc.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, 0x0E50 + epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, 0xD120 + epoch as u64));

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let mut g = Graph::new();
            let ids = model.params.bind(&mut g);
            let batch: Vec<(u64, &SampleContext)> = chunk
                .iter()
                .map(|&i| (train_set.samples[i].target_item, train_set.context(i)))
                .collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| train_set.samples[i].label).collect();
            let probs = model.forward_probs(&mut g, &ids, &batch, Some(&mut dropout_rng))?;
            let loss = bce_from_probs(&mut g, probs, &labels)?;
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    param: "loss".into(),
                    context: format!("epoch {epoch} batch {bi}"),
                });
            }
            loss_sum += lv;
            batches += 1;
            g.backward(loss)?;
            model.params.pull_grads(&g, &ids);
            adam.step(&mut model.params, &format!("epoch {epoch} batch {bi}"))?;
        }

        let val = evaluate(model, val_set, Grouping::None)?;
        logs.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_auc: val.auc,
            val_logloss: val.logloss,
            wall_secs: t0.elapsed().as_secs_f64(),
        });
        let (improved, stop) = stopper.observe(val.auc);
        if improved {
            best = Some(model.params.clone());
        }
        if stop {
            break;
        }
    }
    if let Some(p) = best {
        model.params = p;
    }
    Ok(logs)
}

/// Probabilities for every sample in the set, in order. Chunked so graphs
/// stay small; dropout off.
pub fn predict(model: &ModelParams, set: &PreparedSet) -> Result<Vec<f64>> {
    predict_range(model, set, 0, set.len())
}

/// Probabilities for samples [start, end) of the set.
pub fn predict_range(
    model: &ModelParams,
    set: &PreparedSet,
    start: usize,
    end: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(end - start);
    for chunk_start in (start..end).step_by(256) {
        let chunk_end = (chunk_start + 256).min(end);
        let mut g = Graph::new();
        let ids = model.params.bind(&mut g);
        let batch: Vec<(u64, &SampleContext)> = (chunk_start..chunk_end)
            .map(|i| (set.samples[i].target_item, set.context(i)))
            .collect();
        let probs = model.forward_probs(&mut g, &ids, &batch, None)?;
        out.extend_from_slice(g.value(probs));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    None,
    SeqLength,
    AugRatio,
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Grouping::None => "none",
            Grouping::SeqLength => "seq_length",
            Grouping::AugRatio => "aug_ratio",
        };
        f.write_str(s)
    }
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Grouping::None),
            "seq_length" => Ok(Grouping::SeqLength),
            "aug_ratio" => Ok(Grouping::AugRatio),
            other => Err(Error::Config(format!(
                "unknown grouping {other:?} (expected none, seq_length, or aug_ratio)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRow {
    pub key: String,
    pub count: usize,
    /// None when the group has only one label value.
    pub auc: Option<f64>,
    pub logloss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub logloss: f64,
    pub total: usize,
    pub groups: Vec<GroupRow>,
}

/// Score the set and compute overall AUC/logloss, optionally broken down
/// by sequence-length or augmentation-ratio buckets.
pub fn evaluate(model: &ModelParams, set: &PreparedSet, grouping: Grouping) -> Result<EvalReport> {
    evaluate_scores(set, &predict(model, set)?, grouping)
}

/// Metric computation over externally produced scores (used by the
/// threaded evaluation path; scores must align with the set's samples).
pub fn evaluate_scores(
    set: &PreparedSet,
    scores: &[f64],
    grouping: Grouping,
) -> Result<EvalReport> {
    if scores.len() != set.len() {
        return Err(Error::Dimension {
            op: "evaluate_scores",
            lhs: vec![scores.len()],
            rhs: vec![set.len()],
        });
    }
    let labels = set.labels();
    let auc = metrics::auc(scores, &labels)?;
    let logloss = metrics::logloss(scores, &labels)?;

    let mut groups = Vec::new();
    if grouping != Grouping::None {
        let mut buckets: BTreeMap<String, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
        for (i, s) in scores.iter().enumerate() {
            let ctx = set.context(i);
            let key = match grouping {
                Grouping::SeqLength => metrics::seq_length_bucket(ctx.true_len),
                Grouping::AugRatio => metrics::aug_ratio_bucket(ctx.aug.aug_ratio()),
                Grouping::None => unreachable!(),
            };
            let entry = buckets.entry(key).or_default();
            entry.0.push(*s);
            entry.1.push(labels[i]);
        }
        let mut rows: Vec<GroupRow> = buckets
            .into_iter()
            .map(|(key, (s, l))| {
                let auc = match metrics::auc(&s, &l) {
                    Ok(a) => Some(a),
                    Err(Error::AucUndefined(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok(GroupRow {
                    key,
                    count: s.len(),
                    auc,
                    logloss: metrics::logloss(&s, &l)?,
                })
            })
            .collect::<Result<_>>()?;
        rows.sort_by_key(|r| metrics::bucket_sort_key(&r.key));
        groups = rows;
    }
    Ok(EvalReport {
        auc,
        logloss,
        total: scores.len(),
        groups,
    })
}
