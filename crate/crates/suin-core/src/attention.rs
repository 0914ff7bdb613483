//! User-aware target attention over an augmented sequence: a small adapter
//! maps frozen behavior embeddings into the CTR embedding space, item-item
//! and user-user logits are fused through one masked softmax, and the
//! weights pool target-gated values from both streams.
//!
//! Position tables initialize to zero, so an untrained model with a zeroed
//! adapter degenerates exactly to item-only target attention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::AugmentedSequence;
use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};

/// Rows required of each position table: one per assignable position ID
/// plus a spare (row 0 doubles as the target's own position encoding).
pub fn position_rows(l: usize, k: usize) -> usize {
    (k + 1) * l + 1
}

/// Graph handles for the adapter MLP (d′ → hidden → d, ReLU between).
#[derive(Debug, Clone, Copy)]
pub struct AdapterIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Graph handles for the attention parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub p_item: TensorId,
    pub p_user: TensorId,
    pub w_item_q: TensorId,
    pub w_item_k: TensorId,
    pub w_item_v: TensorId,
    pub w_user_q: TensorId,
    pub w_user_k: TensorId,
    pub w_user_v: TensorId,
}

/// Run a frozen behavior embedding `e_b` (shape [1, d′]) through the
/// trainable adapter. Dropout (train mode only) rescales survivors by
/// 1/(1-rate) so evaluation needs no correction.
pub fn adapt(
    g: &mut Graph,
    e_b: TensorId,
    ids: &AdapterIds,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<TensorId> {
    let in_dim = g.shape(e_b).to_vec();
    let w1_shape = g.shape(ids.w1).to_vec();
    if in_dim.len() != 2 || in_dim[0] != 1 || in_dim[1] != w1_shape[0] {
        return Err(Error::Config(format!(
            "behavior embedding shape {in_dim:?} does not feed an adapter expecting width {}",
            w1_shape[0]
        )));
    }
    let h = g.matmul(e_b, ids.w1)?;
    let h = g.add(h, ids.b1)?;
    let mut h = g.relu(h);
    if let Some((rng, rate)) = dropout {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate > 0.0 {
            let width = g.shape(h)[1];
            let keep = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..width)
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect();
            let m = g.constant(mask, vec![1, width])?;
            h = g.mul(h, m)?;
        }
    }
    let out = g.matmul(h, ids.w2)?;
    g.add(out, ids.b2)
}

/// One attention stream before pooling: the position-aware query row, the
/// position-aware per-position rows, and the scaled query-key logits.
#[derive(Debug, Clone, Copy)]
pub struct SidePre {
    /// [1, dim] query-side embedding (target plus position 0).
    pub e_query: TensorId,
    /// [(K+1)L, dim] per-position embeddings (content plus position).
    pub x: TensorId,
    /// [(K+1)L] scaled logits from this stream's own Q/K projections.
    pub logits: TensorId,
}

fn stream_logits(
    g: &mut Graph,
    e_query: TensorId,
    x: TensorId,
    wq: TensorId,
    wk: TensorId,
    dim: usize,
) -> Result<TensorId> {
    let n = g.shape(x)[0];
    let q = g.matmul(e_query, wq)?;
    let kmat = g.matmul(x, wk)?;
    let qt = g.transpose(q)?;
    let raw = g.matmul(kmat, qt)?;
    let scaled = g.scale(raw, 1.0 / (dim as f64).sqrt());
    g.reshape(scaled, vec![n])
}

/// Item-item stream: rows are item embedding + item position embedding,
/// the query is the target item + position 0.
pub fn item_side(
    g: &mut Graph,
    aug: &AugmentedSequence,
    target_item: u64,
    item_table: TensorId,
    ids: &AttentionIds,
) -> Result<SidePre> {
    let d_item = g.shape(item_table)[1];
    let e_t = g.gather_rows(item_table, &[target_item as usize])?;
    let p0 = g.gather_rows(ids.p_item, &[0])?;
    let e_query = g.add(e_t, p0)?;

    let item_rows: Vec<usize> = aug.item_ids.iter().map(|&i| i as usize).collect();
    let e = g.gather_rows(item_table, &item_rows)?;
    let pos_rows: Vec<usize> = aug.position_ids.iter().map(|&p| p as usize).collect();
    let p = g.gather_rows(ids.p_item, &pos_rows)?;
    let x = g.add(e, p)?;

    let logits = stream_logits(g, e_query, x, ids.w_item_q, ids.w_item_k, d_item)?;
    Ok(SidePre { e_query, x, logits })
}

/// User-user stream: every position in slot k carries that slot's adapted
/// behavior embedding plus the user position embedding; the query is the
/// target user's adapted embedding + position 0. `adapted` is indexed by
/// slot; None is only legal for fully padded slots.
pub fn user_side(
    g: &mut Graph,
    aug: &AugmentedSequence,
    adapted: &[Option<TensorId>],
    ids: &AttentionIds,
) -> Result<SidePre> {
    if adapted.len() != aug.k + 1 {
        return Err(Error::Internal(format!(
            "expected {} slot embeddings, got {}",
            aug.k + 1,
            adapted.len()
        )));
    }
    let d = g.shape(ids.p_user)[1];
    let target = adapted[0].ok_or_else(|| {
        Error::Internal("target slot has no adapted behavior embedding".into())
    })?;
    let p0 = g.gather_rows(ids.p_user, &[0])?;
    let e_query = g.add(target, p0)?;

    let mut parts = Vec::with_capacity(aug.k + 1);
    for slot in (0..=aug.k).rev() {
        match adapted[slot] {
            Some(a) => parts.push(g.expand_rows(a, aug.l)?),
            None => {
                if aug.slot_range(slot).any(|i| aug.mask[i]) {
                    return Err(Error::Internal(format!(
                        "slot {slot} has unmasked positions but no behavior embedding"
                    )));
                }
                parts.push(g.constant(vec![0.0; aug.l * d], vec![aug.l, d])?);
            }
        }
    }
    let rows = g.concat(&parts)?;
    let pos_rows: Vec<usize> = aug.position_ids.iter().map(|&p| p as usize).collect();
    let p = g.gather_rows(ids.p_user, &pos_rows)?;
    let x = g.add(rows, p)?;

    let logits = stream_logits(g, e_query, x, ids.w_user_q, ids.w_user_k, d)?;
    Ok(SidePre { e_query, x, logits })
}

#[derive(Debug, Clone)]
pub struct AttendOutput {
    /// [1, width] pooled vector: item half then user half when both streams
    /// are present, item half alone otherwise.
    pub pooled: TensorId,
    /// Diagnostic copy of the attention weights, one per position.
    pub weights: Vec<f64>,
}

fn gated_pool(
    g: &mut Graph,
    alpha_row: TensorId,
    e_query: TensorId,
    x: TensorId,
    wq: TensorId,
    wv: TensorId,
) -> Result<TensorId> {
    let q = g.matmul(e_query, wq)?;
    let v = g.matmul(x, wv)?;
    let agg = g.matmul(alpha_row, v)?;
    let gated = g.mul(q, agg)?;
    let w = g.shape(gated)[1];
    g.reshape(gated, vec![w])
}

/// Fuse both streams' logits through one masked softmax and pool the
/// target-gated values. `swap_projections` applies each stream's query and
/// value projections to the other stream's embeddings (legal only when the
/// two widths agree); logits are unaffected.
pub fn attend(
    g: &mut Graph,
    item: &SidePre,
    user: Option<&SidePre>,
    mask: &[bool],
    ids: &AttentionIds,
    swap_projections: bool,
) -> Result<AttendOutput> {
    let n = g.shape(item.logits)[0];
    if mask.len() != n {
        return Err(Error::Dimension {
            op: "attend",
            lhs: vec![n],
            rhs: vec![mask.len()],
        });
    }
    let fused = match user {
        Some(u) => g.add(item.logits, u.logits)?,
        None => item.logits,
    };
    let alpha = g.softmax_masked(fused, mask)?;
    let weights = g.value(alpha).to_vec();
    let alpha_row = g.reshape(alpha, vec![1, n])?;

    let pooled = match user {
        None => {
            if swap_projections {
                return Err(Error::Config(
                    "swapped pooling projections require the user stream".into(),
                ));
            }
            gated_pool(g, alpha_row, item.e_query, item.x, ids.w_item_q, ids.w_item_v)?
        }
        Some(u) => {
            let (wq_i, wv_i, wq_u, wv_u) = if swap_projections {
                let (di, du) = (g.shape(item.x)[1], g.shape(u.x)[1]);
                if di != du {
                    return Err(Error::Config(format!(
                        "swapped pooling projections need equal widths, got {di} and {du}"
                    )));
                }
                (ids.w_user_q, ids.w_user_v, ids.w_item_q, ids.w_item_v)
            } else {
                (ids.w_item_q, ids.w_item_v, ids.w_user_q, ids.w_user_v)
            };
            let item_half = gated_pool(g, alpha_row, item.e_query, item.x, wq_i, wv_i)?;
            let user_half = gated_pool(g, alpha_row, u.e_query, u.x, wq_u, wv_u)?;
            g.concat(&[item_half, user_half])?
        }
    };
    let width = g.shape(pooled).iter().product();
    let pooled = g.reshape(pooled, vec![1, width])?;
    Ok(AttendOutput { pooled, weights })
}
