//! Sequence augmentation: splice the target user's history together with
//! their top-K similar users' histories into one slot-major sequence, and
//! assign position IDs under one of four schemes.
//!
//! Layout: (K+1) slots of width L, ordered [k=K, ..., k=1, k=0] so the most
//! similar neighbor (k=1) sits adjacent to the target user's own slot (k=0)
//! at the end. Each slot is independently truncated to its most recent L
//! items and left-padded with the reserved pad item 0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::SimilarUserResult;

pub const PAD_ITEM: u64 = 0;

/// One user's raw history, item IDs ordered oldest to newest.
#[derive(Debug, Clone)]
pub struct BehaviorSequence {
    pub user_id: u64,
    pub items: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScheme {
    /// User-aware: the i-th latest behavior of slot k gets ID kL+i-1.
    Utpe,
    /// All non-pad behaviors concatenated, IDs 0..n-1 counting backwards
    /// from the target user's latest behavior.
    Tpe,
    /// Every slot independently numbered L-1..0 oldest to newest.
    Stpe,
    /// All IDs 0.
    None,
}

impl fmt::Display for PositionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PositionScheme::Utpe => "utpe",
            PositionScheme::Tpe => "tpe",
            PositionScheme::Stpe => "stpe",
            PositionScheme::None => "none",
        };
        f.write_str(s)
    }
}

impl FromStr for PositionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "utpe" => Ok(PositionScheme::Utpe),
            "tpe" => Ok(PositionScheme::Tpe),
            "stpe" => Ok(PositionScheme::Stpe),
            "none" => Ok(PositionScheme::None),
            other => Err(Error::Config(format!(
                "unknown position scheme {other:?} (expected utpe, tpe, stpe, or none)"
            ))),
        }
    }
}

pub const ALL_SCHEMES: [PositionScheme; 4] = [
    PositionScheme::Utpe,
    PositionScheme::Tpe,
    PositionScheme::Stpe,
    PositionScheme::None,
];

/// The spliced sequence. All per-position vectors have length (K+1)*L and
/// share the slot-major layout described in the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSequence {
    pub l: usize,
    pub k: usize,
    pub item_ids: Vec<u64>,
    /// All zeros until [`assign_position_ids`] runs.
    pub position_ids: Vec<u64>,
    /// Source slot per position: 0 = target user, 1..=K = neighbors in
    /// descending similarity.
    pub slot_of: Vec<usize>,
    /// True iff the position holds a real item (not pad).
    pub mask: Vec<bool>,
    /// User ID per slot, indexed by slot number; None for missing neighbors.
    pub slot_users: Vec<Option<u64>>,
    /// Similarity score per slot (diagnostic); None for the target slot and
    /// missing neighbors.
    pub slot_scores: Vec<Option<f64>>,
    pub scheme: Option<PositionScheme>,
}

impl AugmentedSequence {
    pub fn total_len(&self) -> usize {
        (self.k + 1) * self.l
    }

    /// Flat index range of slot `slot` (layout puts slot K first, slot 0 last).
    pub fn slot_range(&self, slot: usize) -> std::ops::Range<usize> {
        let start = (self.k - slot) * self.l;
        start..start + self.l
    }

    /// Unmasked positions across all slots divided by unmasked positions in
    /// the target slot. NaN when the target slot is empty.
    pub fn aug_ratio(&self) -> f64 {
        let total = self.mask.iter().filter(|&&m| m).count();
        let own = self.slot_range(0).filter(|&i| self.mask[i]).count();
        total as f64 / own as f64
    }

    /// Textual dump of the slot layout for the inspect command.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for slot in (0..=self.k).rev() {
            let who = match self.slot_users[slot] {
                Some(u) if slot == 0 => format!("target user {u}"),
                Some(u) => format!("neighbor user {u}"),
                None => "missing".to_string(),
            };
            let score = match self.slot_scores[slot] {
                Some(s) => format!(" score={s:.6}"),
                None => String::new(),
            };
            out.push_str(&format!("slot k={slot} ({who}{score})\n"));
            let r = self.slot_range(slot);
            let row = |label: &str, cells: Vec<String>| {
                format!("  {label:>5} {}\n", cells.join(" "))
            };
            out.push_str(&row(
                "item",
                self.item_ids[r.clone()].iter().map(|v| format!("{v:>4}")).collect(),
            ));
            out.push_str(&row(
                "pos",
                self.position_ids[r.clone()].iter().map(|v| format!("{v:>4}")).collect(),
            ));
            out.push_str(&row(
                "mask",
                self.mask[r].iter().map(|&m| format!("{:>4}", if m { "x" } else { "." })).collect(),
            ));
        }
        out
    }
}

/// Splice the target's history with up to K neighbor histories. Neighbor
/// entries beyond K are ignored; missing neighbors leave fully padded slots.
/// Each slot keeps its most recent L items, left-padded.
pub fn build_augmented<'a, F>(
    target: &BehaviorSequence,
    neighbors: &SimilarUserResult,
    lookup: F,
    l: usize,
    k: usize,
) -> Result<AugmentedSequence>
where
    F: Fn(u64) -> Option<&'a [u64]>,
{
    if l == 0 {
        return Err(Error::Config("slot width L must be positive".into()));
    }
    let total = (k + 1) * l;
    let mut item_ids = vec![PAD_ITEM; total];
    let mut slot_of = vec![0usize; total];
    let mut mask = vec![false; total];
    let mut slot_users = vec![None; k + 1];
    let mut slot_scores = vec![None; k + 1];
    slot_users[0] = Some(target.user_id);

    let fill_slot = |slot: usize,
                         items: &[u64],
                         item_ids: &mut Vec<u64>,
                         mask: &mut Vec<bool>| {
        let start = (k - slot) * l;
        let kept = if items.len() > l {
            &items[items.len() - l..]
        } else {
            items
        };
        let pad = l - kept.len();
        for (c, &it) in kept.iter().enumerate() {
            item_ids[start + pad + c] = it;
            mask[start + pad + c] = true;
        }
    };

    fill_slot(0, &target.items, &mut item_ids, &mut mask);
    for (slot_minus_one, &(nbr_id, score)) in neighbors.entries.iter().take(k).enumerate() {
        let slot = slot_minus_one + 1;
        let items = lookup(nbr_id).ok_or_else(|| {
            Error::Internal(format!("neighbor user {nbr_id} has no stored history"))
        })?;
        slot_users[slot] = Some(nbr_id);
        slot_scores[slot] = Some(score);
        fill_slot(slot, items, &mut item_ids, &mut mask);
    }
    for slot in 0..=k {
        let start = (k - slot) * l;
        for c in 0..l {
            slot_of[start + c] = slot;
        }
    }
    Ok(AugmentedSequence {
        l,
        k,
        item_ids,
        position_ids: vec![0; total],
        slot_of,
        mask,
        slot_users,
        slot_scores,
        scheme: None,
    })
}

/// Assign position IDs under `scheme`. A pure function of the mask layout,
/// L, K, and the scheme; item identities never matter.
pub fn assign_position_ids(mut aug: AugmentedSequence, scheme: PositionScheme) -> AugmentedSequence {
    let (l, k) = (aug.l, aug.k);
    match scheme {
        PositionScheme::Utpe => {
            for slot in 0..=k {
                let start = (k - slot) * l;
                for c in 0..l {
                    aug.position_ids[start + c] = (slot * l + l - 1 - c) as u64;
                }
            }
        }
        PositionScheme::Tpe => {
            aug.position_ids.iter_mut().for_each(|p| *p = 0);
            let mut next = 0u64;
            for i in (0..aug.total_len()).rev() {
                if aug.mask[i] {
                    aug.position_ids[i] = next;
                    next += 1;
                }
            }
        }
        PositionScheme::Stpe => {
            for slot in 0..=k {
                let start = (k - slot) * l;
                for c in 0..l {
                    aug.position_ids[start + c] = (l - 1 - c) as u64;
                }
            }
        }
        PositionScheme::None => {
            aug.position_ids.iter_mut().for_each(|p| *p = 0);
        }
    }
    aug.scheme = Some(scheme);
    aug
}
