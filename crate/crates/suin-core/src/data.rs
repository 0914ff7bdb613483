//! Interaction data: synthetic corpus generation with planted user clusters,
//! CSV interchange, user-level splitting, and training-sample construction.
//!
//! ID conventions: user IDs are dense from 0; item IDs are dense from 1, with
//! item ID 0 reserved as the sequence padding symbol. An embedding table for a
//! corpus therefore has `max item ID + 1` rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which partition a user (and all their records) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user_id: u64,
    pub item_id: u64,
    pub timestamp: u64,
    pub split: Option<Split>,
}

/// Synthetic corpus shape. Users sit near one of `clusters` latent centers;
/// items carry isotropic latents; each interaction samples an item by softmax
/// over latent dot products at the configured temperature.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub users: u64,
    pub items: u64,
    pub clusters: u64,
    pub latent_dim: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Exponent of the truncated power-law over sequence lengths; larger
    /// means more short-history users.
    pub length_exponent: f64,
    /// Softmax temperature on item choice: low = sharp cluster preferences,
    /// high = near-uniform clicks.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 2000,
            items: 500,
            clusters: 4,
            latent_dim: 8,
            len_min: 2,
            len_max: 30,
            length_exponent: 1.3,
            temperature: 2.0,
            seed: 0,
        }
    }
}

const CENTER_SCALE: f64 = 4.0;
const USER_NOISE: f64 = 0.6;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.clusters == 0 {
            return Err(Error::Config("user, item, and cluster counts must be positive".into()));
        }
        if self.clusters < 2 {
            return Err(Error::Config("cluster count must be at least 2".into()));
        }
        if self.items < self.clusters {
            return Err(Error::Config(format!(
                "infeasible: {} items cannot cover {} clusters",
                self.items, self.clusters
            )));
        }
        if self.len_min < 1 {
            return Err(Error::Config("minimum sequence length must be at least 1".into()));
        }
        if self.len_max < self.len_min {
            return Err(Error::Config(format!(
                "length range [{}, {}] is empty",
                self.len_min, self.len_max
            )));
        }
        if self.latent_dim < self.clusters as usize {
            return Err(Error::Config(format!(
                "latent dim {} must be >= cluster count {} (centers are axis-aligned)",
                self.latent_dim, self.clusters
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller.
fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Mix a base seed with a stream index (splitmix64 finalizer) so per-user
/// streams are independent of iteration order.
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate a clustered implicit-feedback corpus. Returns the interaction
/// records (sorted by user, timestamp; untagged) and each user's true cluster.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Vec<InteractionRecord>, Vec<u64>)> {
    config.validate()?;
    let dim = config.latent_dim;
    let mut base_rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Item latents first, from the base stream, so they are shared state.
    let mut item_latents = vec![0.0; config.items as usize * dim];
    for v in item_latents.iter_mut() {
        *v = normal(&mut base_rng);
    }

    // Length distribution: P(len = l) ∝ l^(-exponent) on [len_min, len_max].
    let len_weights: Vec<f64> = (config.len_min..=config.len_max)
        .map(|l| (l as f64).powf(-config.length_exponent))
        .collect();
    let len_total: f64 = len_weights.iter().sum();

    let mut records = Vec::new();
    let mut clusters = Vec::with_capacity(config.users as usize);
    for user_id in 0..config.users {
        let cluster = user_id % config.clusters;
        clusters.push(cluster);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, user_id + 1));

        let mut latent = vec![0.0; dim];
        latent[cluster as usize] = CENTER_SCALE;
        for v in latent.iter_mut() {
            *v += USER_NOISE * normal(&mut rng);
        }

        let mut pick = rng.gen_range(0.0..len_total);
        let mut len = config.len_max;
        for (i, w) in len_weights.iter().enumerate() {
            if pick < *w {
                len = config.len_min + i;
                break;
            }
            pick -= w;
        }

        // Softmax over item scores at the configured temperature.
        let scores: Vec<f64> = (0..config.items as usize)
            .map(|i| {
                let dot: f64 = (0..dim).map(|j| latent[j] * item_latents[i * dim + j]).sum();
                dot / config.temperature
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();

        for t in 0..len {
            let mut pick = rng.gen_range(0.0..total);
            let mut chosen = config.items as usize - 1;
            for (i, w) in weights.iter().enumerate() {
                if pick < *w {
                    chosen = i;
                    break;
                }
                pick -= w;
            }
            records.push(InteractionRecord {
                user_id,
                item_id: chosen as u64 + 1,
                timestamp: t as u64,
                split: None,
            });
        }
    }
    Ok((records, clusters))
}

/// Partition users into train/val/test by seeded shuffle; tags records in
/// place and returns the per-split user sets.
pub fn split_by_user(
    records: &mut [InteractionRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitSummary> {
    let (r_train, r_val, r_test) = ratios;
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {r_train}+{r_val}+{r_test} do not sum to 1"
        )));
    }
    if r_train <= 0.0 || r_val < 0.0 || r_test < 0.0 {
        return Err(Error::Config("split ratios must be non-negative with train > 0".into()));
    }
    let mut users: Vec<u64> = records
        .iter()
        .map(|r| r.user_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if users.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 users to split, have {}",
            users.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    users.shuffle(&mut rng);
    let n = users.len();
    let n_train = (n as f64 * r_train).round() as usize;
    let n_val = (n as f64 * r_val).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);

    let mut assignment: BTreeMap<u64, Split> = BTreeMap::new();
    for (i, &u) in users.iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(u, split);
    }
    for r in records.iter_mut() {
        r.split = Some(assignment[&r.user_id]);
    }
    let pick = |s: Split| {
        assignment
            .iter()
            .filter(|(_, &sp)| sp == s)
            .map(|(&u, _)| u)
            .collect::<BTreeSet<u64>>()
    };
    Ok(SplitSummary {
        train: pick(Split::Train),
        val: pick(Split::Val),
        test: pick(Split::Test),
    })
}

#[derive(Debug, Clone)]
pub struct SplitSummary {
    pub train: BTreeSet<u64>,
    pub val: BTreeSet<u64>,
    pub test: BTreeSet<u64>,
}

impl SplitSummary {
    pub fn split_of(&self, user: u64) -> Option<Split> {
        if self.train.contains(&user) {
            Some(Split::Train)
        } else if self.val.contains(&user) {
            Some(Split::Val)
        } else if self.test.contains(&user) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Per-user view of a tagged corpus. `history` is the canonical post-holdout
/// sequence (everything except the final interaction); `target` is that final
/// held-out item. Encoders, pools, and retrieval queries all see `history`
/// only, so the held-out event never leaks into any embedding.
#[derive(Debug, Clone)]
pub struct UserData {
    pub split: Split,
    pub full_items: Vec<u64>,
    pub history: Vec<u64>,
    pub target: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub users: BTreeMap<u64, UserData>,
    /// Embedding-table row count: max item ID + 1 (row 0 is the pad symbol).
    pub v_items: u64,
}

impl Dataset {
    pub fn from_records(records: &[InteractionRecord]) -> Result<Dataset> {
        let mut users: BTreeMap<u64, UserData> = BTreeMap::new();
        let mut max_item = 0u64;
        let mut last: Option<(u64, u64)> = None;
        for r in records {
            if r.item_id == 0 {
                return Err(Error::Format(format!(
                    "user {}: item ID 0 is reserved for padding",
                    r.user_id
                )));
            }
            let split = r.split.ok_or_else(|| {
                Error::Config(format!("user {} has untagged records; run the split first", r.user_id))
            })?;
            if let Some((u, t)) = last {
                if u == r.user_id && r.timestamp <= t {
                    return Err(Error::Format(format!(
                        "user {u}: timestamps not strictly increasing ({t} then {})",
                        r.timestamp
                    )));
                }
                if u > r.user_id {
                    return Err(Error::Format("records not sorted by user".into()));
                }
            }
            last = Some((r.user_id, r.timestamp));
            max_item = max_item.max(r.item_id);
            let entry = users.entry(r.user_id).or_insert_with(|| UserData {
                split,
                full_items: Vec::new(),
                history: Vec::new(),
                target: None,
            });
            if entry.split != split {
                return Err(Error::Format(format!(
                    "user {} appears with two split tags",
                    r.user_id
                )));
            }
            entry.full_items.push(r.item_id);
        }
        for data in users.values_mut() {
            data.target = data.full_items.last().copied();
            data.history = data.full_items[..data.full_items.len() - 1].to_vec();
        }
        Ok(Dataset {
            users,
            v_items: max_item + 1,
        })
    }

    pub fn users_in(&self, split: Split) -> impl Iterator<Item = (&u64, &UserData)> {
        self.users.iter().filter(move |(_, d)| d.split == split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    LastItem,
    AllPositions,
}

/// One labeled CTR example. `history` is this sample's own attention input:
/// the user's pre-target interactions with every occurrence of the target
/// item removed, so the model can never read its own answer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub user_id: u64,
    pub target_item: u64,
    pub label: u8,
    pub history: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    pub samples: Vec<TrainingSample>,
    /// Users skipped for having fewer than 2 interactions (no holdout
    /// possible) or an empty history after target filtering.
    pub skipped_users: u64,
}

fn filtered_history(items: &[u64], target: u64) -> Vec<u64> {
    items.iter().copied().filter(|&i| i != target).collect()
}

fn draw_negative<R: Rng>(
    rng: &mut R,
    v_items: u64,
    positive: u64,
    history: &[u64],
) -> Option<u64> {
    let banned: BTreeSet<u64> = history.iter().copied().chain([positive]).collect();
    let item_count = v_items - 1; // real items are 1..=v_items-1
    if banned.len() as u64 >= item_count {
        return None;
    }
    for _ in 0..200 {
        let candidate = rng.gen_range(1..v_items);
        if !banned.contains(&candidate) {
            return Some(candidate);
        }
    }
    // Rejection failed (dense history); enumerate the complement.
    let free: Vec<u64> = (1..v_items).filter(|i| !banned.contains(i)).collect();
    free.get(rng.gen_range(0..free.len())).copied()
}

/// Build labeled samples for one split: each positive (held-out next item)
/// is paired with exactly `negatives_per_positive` uniformly drawn negatives
/// that are neither the positive nor anywhere in the sample's history, so the
/// positive:negative ratio is exact.
pub fn make_samples(
    dataset: &Dataset,
    split: Split,
    mode: SampleMode,
    negatives_per_positive: usize,
    seed: u64,
) -> Result<SampleSet> {
    let mut samples = Vec::new();
    let mut skipped = 0u64;
    for (&user_id, data) in dataset.users_in(split) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, user_id + 1));
        if data.full_items.len() < 2 {
            skipped += 1;
            continue;
        }
        let positions: Vec<usize> = match mode {
            SampleMode::LastItem => vec![data.full_items.len() - 1],
            SampleMode::AllPositions => (1..data.full_items.len()).collect(),
        };
        let mut user_had_sample = false;
        for pos in positions {
            let positive = data.full_items[pos];
            let history = filtered_history(&data.full_items[..pos], positive);
            if history.is_empty() {
                continue;
            }
            let mut negatives = Vec::with_capacity(negatives_per_positive);
            for _ in 0..negatives_per_positive {
                match draw_negative(&mut rng, dataset.v_items, positive, &history) {
                    Some(n) => negatives.push(n),
                    None => break,
                }
            }
            if negatives.len() != negatives_per_positive {
                continue; // keep the ratio exact: drop the positive too
            }
            samples.push(TrainingSample {
                user_id,
                target_item: positive,
                label: 1,
                history: history.clone(),
            });
            for n in negatives {
                samples.push(TrainingSample {
                    user_id,
                    target_item: n,
                    label: 0,
                    history: history.clone(),
                });
            }
            user_had_sample = true;
        }
        if !user_had_sample {
            skipped += 1;
        }
    }
    Ok(SampleSet {
        samples,
        skipped_users: skipped,
    })
}

// ── CSV interchange ──────────────────────────────────────────────────

/// Write `user_id,item_id,timestamp` rows sorted by (user, timestamp).
pub fn write_interactions_csv(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    let mut out = String::from("user_id,item_id,timestamp\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.user_id, r.item_id, r.timestamp));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_interactions_csv(path: &Path) -> Result<Vec<InteractionRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "user_id,item_id,timestamp")) => {}
        _ => {
            return Err(Error::Format(format!(
                "{}: missing `user_id,item_id,timestamp` header",
                path.display()
            )))
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |field: Option<&str>, name: &str| -> Result<u64> {
            field
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}:{}: bad {name} field", path.display(), i + 1)))
        };
        let user_id = parse(parts.next(), "user_id")?;
        let item_id = parse(parts.next(), "item_id")?;
        let timestamp = parse(parts.next(), "timestamp")?;
        if parts.next().is_some() {
            return Err(Error::Format(format!(
                "{}:{}: too many fields",
                path.display(),
                i + 1
            )));
        }
        if item_id == 0 {
            return Err(Error::Format(format!(
                "{}:{}: item ID 0 is reserved for padding",
                path.display(),
                i + 1
            )));
        }
        if let Some(prev) = records.last() {
            let prev: &InteractionRecord = prev;
            if prev.user_id > user_id || (prev.user_id == user_id && prev.timestamp >= timestamp) {
                return Err(Error::Format(format!(
                    "{}:{}: rows must be sorted by (user, timestamp), strictly increasing per user",
                    path.display(),
                    i + 1
                )));
            }
        }
        records.push(InteractionRecord {
            user_id,
            item_id,
            timestamp,
            split: None,
        });
    }
    Ok(records)
}

/// Write `user_id,split` rows.
pub fn write_splits_csv(path: &Path, summary: &SplitSummary) -> Result<()> {
    let mut rows: Vec<(u64, Split)> = summary
        .train
        .iter()
        .map(|&u| (u, Split::Train))
        .chain(summary.val.iter().map(|&u| (u, Split::Val)))
        .chain(summary.test.iter().map(|&u| (u, Split::Test)))
        .collect();
    rows.sort_unstable_by_key(|&(u, _)| u);
    let mut out = String::from("user_id,split\n");
    for (u, s) in rows {
        out.push_str(&format!("{u},{s}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_splits_csv(path: &Path) -> Result<SplitSummary> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "user_id,split")) => {}
        _ => {
            return Err(Error::Format(format!(
                "{}: missing `user_id,split` header",
                path.display()
            )))
        }
    }
    let mut summary = SplitSummary {
        train: BTreeSet::new(),
        val: BTreeSet::new(),
        test: BTreeSet::new(),
    };
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let Some((u, s)) = line.split_once(',') else {
            return Err(Error::Format(format!("{}:{}: bad row", path.display(), i + 1)));
        };
        let user: u64 = u
            .parse()
            .map_err(|_| Error::Format(format!("{}:{}: bad user_id", path.display(), i + 1)))?;
        match s.parse()? {
            Split::Train => summary.train.insert(user),
            Split::Val => summary.val.insert(user),
            Split::Test => summary.test.insert(user),
        };
    }
    Ok(summary)
}

/// Write `user_id,cluster` ground-truth rows.
pub fn write_clusters_csv(path: &Path, clusters: &[u64]) -> Result<()> {
    let mut out = String::from("user_id,cluster\n");
    for (u, c) in clusters.iter().enumerate() {
        out.push_str(&format!("{u},{c}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_clusters_csv(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "user_id,cluster")) => {}
        _ => {
            return Err(Error::Format(format!(
                "{}: missing `user_id,cluster` header",
                path.display()
            )))
        }
    }
    let mut clusters = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let Some((u, c)) = line.split_once(',') else {
            return Err(Error::Format(format!("{}:{}: bad row", path.display(), i + 1)));
        };
        let user: u64 = u
            .parse()
            .map_err(|_| Error::Format(format!("{}:{}: bad user_id", path.display(), i + 1)))?;
        if user as usize != clusters.len() {
            return Err(Error::Format(format!(
                "{}:{}: cluster rows must be dense by user ID",
                path.display(),
                i + 1
            )));
        }
        clusters.push(
            c.parse()
                .map_err(|_| Error::Format(format!("{}:{}: bad cluster", path.display(), i + 1)))?,
        );
    }
    Ok(clusters)
}

/// Apply a split summary to untagged records.
pub fn tag_records(records: &mut [InteractionRecord], summary: &SplitSummary) -> Result<()> {
    for r in records.iter_mut() {
        r.split = Some(summary.split_of(r.user_id).ok_or_else(|| {
            Error::Config(format!("user {} is missing from the split file", r.user_id))
        })?);
    }
    Ok(())
}
