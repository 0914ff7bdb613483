//! Similar-user retrieval: a pool of train-split user representations and
//! top-K nearest-neighbor lookup under pluggable similarity measures.
//!
//! Candidates carry both a behavior embedding (for cosine, inner product,
//! euclidean) and an interacted-item set (for jaccard). Results sort by
//! score descending with ascending user id as the tie-break, and the top-K
//! list is a prefix of the top-(K+1) list by construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMeasure {
    Cosine,
    InnerProduct,
    Euclidean,
    Jaccard,
}

impl fmt::Display for SimilarityMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SimilarityMeasure::Cosine => "cosine",
            SimilarityMeasure::InnerProduct => "inner_product",
            SimilarityMeasure::Euclidean => "euclidean",
            SimilarityMeasure::Jaccard => "jaccard",
        };
        f.write_str(s)
    }
}

impl FromStr for SimilarityMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(SimilarityMeasure::Cosine),
            "inner_product" => Ok(SimilarityMeasure::InnerProduct),
            "euclidean" => Ok(SimilarityMeasure::Euclidean),
            "jaccard" => Ok(SimilarityMeasure::Jaccard),
            other => Err(Error::Config(format!(
                "unknown similarity measure {other:?} (expected cosine, inner_product, euclidean, or jaccard)"
            ))),
        }
    }
}

pub const ALL_MEASURES: [SimilarityMeasure; 4] = [
    SimilarityMeasure::Cosine,
    SimilarityMeasure::InnerProduct,
    SimilarityMeasure::Euclidean,
    SimilarityMeasure::Jaccard,
];

/// One user offered to the pool builder.
#[derive(Debug, Clone)]
pub struct PoolCandidate {
    pub user_id: u64,
    pub split: Split,
    pub embedding: Vec<f64>,
    pub items: BTreeSet<u64>,
}

/// Train-split user representations laid out for scanning.
#[derive(Debug, Clone)]
pub struct RetrievalPool {
    pub d_prime: usize,
    pub user_ids: Vec<u64>,
    embeddings: Vec<f64>,
    item_sets: Vec<BTreeSet<u64>>,
}

impl RetrievalPool {
    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }

    pub fn embedding(&self, idx: usize) -> &[f64] {
        &self.embeddings[idx * self.d_prime..(idx + 1) * self.d_prime]
    }

    pub fn items(&self, idx: usize) -> &BTreeSet<u64> {
        &self.item_sets[idx]
    }

    pub fn embedding_of(&self, user_id: u64) -> Option<&[f64]> {
        let idx = self.user_ids.binary_search(&user_id).ok()?;
        Some(self.embedding(idx))
    }
}

/// Build a pool from train-split candidates. Rejects any candidate tagged
/// val or test, dimension mismatches, non-finite coordinates, and duplicate
/// user ids.
pub fn build_pool(candidates: &[PoolCandidate], d_prime: usize) -> Result<RetrievalPool> {
    if d_prime == 0 {
        return Err(Error::Config("pool embedding width must be positive".into()));
    }
    let mut by_id: BTreeMap<u64, &PoolCandidate> = BTreeMap::new();
    for c in candidates {
        if c.split != Split::Train {
            return Err(Error::Leakage(format!(
                "user {} is tagged {} and cannot enter the retrieval pool",
                c.user_id, c.split
            )));
        }
        if c.embedding.len() != d_prime {
            return Err(Error::Dimension {
                op: "build_pool",
                lhs: vec![c.embedding.len()],
                rhs: vec![d_prime],
            });
        }
        if c.embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericDomain(format!(
                "user {} has a non-finite embedding coordinate",
                c.user_id
            )));
        }
        if by_id.insert(c.user_id, c).is_some() {
            return Err(Error::Config(format!(
                "duplicate user {} offered to the pool",
                c.user_id
            )));
        }
    }
    let mut user_ids = Vec::with_capacity(by_id.len());
    let mut embeddings = Vec::with_capacity(by_id.len() * d_prime);
    let mut item_sets = Vec::with_capacity(by_id.len());
    for (id, c) in by_id {
        user_ids.push(id);
        embeddings.extend_from_slice(&c.embedding);
        item_sets.push(c.items.clone());
    }
    Ok(RetrievalPool {
        d_prime,
        user_ids,
        embeddings,
        item_sets,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity(
            "cosine of a zero vector".into(),
        ));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

pub fn inner_product(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean similarity: negated distance, so larger is closer.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    -a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn jaccard(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> Result<f64> {
    let union = a.union(b).count();
    if union == 0 {
        return Err(Error::UndefinedSimilarity(
            "jaccard of two empty item sets".into(),
        ));
    }
    let inter = a.intersection(b).count();
    Ok(inter as f64 / union as f64)
}

/// The querying user's representation.
#[derive(Debug, Clone)]
pub struct PoolQuery<'a> {
    pub user_id: u64,
    pub embedding: &'a [f64],
    pub items: &'a BTreeSet<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarUserResult {
    /// (neighbor user id, similarity score), best first.
    pub entries: Vec<(u64, f64)>,
    /// True when the query was degenerate (zero embedding under cosine, or
    /// empty item set under jaccard) and retrieval returned nothing.
    pub warned: bool,
}

/// Top-k most similar pool users to the query, excluding the query user
/// itself. Scores below `threshold` (when given) are dropped. Ties break
/// toward the smaller user id.
pub fn retrieve_topk(
    pool: &RetrievalPool,
    query: &PoolQuery,
    k: usize,
    measure: SimilarityMeasure,
    threshold: Option<f64>,
) -> Result<SimilarUserResult> {
    if k == 0 {
        return Ok(SimilarUserResult {
            entries: Vec::new(),
            warned: false,
        });
    }
    if query.embedding.len() != pool.d_prime {
        return Err(Error::Dimension {
            op: "retrieve_topk",
            lhs: vec![query.embedding.len()],
            rhs: vec![pool.d_prime],
        });
    }
    let degenerate = match measure {
        SimilarityMeasure::Cosine => query.embedding.iter().all(|&x| x == 0.0),
        SimilarityMeasure::Jaccard => query.items.is_empty(),
        _ => false,
    };
    if degenerate {
        return Ok(SimilarUserResult {
            entries: Vec::new(),
            warned: true,
        });
    }
    let mut scored: Vec<(u64, f64)> = Vec::with_capacity(pool.len());
    for idx in 0..pool.len() {
        let uid = pool.user_ids[idx];
        if uid == query.user_id {
            continue;
        }
        let score = match measure {
            SimilarityMeasure::Cosine => match cosine(query.embedding, pool.embedding(idx)) {
                Ok(s) => s,
                // A zero-embedding pool entry simply never matches.
                Err(Error::UndefinedSimilarity(_)) => continue,
                Err(e) => return Err(e),
            },
            SimilarityMeasure::InnerProduct => inner_product(query.embedding, pool.embedding(idx)),
            SimilarityMeasure::Euclidean => euclidean(query.embedding, pool.embedding(idx)),
            SimilarityMeasure::Jaccard => match jaccard(query.items, pool.items(idx)) {
                Ok(s) => s,
                Err(Error::UndefinedSimilarity(_)) => continue,
                Err(e) => return Err(e),
            },
        };
        if let Some(t) = threshold {
            if score < t {
                continue;
            }
        }
        scored.push((uid, score));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(SimilarUserResult {
        entries: scored,
        warned: false,
    })
}

/// Write per-user neighbor lists as `user_id<TAB>nbr:score,...` with scores
/// printed to six decimals. Users appear in ascending id order; a user with
/// no neighbors gets an empty second column.
pub fn write_neighbors(
    path: &Path,
    neighbors: &BTreeMap<u64, Vec<(u64, f64)>>,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (uid, entries) in neighbors {
        let rendered: Vec<String> = entries
            .iter()
            .map(|(n, s)| format!("{n}:{s:.6}"))
            .collect();
        writeln!(f, "{uid}\t{}", rendered.join(","))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_neighbors(path: &Path) -> Result<BTreeMap<u64, Vec<(u64, f64)>>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = BTreeMap::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        let bad = |what: &str| {
            Error::Format(format!(
                "neighbor file {} line {}: {what}",
                path.display(),
                lineno + 1
            ))
        };
        let (uid_s, rest) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let uid: u64 = uid_s.parse().map_err(|_| bad("bad user id"))?;
        let mut entries = Vec::new();
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            let (n_s, s_s) = part
                .split_once(':')
                .ok_or_else(|| bad("entry missing ':'"))?;
            let n: u64 = n_s.parse().map_err(|_| bad("bad neighbor id"))?;
            let s: f64 = s_s.parse().map_err(|_| bad("bad score"))?;
            entries.push((n, s));
        }
        if out.insert(uid, entries).is_some() {
            return Err(bad("duplicate user id"));
        }
    }
    Ok(out)
}
