//! Pipeline orchestration over a run directory: generate, split, pretrain,
//! build-pool, retrieve, train, evaluate, inspect, and the ablation sweeps.
//!
//! Each stage writes its outputs plus a `manifest.txt` and a resolved copy
//! of the configuration into its own subdirectory, never mutating upstream
//! artifacts. Downstream stages verify the upstream manifest (stage name and
//! seed) before reading anything. Worker threads only split embarrassingly
//! parallel work into contiguous chunks merged in order, so results are
//! identical at any thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::augment::ALL_SCHEMES;
use crate::config::RunConfig;
use crate::data::{
    derive_seed, generate_synthetic, make_samples, read_interactions_csv, split_by_user,
    tag_records, write_interactions_csv, Dataset, SampleSet, Split, SplitSummary, TrainingSample,
};
use crate::encoder::{pretrain_encoder, PretrainUser};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{
    evaluate_scores, predict_range, train, ContextInputs, EvalReport, Grouping, ModelParams,
    PreparedSet, ALL_VARIANTS,
};
use crate::pool::{
    build_pool, read_neighbors, retrieve_topk, write_neighbors, PoolCandidate, PoolQuery,
    RetrievalPool, ALL_MEASURES,
};

const STREAM_SPLIT: u64 = 1;
const STREAM_ENCODER: u64 = 2;
const STREAM_SAMPLES: u64 = 3; // +0 train, +1 val, +2 test
const STREAM_MODEL: u64 = 8;
const STREAM_TRAIN: u64 = 9;

fn samples_seed(master: u64, split: Split) -> u64 {
    derive_seed(master, STREAM_SAMPLES + split as u64)
}

/// A run's output directory and the stage subdirectories inside it.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

// ── Manifests ────────────────────────────────────────────────────────

/// Write `manifest.txt` (plain `key=value` lines) into a stage directory.
pub fn write_manifest(dir: &Path, stage: &str, seed: u64, pairs: &[(&str, String)]) -> Result<()> {
    let mut text = format!("stage={stage}\nseed={seed}\n");
    for (k, v) in pairs {
        text.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("{}: malformed manifest line {line:?}", path.display()))
        })?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

/// Verify an upstream stage ran (manifest exists, stage matches, seed
/// matches); the error names the command to run first.
fn require_stage(run: &RunDir, dir_name: &str, expected_seed: u64) -> Result<()> {
    let dir = run.stage(dir_name);
    let command = match dir_name {
        "data" => "generate",
        "split" => "split",
        "encoder" => "pretrain",
        "pool" => "build-pool",
        "retrieve" => "retrieve",
        "train" => "train",
        other => other,
    };
    let manifest = read_manifest(&dir).map_err(|_| Error::MissingArtifact {
        path: dir.clone(),
        hint: format!("suin {command}"),
    })?;
    let stage = manifest.get("stage").map(String::as_str).unwrap_or("");
    if stage != command {
        return Err(Error::Config(format!(
            "{} holds `{stage}` output, expected `{command}` — run `suin {command}` first",
            dir.display()
        )));
    }
    match manifest.get("seed").and_then(|s| s.parse::<u64>().ok()) {
        Some(s) if s == expected_seed => Ok(()),
        Some(s) => Err(Error::Config(format!(
            "{} was produced with seed {s} but this run uses seed {expected_seed}",
            dir.display()
        ))),
        None => Err(Error::Format(format!(
            "{}: manifest has no usable seed",
            dir.display()
        ))),
    }
}

fn prepare_stage_dir(run: &RunDir, name: &str, config: &RunConfig) -> Result<PathBuf> {
    let dir = run.stage(name);
    std::fs::create_dir_all(&dir)?;
    config.write_resolved(&dir)?;
    Ok(dir)
}

// ── Small artifact formats ───────────────────────────────────────────

fn write_splits(path: &Path, summary: &SplitSummary) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "user_id,split")?;
    let mut rows: Vec<(u64, Split)> = Vec::new();
    for (&u, s) in summary
        .train
        .iter()
        .map(|u| (u, Split::Train))
        .chain(summary.val.iter().map(|u| (u, Split::Val)))
        .chain(summary.test.iter().map(|u| (u, Split::Test)))
    {
        rows.push((u, s));
    }
    rows.sort_by_key(|&(u, _)| u);
    for (u, s) in rows {
        writeln!(f, "{u},{s}")?;
    }
    f.flush()?;
    Ok(())
}

fn read_splits(path: &Path) -> Result<SplitSummary> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut summary = SplitSummary {
        train: BTreeSet::new(),
        val: BTreeSet::new(),
        test: BTreeSet::new(),
    };
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (u, s) = line.split_once(',').ok_or_else(|| {
            Error::Format(format!("{}:{}: malformed split row", path.display(), i + 1))
        })?;
        let user: u64 = u.parse().map_err(|_| {
            Error::Format(format!("{}:{}: bad user id {u:?}", path.display(), i + 1))
        })?;
        let set = match s.parse::<Split>()? {
            Split::Train => &mut summary.train,
            Split::Val => &mut summary.val,
            Split::Test => &mut summary.test,
        };
        if !set.insert(user) {
            return Err(Error::Format(format!(
                "{}:{}: user {user} listed twice",
                path.display(),
                i + 1
            )));
        }
    }
    Ok(summary)
}

fn render_vec(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn parse_vec(s: &str, where_: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.parse::<f64>()
                .map_err(|_| Error::Format(format!("{where_}: bad float {x:?}")))
        })
        .collect()
}

fn write_embeddings(path: &Path, embeddings: &BTreeMap<u64, Vec<f64>>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (u, e) in embeddings {
        writeln!(f, "{u}\t{}", render_vec(e))?;
    }
    f.flush()?;
    Ok(())
}

fn read_embeddings(path: &Path) -> Result<BTreeMap<u64, Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let where_ = format!("{}:{}", path.display(), i + 1);
        let (u, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("{where_}: malformed embedding row")))?;
        let user: u64 = u
            .parse()
            .map_err(|_| Error::Format(format!("{where_}: bad user id {u:?}")))?;
        if map.insert(user, parse_vec(v, &where_)?).is_some() {
            return Err(Error::Format(format!("{where_}: user {user} listed twice")));
        }
    }
    Ok(map)
}

fn write_pool_tsv(path: &Path, candidates: &[PoolCandidate]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in candidates {
        let items: Vec<String> = c.items.iter().map(u64::to_string).collect();
        writeln!(
            f,
            "{}\t{}\t{}\t{}",
            c.user_id,
            c.split,
            render_vec(&c.embedding),
            items.join(",")
        )?;
    }
    f.flush()?;
    Ok(())
}

fn read_pool_tsv(path: &Path) -> Result<Vec<PoolCandidate>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let where_ = format!("{}:{}", path.display(), i + 1);
        let mut parts = line.split('\t');
        let (Some(u), Some(s), Some(e), Some(items)) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Format(format!("{where_}: malformed pool row")));
        };
        let user_id: u64 = u
            .parse()
            .map_err(|_| Error::Format(format!("{where_}: bad user id {u:?}")))?;
        let split: Split = s.parse()?;
        let embedding = parse_vec(e, &where_)?;
        let items: BTreeSet<u64> = items
            .split(',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<u64>()
                    .map_err(|_| Error::Format(format!("{where_}: bad item id {t:?}")))
            })
            .collect::<Result<_>>()?;
        out.push(PoolCandidate {
            user_id,
            split,
            embedding,
            items,
        });
    }
    Ok(out)
}

// ── Shared loading helpers ───────────────────────────────────────────

fn load_dataset(run: &RunDir) -> Result<(Dataset, SplitSummary)> {
    let mut records = read_interactions_csv(&run.stage("data").join("interactions.csv"))?;
    let summary = read_splits(&run.stage("split").join("splits.csv"))?;
    tag_records(&mut records, &summary)?;
    Ok((Dataset::from_records(&records)?, summary))
}

/// Canonical post-holdout history per user (non-empty ones only).
fn histories_map(dataset: &Dataset) -> BTreeMap<u64, Vec<u64>> {
    dataset
        .users
        .iter()
        .filter(|(_, d)| !d.history.is_empty())
        .map(|(&u, d)| (u, d.history.clone()))
        .collect()
}

/// Run `f` over 0..n in contiguous chunks across up to `threads` workers,
/// merging results in index order so the outcome never depends on the
/// thread count.
fn parallel_chunks<T, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if n == 0 {
        return Ok(Vec::new());
    }
    let workers = threads.max(1).min(n);
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(workers);
    let mut results: Vec<Result<Vec<T>>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(n);
            let f = &f;
            handles.push(scope.spawn(move || (lo..hi).map(f).collect::<Result<Vec<T>>>()));
        }
        for h in handles {
            results.push(h.join().expect("worker panicked"));
        }
    });
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Threaded scoring wrapper; identical output at any thread count.
pub fn predict_threaded(model: &ModelParams, set: &PreparedSet, threads: usize) -> Result<Vec<f64>> {
    let n = set.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let workers = threads.max(1).min(n);
    let chunk = n.div_ceil(workers);
    let parts = parallel_chunks(workers, workers, |w| {
        let lo = w * chunk;
        let hi = ((w + 1) * chunk).min(n);
        predict_range(model, set, lo, hi)
    })?;
    Ok(parts.concat())
}

// ── Stage commands ───────────────────────────────────────────────────

/// Synthesize the interaction corpus and ground-truth cluster file.
pub fn cmd_generate(config: &RunConfig, run: &RunDir) -> Result<Vec<(String, String)>> {
    config.validate()?;
    let dir = prepare_stage_dir(run, "data", config)?;
    let (records, clusters) = generate_synthetic(&config.synthetic_config())?;
    write_interactions_csv(&dir.join("interactions.csv"), &records)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("clusters.csv"))?);
    writeln!(f, "user_id,cluster")?;
    for (u, c) in clusters.iter().enumerate() {
        writeln!(f, "{u},{c}")?;
    }
    f.flush()?;

    let users: BTreeSet<u64> = records.iter().map(|r| r.user_id).collect();
    let items: BTreeSet<u64> = records.iter().map(|r| r.item_id).collect();
    let pairs = [
        ("records", records.len().to_string()),
        ("users", users.len().to_string()),
        ("items", items.len().to_string()),
        ("clusters", config.synthetic.clusters.to_string()),
    ];
    write_manifest(&dir, "generate", config.seed, &pairs)?;
    Ok(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

/// Partition users into train/val/test and record the assignment.
pub fn cmd_split(config: &RunConfig, run: &RunDir) -> Result<Vec<(String, String)>> {
    config.validate()?;
    require_stage(run, "data", config.seed)?;
    let dir = prepare_stage_dir(run, "split", config)?;

    let mut records = read_interactions_csv(&run.stage("data").join("interactions.csv"))?;
    let ratios = (config.split.train, config.split.val, config.split.test);
    let summary = split_by_user(&mut records, ratios, derive_seed(config.seed, STREAM_SPLIT))?;
    write_splits(&dir.join("splits.csv"), &summary)?;

    let pairs = [
        ("train_users", summary.train.len().to_string()),
        ("val_users", summary.val.len().to_string()),
        ("test_users", summary.test.len().to_string()),
    ];
    write_manifest(&dir, "split", config.seed, &pairs)?;
    Ok(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

/// Pretrain the sequence encoder on train users and emit one frozen
/// behavior embedding per user (any split) with a non-empty history.
pub fn cmd_pretrain(config: &RunConfig, run: &RunDir) -> Result<Vec<(String, String)>> {
    config.validate()?;
    require_stage(run, "data", config.seed)?;
    require_stage(run, "split", config.seed)?;
    let dir = prepare_stage_dir(run, "encoder", config)?;

    let (dataset, _) = load_dataset(run)?;
    let corpus: Vec<PretrainUser> = dataset
        .users_in(Split::Train)
        .map(|(&user_id, d)| PretrainUser {
            user_id,
            items: &d.history,
            split: d.split,
        })
        .collect();
    let enc_config = config.encoder_config(derive_seed(config.seed, STREAM_ENCODER));
    let (encoder, losses) = pretrain_encoder(&corpus, dataset.v_items, &enc_config)?;
    encoder.save(&dir.join("encoder.tnsr"))?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("pretrain_log.csv"))?);
    writeln!(f, "epoch,mean_loss")?;
    for (i, loss) in losses.iter().enumerate() {
        writeln!(f, "{},{loss:.6}", i + 1)?;
    }
    f.flush()?;

    let embeddable: Vec<(u64, &Vec<u64>)> = dataset
        .users
        .iter()
        .filter(|(_, d)| !d.history.is_empty())
        .map(|(&u, d)| (u, &d.history))
        .collect();
    let vecs = parallel_chunks(embeddable.len(), config.threads, |i| {
        let (u, h) = embeddable[i];
        encoder.encode(u, h)
    })?;
    let embeddings: BTreeMap<u64, Vec<f64>> = embeddable
        .iter()
        .map(|&(u, _)| u)
        .zip(vecs)
        .collect();
    write_embeddings(&dir.join("embeddings.tsv"), &embeddings)?;

    let pairs = [
        ("pretrain_users", corpus.len().to_string()),
        ("embedded_users", embeddings.len().to_string()),
        ("d_prime", config.encoder.d_prime.to_string()),
        ("final_loss", format!("{:.6}", losses.last().copied().unwrap_or(f64::NAN))),
    ];
    write_manifest(&dir, "pretrain", config.seed, &pairs)?;
    Ok(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

/// Assemble the similar-user pool from train-split users only.
pub fn cmd_build_pool(config: &RunConfig, run: &RunDir) -> Result<Vec<(String, String)>> {
    config.validate()?;
    require_stage(run, "encoder", config.seed)?;
    let dir = prepare_stage_dir(run, "pool", config)?;

    let (dataset, _) = load_dataset(run)?;
    let embeddings = read_embeddings(&run.stage("encoder").join("embeddings.tsv"))?;
    let mut candidates = Vec::new();
    for (&user_id, d) in dataset.users_in(Split::Train) {
        let Some(e) = embeddings.get(&user_id) else {
            continue; // single-interaction user: nothing to embed
        };
        candidates.push(PoolCandidate {
            user_id,
            split: d.split,
            embedding: e.clone(),
            items: d.history.iter().copied().collect(),
        });
    }
    build_pool(&candidates, config.encoder.d_prime)?; // validates before writing
    write_pool_tsv(&dir.join("pool.tsv"), &candidates)?;

    let pairs = [
        ("members", candidates.len().to_string()),
        ("d_prime", config.encoder.d_prime.to_string()),
    ];
    write_manifest(&dir, "build-pool", config.seed, &pairs)?;
    Ok(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

/// Retrieve top neighbors from the pool for every embedded user.
pub fn cmd_retrieve(config: &RunConfig, run: &RunDir) -> Result<Vec<(String, String)>> {
    config.validate()?;
    require_stage(run, "encoder", config.seed)?;
    require_stage(run, "pool", config.seed)?;
    let dir = prepare_stage_dir(run, "retrieve", config)?;

    let (dataset, _) = load_dataset(run)?;
    let embeddings = read_embeddings(&run.stage("encoder").join("embeddings.tsv"))?;
    let pool = build_pool(
        &read_pool_tsv(&run.stage("pool").join("pool.tsv"))?,
        config.encoder.d_prime,
    )?;

    let item_sets: BTreeMap<u64, BTreeSet<u64>> = dataset
        .users
        .iter()
        .map(|(&u, d)| (u, d.history.iter().copied().collect()))
        .collect();
    let queries: Vec<u64> = embeddings.keys().copied().collect();
    let results = parallel_chunks(queries.len(), config.threads, |i| {
        let user_id = queries[i];
        let query = PoolQuery {
            user_id,
            embedding: &embeddings[&user_id],
            items: &item_sets[&user_id],
        };
        retrieve_topk(
            &pool,
            &query,
            config.retrieval.k_retrieve,
            config.retrieval.measure,
            config.retrieval.threshold,
        )
    })?;
    let warned = results.iter().filter(|r| r.warned).count();
    let neighbors: BTreeMap<u64, Vec<(u64, f64)>> = queries
        .iter()
        .zip(results)
        .map(|(&u, r)| (u, r.entries))
        .collect();
    write_neighbors(&dir.join("neighbors.tsv"), &neighbors)?;

    let pairs = [
        ("queries", neighbors.len().to_string()),
        ("k_retrieve", config.retrieval.k_retrieve.to_string()),
        ("measure", config.retrieval.measure.to_string()),
        ("degenerate_queries", warned.to_string()),
    ];
    write_manifest(&dir, "retrieve", config.seed, &pairs)?;
    Ok(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

struct LoadedInputs {
    dataset: Dataset,
    histories: BTreeMap<u64, Vec<u64>>,
    embeddings: BTreeMap<u64, Vec<f64>>,
    neighbors: BTreeMap<u64, Vec<(u64, f64)>>,
    train_users: Vec<u64>,
}

fn load_model_inputs(config: &RunConfig, run: &RunDir) -> Result<LoadedInputs> {
    require_stage(run, "encoder", config.seed)?;
    require_stage(run, "pool", config.seed)?;
    require_stage(run, "retrieve", config.seed)?;
    let (dataset, _) = load_dataset(run)?;
    let histories = histories_map(&dataset);
    let embeddings = read_embeddings(&run.stage("encoder").join("embeddings.tsv"))?;
    let neighbors = read_neighbors(&run.stage("retrieve").join("neighbors.tsv"))?;
    let pool = read_pool_tsv(&run.stage("pool").join("pool.tsv"))?;
    let train_users: Vec<u64> = pool.iter().map(|c| c.user_id).collect();
    Ok(LoadedInputs {
        dataset,
        histories,
        embeddings,
        neighbors,
        train_users,
    })
}

fn prepared_split(
    inputs: &LoadedInputs,
    config: &RunConfig,
    split: Split,
    model_seed: u64,
) -> Result<(PreparedSet, SampleSet)> {
    let sample_set = make_samples(
        &inputs.dataset,
        split,
        config.samples.mode,
        config.samples.negatives_per_positive,
        samples_seed(config.seed, split),
    )?;
    let ctx = ContextInputs {
        histories: &inputs.histories,
        neighbors: &inputs.neighbors,
        embeddings: &inputs.embeddings,
        train_users: &inputs.train_users,
    };
    let mc = config.model_config(inputs.dataset.v_items, model_seed);
    let prepared = PreparedSet::build(&sample_set.samples, &ctx, &mc)?;
    Ok((prepared, sample_set))
}

/// Train the CTR model on train samples with validation early stopping.
pub fn cmd_train(config: &RunConfig, run: &RunDir) -> Result<Vec<(String, String)>> {
    config.validate()?;
    let inputs = load_model_inputs(config, run)?;
    let dir = prepare_stage_dir(run, "train", config)?;

    let model_seed = derive_seed(config.seed, STREAM_MODEL);
    let (train_set, train_raw) = prepared_split(&inputs, config, Split::Train, model_seed)?;
    let (val_set, _) = prepared_split(&inputs, config, Split::Val, model_seed)?;

    let mut model = ModelParams::init(config.model_config(inputs.dataset.v_items, model_seed))?;
    let tc = config.train_config(derive_seed(config.seed, STREAM_TRAIN));
    let logs = train(&mut model, &train_set, &val_set, &tc)?;
    model.save(&dir.join("model.tnsr"))?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("training_log.csv"))?);
    writeln!(f, "epoch,train_loss,val_auc,val_logloss")?;
    for l in &logs {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6}",
            l.epoch, l.train_loss, l.val_auc, l.val_logloss
        )?;
    }
    f.flush()?;

    let best = logs
        .iter()
        .map(|l| l.val_auc)
        .fold(f64::NEG_INFINITY, f64::max);
    let pairs = [
        ("variant", config.model.variant.to_string()),
        ("train_samples", train_set.len().to_string()),
        ("val_samples", val_set.len().to_string()),
        ("skipped_train_users", train_raw.skipped_users.to_string()),
        ("epochs_run", logs.len().to_string()),
        ("best_val_auc", format!("{best:.6}")),
    ];
    write_manifest(&dir, "train", config.seed, &pairs)?;
    Ok(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

/// Render an evaluation report as CSV (used for both files and stdout).
pub fn render_report(report: &EvalReport, grouping: Grouping) -> String {
    let mut out = String::from("section,key,count,auc,logloss\n");
    out.push_str(&format!(
        "overall,all,{},{:.6},{:.6}\n",
        report.total, report.auc, report.logloss
    ));
    for g in &report.groups {
        let auc = match g.auc {
            Some(a) => format!("{a:.6}"),
            None => "NA".to_string(),
        };
        out.push_str(&format!(
            "{grouping},{},{},{auc},{:.6}\n",
            g.key, g.count, g.logloss
        ));
    }
    out
}

/// Score a held-out split with the trained model and write the report.
pub fn cmd_evaluate(
    config: &RunConfig,
    run: &RunDir,
    split: Split,
    grouping: Grouping,
) -> Result<EvalReport> {
    config.validate()?;
    require_stage(run, "train", config.seed)?;
    let inputs = load_model_inputs(config, run)?;
    let dir = prepare_stage_dir(run, "eval", config)?;

    let model = ModelParams::load(&run.stage("train").join("model.tnsr"))?;
    let model_seed = derive_seed(config.seed, STREAM_MODEL);
    let (set, _) = prepared_split(&inputs, config, split, model_seed)?;
    let scores = predict_threaded(&model, &set, config.threads)?;
    let report = evaluate_scores(&set, &scores, grouping)?;

    let name = format!("report_{split}_{grouping}.csv");
    std::fs::write(dir.join(&name), render_report(&report, grouping))?;
    write_manifest(
        &dir,
        "evaluate",
        config.seed,
        &[
            ("split", split.to_string()),
            ("grouping", grouping.to_string()),
            ("samples", report.total.to_string()),
            ("auc", format!("{:.6}", report.auc)),
            ("logloss", format!("{:.6}", report.logloss)),
        ],
    )?;
    Ok(report)
}

/// Textual dump for one user: augmented-sequence layout plus the trained
/// model's attention weights over it (CSV columns position_id,slot,weight).
pub fn cmd_inspect(config: &RunConfig, run: &RunDir, user_id: u64) -> Result<String> {
    config.validate()?;
    require_stage(run, "train", config.seed)?;
    let inputs = load_model_inputs(config, run)?;
    let model = ModelParams::load(&run.stage("train").join("model.tnsr"))?;

    let data = inputs
        .dataset
        .users
        .get(&user_id)
        .ok_or_else(|| Error::Config(format!("user {user_id} not in the dataset")))?;
    let target = data
        .target
        .filter(|_| !data.history.is_empty())
        .ok_or_else(|| Error::EmptyHistory(user_id))?;
    let history: Vec<u64> = data
        .history
        .iter()
        .copied()
        .filter(|&i| i != target)
        .collect();
    if history.is_empty() {
        return Err(Error::EmptyHistory(user_id));
    }
    let sample = TrainingSample {
        user_id,
        target_item: target,
        label: 1,
        history,
    };
    let ctx = ContextInputs {
        histories: &inputs.histories,
        neighbors: &inputs.neighbors,
        embeddings: &inputs.embeddings,
        train_users: &inputs.train_users,
    };
    let model_seed = derive_seed(config.seed, STREAM_MODEL);
    let mc = config.model_config(inputs.dataset.v_items, model_seed);
    let set = PreparedSet::build(std::slice::from_ref(&sample), &ctx, &mc)?;

    let mut out = format!(
        "user {user_id} (split {}, history length {})\ntarget item {target}\n\n",
        data.split,
        sample.history.len()
    );
    out.push_str(&set.context(0).aug.render());
    out.push_str(&format!("\naug_ratio={:.2}\n", set.context(0).aug.aug_ratio()));
    match model.attention_weights(target, set.context(0)) {
        Ok(weights) => {
            out.push_str("\nposition_id,slot,weight\n");
            for (p, s, w) in weights {
                out.push_str(&format!("{p},{s},{w:.6}\n"));
            }
        }
        Err(_) => out.push_str("\n(average pooling: no attention weights)\n"),
    }
    Ok(out)
}

/// A trained run loaded for repeated scoring: the model plus the context
/// inputs every sample needs. Read-only after opening, so one session can
/// serve scores from multiple threads.
pub struct ScoringSession {
    model: ModelParams,
    dataset: Dataset,
    histories: BTreeMap<u64, Vec<u64>>,
    embeddings: BTreeMap<u64, Vec<f64>>,
    neighbors: BTreeMap<u64, Vec<(u64, f64)>>,
    train_users: Vec<u64>,
}

impl ScoringSession {
    /// Load the trained model and its supporting artifacts from a run
    /// directory that has completed the train stage.
    pub fn open(config: &RunConfig, run: &RunDir) -> Result<ScoringSession> {
        config.validate()?;
        require_stage(run, "train", config.seed)?;
        let inputs = load_model_inputs(config, run)?;
        let model = ModelParams::load(&run.stage("train").join("model.tnsr"))?;
        Ok(ScoringSession {
            model,
            dataset: inputs.dataset,
            histories: inputs.histories,
            embeddings: inputs.embeddings,
            neighbors: inputs.neighbors,
            train_users: inputs.train_users,
        })
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    /// Click probability for (user, candidate item), using the user's
    /// canonical history with the candidate filtered out.
    pub fn score(&self, user_id: u64, target_item: u64) -> Result<f64> {
        let data = self
            .dataset
            .users
            .get(&user_id)
            .ok_or_else(|| Error::Config(format!("user {user_id} not in the dataset")))?;
        let history: Vec<u64> = data
            .history
            .iter()
            .copied()
            .filter(|&i| i != target_item)
            .collect();
        if history.is_empty() {
            return Err(Error::EmptyHistory(user_id));
        }
        let sample = TrainingSample {
            user_id,
            target_item,
            label: 1, // unused for scoring
            history,
        };
        let ctx = ContextInputs {
            histories: &self.histories,
            neighbors: &self.neighbors,
            embeddings: &self.embeddings,
            train_users: &self.train_users,
        };
        let set = PreparedSet::build(std::slice::from_ref(&sample), &ctx, &self.model.config)?;
        Ok(predict_range(&self.model, &set, 0, 1)?[0])
    }
}

// ── In-memory pipeline (ablation sweeps, experiments) ────────────────

/// Everything downstream settings share for one seed: corpus, splits,
/// frozen encoder embeddings, pool, and the three sample sets.
pub struct SeedArtifacts {
    pub dataset: Dataset,
    pub histories: BTreeMap<u64, Vec<u64>>,
    pub embeddings: BTreeMap<u64, Vec<f64>>,
    pub pool: RetrievalPool,
    pub train_users: Vec<u64>,
    pub train_samples: Vec<TrainingSample>,
    pub val_samples: Vec<TrainingSample>,
    pub test_samples: Vec<TrainingSample>,
}

/// Run generate → split → pretrain → pool → samples in memory under one
/// master seed. Settings that only change retrieval or the model reuse it.
pub fn build_seed_artifacts(config: &RunConfig, master: u64) -> Result<SeedArtifacts> {
    let mut synth = config.synthetic_config();
    synth.seed = master;
    let (mut records, _) = generate_synthetic(&synth)?;
    let ratios = (config.split.train, config.split.val, config.split.test);
    split_by_user(&mut records, ratios, derive_seed(master, STREAM_SPLIT))?;
    let dataset = Dataset::from_records(&records)?;
    let histories = histories_map(&dataset);

    let corpus: Vec<PretrainUser> = dataset
        .users_in(Split::Train)
        .map(|(&user_id, d)| PretrainUser {
            user_id,
            items: &d.history,
            split: d.split,
        })
        .collect();
    let (encoder, _) = pretrain_encoder(
        &corpus,
        dataset.v_items,
        &config.encoder_config(derive_seed(master, STREAM_ENCODER)),
    )?;

    let embeddable: Vec<(u64, &Vec<u64>)> = dataset
        .users
        .iter()
        .filter(|(_, d)| !d.history.is_empty())
        .map(|(&u, d)| (u, &d.history))
        .collect();
    let vecs = parallel_chunks(embeddable.len(), config.threads, |i| {
        let (u, h) = embeddable[i];
        encoder.encode(u, h)
    })?;
    let embeddings: BTreeMap<u64, Vec<f64>> =
        embeddable.iter().map(|&(u, _)| u).zip(vecs).collect();

    let mut candidates = Vec::new();
    for (&user_id, d) in dataset.users_in(Split::Train) {
        let Some(e) = embeddings.get(&user_id) else {
            continue;
        };
        candidates.push(PoolCandidate {
            user_id,
            split: d.split,
            embedding: e.clone(),
            items: d.history.iter().copied().collect(),
        });
    }
    let pool = build_pool(&candidates, config.encoder.d_prime)?;
    let train_users = pool.user_ids.clone();

    let sample = |split: Split| -> Result<Vec<TrainingSample>> {
        Ok(make_samples(
            &dataset,
            split,
            config.samples.mode,
            config.samples.negatives_per_positive,
            samples_seed(master, split),
        )?
        .samples)
    };
    let (train_samples, val_samples, test_samples) =
        (sample(Split::Train)?, sample(Split::Val)?, sample(Split::Test)?);
    Ok(SeedArtifacts {
        dataset,
        histories,
        embeddings,
        pool,
        train_users,
        train_samples,
        val_samples,
        test_samples,
    })
}

/// Retrieve, prepare, train, and score one configured setting against the
/// shared artifacts; returns (test AUC, test logloss).
pub fn run_setting(arts: &SeedArtifacts, config: &RunConfig, master: u64) -> Result<(f64, f64)> {
    let item_sets: BTreeMap<u64, BTreeSet<u64>> = arts
        .dataset
        .users
        .iter()
        .map(|(&u, d)| (u, d.history.iter().copied().collect()))
        .collect();
    let mut neighbors: BTreeMap<u64, Vec<(u64, f64)>> = BTreeMap::new();
    for (&user_id, e) in &arts.embeddings {
        let query = PoolQuery {
            user_id,
            embedding: e,
            items: &item_sets[&user_id],
        };
        let r = retrieve_topk(
            &arts.pool,
            &query,
            config.model.k,
            config.retrieval.measure,
            config.retrieval.threshold,
        )?;
        neighbors.insert(user_id, r.entries);
    }

    let ctx = ContextInputs {
        histories: &arts.histories,
        neighbors: &neighbors,
        embeddings: &arts.embeddings,
        train_users: &arts.train_users,
    };
    let model_seed = derive_seed(master, STREAM_MODEL);
    let mc = config.model_config(arts.dataset.v_items, model_seed);
    let train_set = PreparedSet::build(&arts.train_samples, &ctx, &mc)?;
    let val_set = PreparedSet::build(&arts.val_samples, &ctx, &mc)?;
    let test_set = PreparedSet::build(&arts.test_samples, &ctx, &mc)?;

    let mut model = ModelParams::init(mc)?;
    let tc = config.train_config(derive_seed(master, STREAM_TRAIN));
    train(&mut model, &train_set, &val_set, &tc)?;

    let scores = predict_range(&model, &test_set, 0, test_set.len())?;
    let labels: Vec<u8> = test_set.labels();
    Ok((
        metrics::auc(&scores, &labels)?,
        metrics::logloss(&scores, &labels)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Variants,
    Topk,
    PositionSchemes,
    SimilarityMeasures,
    Thresholds,
}

impl std::fmt::Display for Sweep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sweep::Variants => "variants",
            Sweep::Topk => "topk",
            Sweep::PositionSchemes => "position_schemes",
            Sweep::SimilarityMeasures => "similarity_measures",
            Sweep::Thresholds => "thresholds",
        })
    }
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variants" => Ok(Sweep::Variants),
            "topk" => Ok(Sweep::Topk),
            "position_schemes" => Ok(Sweep::PositionSchemes),
            "similarity_measures" => Ok(Sweep::SimilarityMeasures),
            "thresholds" => Ok(Sweep::Thresholds),
            other => Err(Error::Config(format!(
                "unknown sweep {other:?} (expected variants, topk, position_schemes, similarity_measures, or thresholds)"
            ))),
        }
    }
}

/// The settings a sweep compares: (label, modified config). The first entry
/// is the baseline that deltas are measured against.
pub fn sweep_settings(config: &RunConfig, sweep: Sweep) -> Vec<(String, RunConfig)> {
    match sweep {
        Sweep::Variants => {
            let mut out = Vec::new();
            for v in ALL_VARIANTS {
                let mut c = config.clone();
                c.model.variant = v;
                out.push((v.to_string(), c));
            }
            out
        }
        Sweep::Topk => (0..=config.ablate.topk_max)
            .map(|k| {
                let mut c = config.clone();
                c.model.k = k;
                (k.to_string(), c)
            })
            .collect(),
        Sweep::PositionSchemes => {
            let base = config.model.position_scheme;
            let mut out = vec![(base.to_string(), config.clone())];
            for s in ALL_SCHEMES {
                if s != base {
                    let mut c = config.clone();
                    c.model.position_scheme = s;
                    out.push((s.to_string(), c));
                }
            }
            out
        }
        Sweep::SimilarityMeasures => {
            let base = config.retrieval.measure;
            let mut out = vec![(base.to_string(), config.clone())];
            for m in ALL_MEASURES {
                if m != base {
                    let mut c = config.clone();
                    c.retrieval.measure = m;
                    out.push((m.to_string(), c));
                }
            }
            out
        }
        Sweep::Thresholds => {
            let mut out = vec![("none".to_string(), {
                let mut c = config.clone();
                c.retrieval.threshold = None;
                c
            })];
            for t in [0.2, 0.4, 0.6, 0.8] {
                let mut c = config.clone();
                c.retrieval.threshold = Some(t);
                out.push((format!("{t}"), c));
            }
            out
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub setting: String,
    /// (seed, auc, logloss) per successful sub-run.
    pub per_seed: Vec<(u64, f64, f64)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub sweep: Sweep,
    pub rows: Vec<SweepRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl SweepTable {
    /// Aggregate CSV: one row per setting with mean±std and delta vs the
    /// first (baseline) row. Failed settings keep their row, metrics "NA".
    pub fn render(&self) -> String {
        let mut out =
            String::from("setting,seeds,auc_mean,auc_std,logloss_mean,logloss_std,delta_auc,status\n");
        let baseline = self.rows.first().and_then(|r| {
            if r.per_seed.is_empty() {
                None
            } else {
                Some(mean_std(&r.per_seed.iter().map(|&(_, a, _)| a).collect::<Vec<_>>()).0)
            }
        });
        for row in &self.rows {
            if let Some(err) = &row.error {
                let msg = err.replace([',', '\n'], ";");
                out.push_str(&format!("{},0,NA,NA,NA,NA,NA,failed: {msg}\n", row.setting));
                continue;
            }
            let aucs: Vec<f64> = row.per_seed.iter().map(|&(_, a, _)| a).collect();
            let lls: Vec<f64> = row.per_seed.iter().map(|&(_, _, l)| l).collect();
            let (am, asd) = mean_std(&aucs);
            let (lm, lsd) = mean_std(&lls);
            let delta = match baseline {
                Some(b) => format!("{:+.6}", am - b),
                None => "NA".to_string(),
            };
            out.push_str(&format!(
                "{},{},{am:.6},{asd:.6},{lm:.6},{lsd:.6},{delta},ok\n",
                row.setting,
                row.per_seed.len()
            ));
        }
        out
    }

    /// Per-seed CSV for sign-consistency analysis.
    pub fn render_per_seed(&self) -> String {
        let mut out = String::from("setting,seed,auc,logloss\n");
        for row in &self.rows {
            for &(seed, auc, ll) in &row.per_seed {
                out.push_str(&format!("{},{seed},{auc:.6},{ll:.6}\n", row.setting));
            }
        }
        out
    }
}

/// Run a sweep in memory: every setting × `ablate.seeds` master seeds
/// (config.seed, config.seed+1, …), all settings sharing each seed's
/// artifacts. Seeds run in parallel under `threads`.
pub fn run_sweep(config: &RunConfig, sweep: Sweep) -> Result<SweepTable> {
    config.validate()?;
    let settings = sweep_settings(config, sweep);
    let seeds: Vec<u64> = (0..config.ablate.seeds)
        .map(|i| config.seed + i as u64)
        .collect();

    // per_seed_results[seed_idx][setting_idx] = result
    let per_seed_results: Vec<Vec<std::result::Result<(f64, f64), String>>> =
        parallel_chunks(seeds.len(), config.threads, |si| {
            let master = seeds[si];
            let arts = build_seed_artifacts(config, master)?;
            Ok(settings
                .iter()
                .map(|(_, setting_config)| {
                    run_setting(&arts, setting_config, master).map_err(|e| e.to_string())
                })
                .collect())
        })?;

    let rows = settings
        .iter()
        .enumerate()
        .map(|(ci, (label, _))| {
            let mut per_seed = Vec::new();
            let mut error = None;
            for (si, seed_results) in per_seed_results.iter().enumerate() {
                match &seed_results[ci] {
                    Ok((auc, ll)) => per_seed.push((seeds[si], *auc, *ll)),
                    Err(e) if error.is_none() => error = Some(e.clone()),
                    Err(_) => {}
                }
            }
            SweepRow {
                setting: label.clone(),
                per_seed: if error.is_some() { Vec::new() } else { per_seed },
                error,
            }
        })
        .collect();
    Ok(SweepTable { sweep, rows })
}

/// File-backed ablation command: runs the sweep and writes both CSVs.
pub fn cmd_ablate(config: &RunConfig, run: &RunDir, sweep: Sweep) -> Result<SweepTable> {
    let table = run_sweep(config, sweep)?;
    let dir = prepare_stage_dir(run, "ablate", config)?;
    std::fs::write(dir.join(format!("{sweep}.csv")), table.render())?;
    std::fs::write(
        dir.join(format!("{sweep}_per_seed.csv")),
        table.render_per_seed(),
    )?;
    write_manifest(
        &dir,
        "ablate",
        config.seed,
        &[
            ("sweep", sweep.to_string()),
            ("settings", table.rows.len().to_string()),
            ("seeds", config.ablate.seeds.to_string()),
        ],
    )?;
    Ok(table)
}
