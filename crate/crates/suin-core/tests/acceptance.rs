//! Acceptance checks for the pipeline's core guarantees.
//!
//! Every numeric claim is verified against an independent oracle: central
//! finite differences for gradients, brute-force scans for retrieval,
//! O(n^2) pair counting for AUC, closed forms for losses, and byte
//! comparisons for determinism. Each check prints one `[PASS]` line with
//! its measurements (visible under `--nocapture`).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use suin_core::augment::{assign_position_ids, build_augmented, BehaviorSequence, PositionScheme};
use suin_core::config::RunConfig;
use suin_core::data::{Split, TrainingSample};
use suin_core::gradcheck::{max_rel_error, numerical_grad};
use suin_core::metrics;
use suin_core::model::{
    predict, ContextInputs, Grouping, ModelConfig, ModelParams, PoolingMode, PreparedSet,
    SampleContext, Variant,
};
use suin_core::pipeline::{
    build_seed_artifacts, cmd_build_pool, cmd_evaluate, cmd_generate, cmd_pretrain, cmd_retrieve,
    cmd_split, cmd_train, run_setting, run_sweep, RunDir, Sweep,
};
use suin_core::pool::{
    self, build_pool, read_neighbors, retrieve_topk, PoolCandidate, PoolQuery,
    SimilarUserResult, SimilarityMeasure, ALL_MEASURES,
};
use suin_core::tensor::{bce_from_probs, Graph, TensorId};

fn pass(name: &str, detail: String) {
    println!("[PASS] {name}: {detail}");
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ── 1. Gradients vs central finite differences ───────────────────────

struct OpCase {
    name: &'static str,
    inputs: Vec<(Vec<f64>, Vec<usize>)>,
    build: Box<dyn Fn(&mut Graph, &[TensorId]) -> TensorId>,
}

fn weighted_sum(g: &mut Graph, x: TensorId, w: &[f64], shape: &[usize]) -> TensorId {
    let c = g.constant(w.to_vec(), shape.to_vec()).unwrap();
    let prod = g.mul(x, c).unwrap();
    g.reduce_sum(prod)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values with |x| in [0.1, 1.0], keeping finite differences away from the
/// relu kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Values at least 0.1 away from the clamp boundaries at +-0.5.
fn away_from_clamp_bounds(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                rng.gen_range(-0.4..0.4)
            } else if rng.gen_bool(0.5) {
                rng.gen_range(0.6..1.4)
            } else {
                rng.gen_range(-1.4..-0.6)
            }
        })
        .collect()
}

fn unary_case(
    name: &'static str,
    x: Vec<f64>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    w: Vec<f64>,
    op: impl Fn(&mut Graph, TensorId) -> TensorId + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs: vec![(x, in_shape)],
        build: Box::new(move |g, t| {
            let y = op(g, t[0]);
            weighted_sum(g, y, &w, &out_shape)
        }),
    }
}

fn binary_case(
    name: &'static str,
    a: Vec<f64>,
    b: Vec<f64>,
    shape: Vec<usize>,
    w: Vec<f64>,
    op: impl Fn(&mut Graph, TensorId, TensorId) -> TensorId + 'static,
) -> OpCase {
    let s = shape.clone();
    OpCase {
        name,
        inputs: vec![(a, shape.clone()), (b, shape)],
        build: Box::new(move |g, t| {
            let y = op(g, t[0], t[1]);
            weighted_sum(g, y, &w, &s)
        }),
    }
}

/// Analytic gradients of one op composition vs central finite differences,
/// over every entry of every input. Returns (entries checked, worst
/// relative error).
fn check_op(case: &OpCase) -> (usize, f64) {
    let mut g = Graph::new();
    let ids: Vec<TensorId> = case
        .inputs
        .iter()
        .map(|(d, s)| g.leaf(d.clone(), s.clone()).unwrap())
        .collect();
    let root = (case.build)(&mut g, &ids);
    g.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .unwrap_or_else(|| panic!("{}: input has no gradient", case.name))
                .to_vec()
        })
        .collect();

    let mut checked = 0;
    let mut worst = 0.0f64;
    for i in 0..case.inputs.len() {
        let f = |x: &[f64]| {
            let mut g = Graph::new();
            let ids: Vec<TensorId> = case
                .inputs
                .iter()
                .enumerate()
                .map(|(j, (d, s))| {
                    let data = if j == i { x.to_vec() } else { d.clone() };
                    g.leaf(data, s.clone()).unwrap()
                })
                .collect();
            let root = (case.build)(&mut g, &ids);
            g.scalar_value(root)
        };
        let numeric = numerical_grad(f, &case.inputs[i].0, 1e-5);
        worst = worst.max(max_rel_error(&analytic[i], &numeric));
        checked += numeric.len();
    }
    (checked, worst)
}

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases = Vec::new();

    {
        let a = uniform(&mut rng, 12, -1.0, 1.0);
        let b = uniform(&mut rng, 8, -1.0, 1.0);
        let w = uniform(&mut rng, 6, 0.5, 1.5);
        cases.push(OpCase {
            name: "matmul",
            inputs: vec![(a, vec![3, 4]), (b, vec![4, 2])],
            build: Box::new(move |g, t| {
                let y = g.matmul(t[0], t[1]).unwrap();
                weighted_sum(g, y, &w, &[3, 2])
            }),
        });
    }

    let (a, b, w) = (
        uniform(&mut rng, 6, -1.0, 1.0),
        uniform(&mut rng, 6, -1.0, 1.0),
        uniform(&mut rng, 6, 0.5, 1.5),
    );
    cases.push(binary_case("add", a, b, vec![2, 3], w, |g, a, b| {
        g.add(a, b).unwrap()
    }));
    let (a, b, w) = (
        uniform(&mut rng, 6, -1.0, 1.0),
        uniform(&mut rng, 6, -1.0, 1.0),
        uniform(&mut rng, 6, 0.5, 1.5),
    );
    cases.push(binary_case("sub", a, b, vec![2, 3], w, |g, a, b| {
        g.sub(a, b).unwrap()
    }));
    let (a, b, w) = (
        uniform(&mut rng, 6, -1.0, 1.0),
        uniform(&mut rng, 6, -1.0, 1.0),
        uniform(&mut rng, 6, 0.5, 1.5),
    );
    cases.push(binary_case("mul", a, b, vec![2, 3], w, |g, a, b| {
        g.mul(a, b).unwrap()
    }));

    let x = away_from_zero(&mut rng, 6);
    let w = uniform(&mut rng, 6, 0.5, 1.5);
    cases.push(unary_case("relu", x, vec![2, 3], vec![2, 3], w, |g, x| g.relu(x)));

    let x = uniform(&mut rng, 6, -2.0, 2.0);
    let w = uniform(&mut rng, 6, 0.5, 1.5);
    cases.push(unary_case("sigmoid", x, vec![6], vec![6], w, |g, x| g.sigmoid(x)));

    let x = uniform(&mut rng, 6, -1.0, 1.0);
    let w = uniform(&mut rng, 6, 0.5, 1.5);
    cases.push(unary_case("exp", x, vec![6], vec![6], w, |g, x| g.exp(x)));

    let x = uniform(&mut rng, 6, 0.3, 1.8);
    let w = uniform(&mut rng, 6, 0.5, 1.5);
    cases.push(unary_case("log", x, vec![6], vec![6], w, |g, x| g.log(x).unwrap()));

    let x = uniform(&mut rng, 6, -1.0, 1.0);
    let w = uniform(&mut rng, 6, 0.5, 1.5);
    cases.push(unary_case("scale", x, vec![6], vec![6], w, |g, x| g.scale(x, -1.7)));

    let x = away_from_clamp_bounds(&mut rng, 8);
    let w = uniform(&mut rng, 8, 0.5, 1.5);
    cases.push(unary_case("clamp", x, vec![8], vec![8], w, |g, x| {
        g.clamp(x, -0.5, 0.5)
    }));

    {
        let x = uniform(&mut rng, 6, -2.0, 4.0);
        let w = uniform(&mut rng, 6, 0.5, 1.5);
        let mask = vec![true, true, false, true, false, true];
        cases.push(OpCase {
            name: "softmax_masked",
            inputs: vec![(x, vec![6])],
            build: Box::new(move |g, t| {
                let y = g.softmax_masked(t[0], &mask).unwrap();
                weighted_sum(g, y, &w, &[6])
            }),
        });
    }

    {
        // Duplicate index 2 exercises gradient accumulation into one row.
        let table = uniform(&mut rng, 15, -1.0, 1.0);
        let w = uniform(&mut rng, 12, 0.5, 1.5);
        cases.push(OpCase {
            name: "gather_rows",
            inputs: vec![(table, vec![5, 3])],
            build: Box::new(move |g, t| {
                let y = g.gather_rows(t[0], &[0, 2, 2, 4]).unwrap();
                weighted_sum(g, y, &w, &[4, 3])
            }),
        });
    }

    {
        let a = uniform(&mut rng, 6, -1.0, 1.0);
        let b = uniform(&mut rng, 3, -1.0, 1.0);
        let w = uniform(&mut rng, 9, 0.5, 1.5);
        cases.push(OpCase {
            name: "concat_rows",
            inputs: vec![(a, vec![2, 3]), (b, vec![1, 3])],
            build: Box::new(move |g, t| {
                let y = g.concat(&[t[0], t[1]]).unwrap();
                weighted_sum(g, y, &w, &[3, 3])
            }),
        });
    }

    {
        let a = uniform(&mut rng, 3, -1.0, 1.0);
        let b = uniform(&mut rng, 4, -1.0, 1.0);
        let w = uniform(&mut rng, 7, 0.5, 1.5);
        cases.push(OpCase {
            name: "concat_flat",
            inputs: vec![(a, vec![3]), (b, vec![4])],
            build: Box::new(move |g, t| {
                let y = g.concat(&[t[0], t[1]]).unwrap();
                weighted_sum(g, y, &w, &[7])
            }),
        });
    }

    {
        let x = uniform(&mut rng, 6, -1.0, 1.0);
        cases.push(OpCase {
            name: "reduce_sum",
            inputs: vec![(x, vec![2, 3])],
            build: Box::new(|g, t| g.reduce_sum(t[0])),
        });
    }

    {
        let x = uniform(&mut rng, 7, -1.0, 1.0);
        cases.push(OpCase {
            name: "mean",
            inputs: vec![(x, vec![7])],
            build: Box::new(|g, t| g.mean(t[0])),
        });
    }

    let x = uniform(&mut rng, 6, -1.0, 1.0);
    let w = uniform(&mut rng, 6, 0.5, 1.5);
    cases.push(unary_case("transpose", x, vec![3, 2], vec![2, 3], w, |g, x| {
        g.transpose(x).unwrap()
    }));

    let x = uniform(&mut rng, 6, -1.0, 1.0);
    let w = uniform(&mut rng, 6, 0.5, 1.5);
    cases.push(unary_case("reshape", x, vec![2, 3], vec![3, 2], w, |g, x| {
        g.reshape(x, vec![3, 2]).unwrap()
    }));

    let x = uniform(&mut rng, 4, -1.0, 1.0);
    let w = uniform(&mut rng, 12, 0.5, 1.5);
    cases.push(unary_case("expand_rows", x, vec![1, 4], vec![3, 4], w, |g, x| {
        g.expand_rows(x, 3).unwrap()
    }));

    cases
}

/// Tiny full-variant model over a hand-built corpus: 10-item table, width
/// 4 everywhere, slot width 3, one neighbor slot.
fn tiny_model_and_set() -> (ModelParams, PreparedSet) {
    let mut config = ModelConfig::new(10, Variant::Full);
    config.d = 4;
    config.d_item = 4;
    config.d_prime = 4;
    config.l = 3;
    config.k = 1;
    config.mlp_hidden = vec![6];
    config.adapter_hidden = 4;
    config.seed = 97;

    let mut histories = BTreeMap::new();
    histories.insert(0u64, vec![1u64, 2, 3, 4]);
    histories.insert(1, vec![5, 6]);
    histories.insert(2, vec![7, 8, 9]);
    histories.insert(3, vec![2, 5]);

    let mut neighbors = BTreeMap::new();
    neighbors.insert(0u64, vec![(1u64, 0.9)]);
    neighbors.insert(1, vec![(0, 0.8)]);
    neighbors.insert(2, vec![(3, 0.7)]);
    neighbors.insert(3, vec![(2, 0.6)]);

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let embeddings: BTreeMap<u64, Vec<f64>> =
        (0..4).map(|u| (u, uniform(&mut rng, 4, -1.0, 1.0))).collect();
    let train_users = vec![0u64, 1, 2, 3];

    let samples = vec![
        TrainingSample { user_id: 0, target_item: 5, label: 1, history: vec![1, 2, 3, 4] },
        TrainingSample { user_id: 1, target_item: 7, label: 0, history: vec![5, 6] },
        TrainingSample { user_id: 2, target_item: 1, label: 1, history: vec![7, 8, 9] },
        TrainingSample { user_id: 3, target_item: 9, label: 0, history: vec![2, 5] },
    ];
    let inputs = ContextInputs {
        histories: &histories,
        neighbors: &neighbors,
        embeddings: &embeddings,
        train_users: &train_users,
    };
    let set = PreparedSet::build(&samples, &inputs, &config).unwrap();
    let model = ModelParams::init(config).unwrap();
    (model, set)
}

fn model_loss(model: &ModelParams, set: &PreparedSet) -> (Graph, BTreeMap<String, TensorId>, TensorId) {
    let mut g = Graph::new();
    let ids = model.params.bind(&mut g);
    let batch: Vec<(u64, &SampleContext)> = set
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.target_item, &set.contexts[set.ctx_of[i]]))
        .collect();
    let probs = model.forward_probs(&mut g, &ids, &batch, None).unwrap();
    let labels: Vec<u8> = set.samples.iter().map(|s| s.label).collect();
    let loss = bce_from_probs(&mut g, probs, &labels).unwrap();
    (g, ids, loss)
}

#[test]
fn gradients_match_central_finite_differences() {
    let t0 = Instant::now();
    let mut total = 0usize;
    let mut worst = 0.0f64;
    let mut worst_site = String::new();

    for case in op_cases() {
        let (n, err) = check_op(&case);
        assert!(
            err < 1e-4,
            "op {}: worst relative error {err:.3e} >= 1e-4",
            case.name
        );
        if err > worst {
            worst = err;
            worst_site = case.name.to_string();
        }
        total += n;
    }
    let ops = op_cases().len();

    // Full forward pass: cross-entropy over a 4-sample batch, every
    // parameter entry nudged both ways.
    let (model, set) = tiny_model_and_set();
    let (mut g, ids, loss) = model_loss(&model, &set);
    g.backward(loss).unwrap();
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let eval = |m: &ModelParams| {
        let (g, _, loss) = model_loss(m, &set);
        g.scalar_value(loss)
    };

    let mut m = model.clone();
    for name in &names {
        let analytic = g
            .grad(ids[name])
            .unwrap_or_else(|| panic!("parameter {name} has no gradient"))
            .to_vec();
        let len = analytic.len();
        let mut numeric = vec![0.0; len];
        let h = 1e-5;
        for j in 0..len {
            let orig = m.params.get(name).unwrap().data[j];
            m.params.get_mut(name).unwrap().data[j] = orig + h;
            let up = eval(&m);
            m.params.get_mut(name).unwrap().data[j] = orig - h;
            let down = eval(&m);
            m.params.get_mut(name).unwrap().data[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let err = max_rel_error(&analytic, &numeric);
        assert!(
            err < 1e-4,
            "parameter {name}: worst relative error {err:.3e} >= 1e-4"
        );
        if err > worst {
            worst = err;
            worst_site = name.clone();
        }
        total += len;
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 30.0, "gradient suite took {secs:.1}s, budget is 30s");
    pass(
        "gradients_match_central_finite_differences",
        format!(
            "{ops} ops + {} model parameters, {total} entries, worst rel err {worst:.2e} ({worst_site}), {secs:.1}s",
            names.len()
        ),
    );
}

// ── 2. Position IDs: user identity, cross-user order, recency ────────

#[test]
fn position_ids_encode_user_slot_order_and_recency() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut with_neighbors = 0usize;
    for _ in 0..1000 {
        let l = rng.gen_range(1..=8usize);
        let k = rng.gen_range(0..=4usize);
        let target_len = rng.gen_range(0..=l + 3);
        let m = rng.gen_range(0..=k);
        if m > 0 {
            with_neighbors += 1;
        }

        let target = BehaviorSequence {
            user_id: 1,
            items: (0..target_len).map(|_| rng.gen_range(1..=99u64)).collect(),
        };
        let mut seqs: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        let mut entries = Vec::new();
        for j in 0..m {
            let uid = 1000 + j as u64;
            let len = rng.gen_range(1..=l + 3);
            seqs.insert(uid, (0..len).map(|_| rng.gen_range(1..=99u64)).collect());
            entries.push((uid, 1.0 - 0.05 * j as f64));
        }
        let res = SimilarUserResult { entries, warned: false };
        let aug = build_augmented(&target, &res, |u| seqs.get(&u).map(|v| v.as_slice()), l, k)
            .unwrap();
        let aug = assign_position_ids(aug, PositionScheme::Utpe);

        // Identity: every position's ID names its source slot.
        for i in 0..aug.total_len() {
            assert_eq!(
                aug.position_ids[i] / l as u64,
                aug.slot_of[i] as u64,
                "position {i} of L={l} K={k}"
            );
        }
        // Order: every ID of a more similar slot is strictly below every
        // ID of a less similar one.
        for a in 0..aug.k {
            let max_a = aug.slot_range(a).map(|i| aug.position_ids[i]).max().unwrap();
            let min_b = aug
                .slot_range(a + 1)
                .map(|i| aug.position_ids[i])
                .min()
                .unwrap();
            assert!(max_a < min_b, "slots {a} and {} overlap", a + 1);
        }
        // Recency: the i-th latest real item of slot s has ID s*L + i - 1,
        // so ID differences equal recency differences regardless of how
        // many items the slot actually holds.
        for slot in 0..=aug.k {
            let mut latest = 0u64;
            for i in aug.slot_range(slot).rev() {
                if aug.mask[i] {
                    latest += 1;
                    assert_eq!(
                        aug.position_ids[i],
                        slot as u64 * l as u64 + latest - 1,
                        "slot {slot}, {latest}-th latest, L={l} K={k}"
                    );
                }
            }
        }
    }

    // Flat numbering breaks slot identity once lengths differ: with L=5
    // and real lengths 4/2/3 the most similar neighbor's latest item gets
    // ID 4, which floor-divides into the target's slot.
    let target = BehaviorSequence { user_id: 7, items: vec![11, 12, 13, 14] };
    let mut seqs = BTreeMap::new();
    seqs.insert(100u64, vec![21u64, 22]);
    seqs.insert(101, vec![31, 32, 33]);
    let res = SimilarUserResult {
        entries: vec![(100, 0.9), (101, 0.8)],
        warned: false,
    };
    let aug = build_augmented(&target, &res, |u| seqs.get(&u).map(|v| v.as_slice()), 5, 2)
        .unwrap();
    let flat = assign_position_ids(aug.clone(), PositionScheme::Tpe);
    let violated = (0..flat.total_len())
        .any(|i| flat.mask[i] && flat.position_ids[i] / 5 != flat.slot_of[i] as u64);
    assert!(violated, "flat scheme unexpectedly kept slot identity");
    let slotted = assign_position_ids(aug, PositionScheme::Utpe);
    for i in 0..slotted.total_len() {
        assert_eq!(slotted.position_ids[i] / 5, slotted.slot_of[i] as u64);
    }

    pass(
        "position_ids_encode_user_slot_order_and_recency",
        format!(
            "1000 random L/K/length combinations ({with_neighbors} with neighbors), 3 properties each; flat numbering violates slot identity on the unequal-length case"
        ),
    );
}

// ── 3. Retrieval vs brute-force full-sort oracle ─────────────────────

#[test]
fn retrieval_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n: u64 = 1000;
    let d = 16usize;

    let mut embs: Vec<Vec<f64>> = (0..n).map(|_| uniform(&mut rng, d, -1.0, 1.0)).collect();
    for u in 10..30 {
        embs[u] = embs[40].clone(); // 20-way embedding tie block
    }
    embs[0] = vec![0.0; d]; // zero vector: degenerate query, skipped candidate

    let mut item_sets: Vec<BTreeSet<u64>> = (0..n)
        .map(|_| {
            let size = rng.gen_range(3..=10);
            let mut s = BTreeSet::new();
            while s.len() < size {
                s.insert(rng.gen_range(1..=200u64));
            }
            s
        })
        .collect();
    for u in 50..60 {
        item_sets[u] = item_sets[70].clone(); // jaccard tie block
    }

    let candidates: Vec<PoolCandidate> = (0..n)
        .map(|u| PoolCandidate {
            user_id: u,
            split: Split::Train,
            embedding: embs[u as usize].clone(),
            items: item_sets[u as usize].clone(),
        })
        .collect();
    let pool = build_pool(&candidates, d).unwrap();

    let oracle = |q: usize, measure: SimilarityMeasure| -> Vec<(u64, f64)> {
        let mut scored = Vec::new();
        for c in 0..n as usize {
            if c == q {
                continue;
            }
            let score = match measure {
                SimilarityMeasure::Cosine => match pool::cosine(&embs[q], &embs[c]) {
                    Ok(s) => s,
                    Err(_) => continue,
                },
                SimilarityMeasure::InnerProduct => pool::inner_product(&embs[q], &embs[c]),
                SimilarityMeasure::Euclidean => pool::euclidean(&embs[q], &embs[c]),
                SimilarityMeasure::Jaccard => {
                    pool::jaccard(&item_sets[q], &item_sets[c]).unwrap()
                }
            };
            scored.push((c as u64, score));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
    };

    let mut compared = 0usize;
    for measure in ALL_MEASURES {
        for q in 0..n {
            let query = PoolQuery {
                user_id: q,
                embedding: &embs[q as usize],
                items: &item_sets[q as usize],
            };
            if measure == SimilarityMeasure::Cosine && q == 0 {
                let got = retrieve_topk(&pool, &query, 5, measure, None).unwrap();
                assert!(got.entries.is_empty() && got.warned, "zero query must warn");
                continue;
            }
            let expect = oracle(q as usize, measure);
            let mut prev: Option<Vec<(u64, f64)>> = None;
            for k in [1usize, 5, 50] {
                let got = retrieve_topk(&pool, &query, k, measure, None).unwrap();
                assert!(!got.warned);
                let want = &expect[..k.min(expect.len())];
                assert_eq!(
                    got.entries.as_slice(),
                    want,
                    "user {q}, measure {measure}, k={k}"
                );
                if let Some(p) = &prev {
                    assert_eq!(
                        &got.entries[..p.len()],
                        p.as_slice(),
                        "top-{} is not a prefix of top-{k} for user {q} ({measure})",
                        p.len()
                    );
                }
                prev = Some(got.entries);
                compared += 1;
            }
        }
    }

    // The tie blocks must actually have been exercised, with ascending-id
    // order inside each tied run.
    let q15 = retrieve_topk(
        &pool,
        &PoolQuery { user_id: 15, embedding: &embs[15], items: &item_sets[15] },
        50,
        SimilarityMeasure::Cosine,
        None,
    )
    .unwrap()
    .entries;
    let top = q15[0].1;
    let tied: Vec<u64> = q15.iter().take_while(|e| e.1 == top).map(|e| e.0).collect();
    assert_eq!(tied.len(), 20, "expected the 20-way cosine tie at the top");
    assert!(tied.windows(2).all(|w| w[0] < w[1]), "ties must sort by id");

    let q55 = retrieve_topk(
        &pool,
        &PoolQuery { user_id: 55, embedding: &embs[55], items: &item_sets[55] },
        50,
        SimilarityMeasure::Jaccard,
        None,
    )
    .unwrap()
    .entries;
    let perfect = q55.iter().take_while(|e| e.1 == 1.0).count();
    assert!(perfect >= 10, "expected at least the 10-way jaccard tie, got {perfect}");

    pass(
        "retrieval_matches_brute_force_oracle",
        format!(
            "1000 users x 4 measures x K in {{1,5,50}}: {compared} exact top-K comparisons incl. 20-way cosine and {perfect}-way jaccard ties, prefix property held"
        ),
    );
}

// ── 4. Attention invariants ──────────────────────────────────────────

/// Width-4 full model with two neighbor slots plus contexts covering a
/// partly padded slot (user 2) and fully padded slots (user 3).
fn attention_fixture() -> (ModelConfig, PreparedSet) {
    let mut config = ModelConfig::new(12, Variant::Full);
    config.d = 4;
    config.d_item = 4;
    config.d_prime = 4;
    config.l = 3;
    config.k = 2;
    config.mlp_hidden = vec![5];
    config.adapter_hidden = 3;
    config.seed = 5;

    let mut histories = BTreeMap::new();
    histories.insert(0u64, vec![1u64, 2, 3]);
    histories.insert(1, vec![4, 5, 6, 7]);
    histories.insert(2, vec![8, 9]);
    histories.insert(3, vec![3, 6]);

    let mut neighbors = BTreeMap::new();
    neighbors.insert(0u64, vec![(1u64, 0.9), (2, 0.5)]);
    neighbors.insert(1, vec![(0, 0.7), (2, 0.4)]);
    neighbors.insert(2, vec![(1, 0.8)]);
    neighbors.insert(3, Vec::new());

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let embeddings: BTreeMap<u64, Vec<f64>> =
        (0..4).map(|u| (u, uniform(&mut rng, 4, -1.0, 1.0))).collect();
    let train_users = vec![0u64, 1, 2, 3];

    let samples = vec![
        TrainingSample { user_id: 0, target_item: 10, label: 1, history: vec![1, 2, 3] },
        TrainingSample { user_id: 1, target_item: 11, label: 0, history: vec![4, 5, 6, 7] },
        TrainingSample { user_id: 2, target_item: 5, label: 1, history: vec![8, 9] },
        TrainingSample { user_id: 3, target_item: 7, label: 0, history: vec![3, 6] },
    ];
    let inputs = ContextInputs {
        histories: &histories,
        neighbors: &neighbors,
        embeddings: &embeddings,
        train_users: &train_users,
    };
    let set = PreparedSet::build(&samples, &inputs, &config).unwrap();
    (config, set)
}

#[test]
fn attention_masking_shift_and_degeneration_invariants() {
    // Masked softmax: unmasked weights sum to 1, masked are exactly zero,
    // and a constant logit shift changes nothing.
    let vals = vec![0.3, -1.2, 4.0, 0.7, -0.1, 2.2];
    let mask = [true, true, false, true, false, true];
    let mut g = Graph::new();
    let x = g.leaf(vals.clone(), vec![6]).unwrap();
    let sm = g.softmax_masked(x, &mask).unwrap();
    let w: Vec<f64> = g.value(sm).to_vec();
    assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    for i in 0..6 {
        if !mask[i] {
            assert_eq!(w[i], 0.0);
        }
    }
    let shifted: Vec<f64> = vals.iter().map(|v| v + 37.5).collect();
    let xs = g.leaf(shifted, vec![6]).unwrap();
    let sms = g.softmax_masked(xs, &mask).unwrap();
    let ws = g.value(sms);
    let max_shift_dev = (0..6).map(|i| (w[i] - ws[i]).abs()).fold(0.0f64, f64::max);
    assert!(max_shift_dev <= 1e-9, "shift deviation {max_shift_dev:.2e}");

    // Degeneration: with the adapter output zeroed (and position tables
    // zero at init) the user stream contributes exactly nothing, so the
    // full model's attention weights and predictions must equal an
    // item-only target-attention model over the same spliced sequences.
    let (config, set) = attention_fixture();
    let mut suin = ModelParams::init(config.clone()).unwrap();
    suin.params.get_mut("adapter.w2").unwrap().data.fill(0.0);
    suin.params.get_mut("adapter.b2").unwrap().data.fill(0.0);

    let mut ta_config = config.clone();
    ta_config.pooling = Some(PoolingMode::TargetAttention);
    let mut ta = ModelParams::init(ta_config).unwrap();
    let names: Vec<String> = ta.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        if name == "head.w0" {
            continue;
        }
        let src = suin.params.get(name).unwrap().data.clone();
        ta.params.get_mut(name).unwrap().data.copy_from_slice(&src);
    }
    // The item-only head sees [pooled | target] where the full head sees
    // [pooled | user half | target]: map the matching input rows, drop the
    // rows that multiply the zeroed user half.
    let (d, di, h) = (config.d, config.d_item, config.mlp_hidden[0]);
    let src_w0 = suin.params.get("head.w0").unwrap().data.clone();
    let dst_w0 = ta.params.get_mut("head.w0").unwrap();
    for r in 0..di {
        for c in 0..h {
            dst_w0.data[r * h + c] = src_w0[r * h + c];
            dst_w0.data[(di + r) * h + c] = src_w0[(di + d + r) * h + c];
        }
    }

    let p_suin = predict(&suin, &set).unwrap();
    let p_ta = predict(&ta, &set).unwrap();
    let max_pred_dev = p_suin
        .iter()
        .zip(&p_ta)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(
        max_pred_dev <= 1e-9,
        "zero-adapter predictions deviate by {max_pred_dev:.2e}"
    );

    let mut max_weight_dev = 0.0f64;
    for (i, s) in set.samples.iter().enumerate() {
        let ctx = &set.contexts[set.ctx_of[i]];
        let ws = suin.attention_weights(s.target_item, ctx).unwrap();
        let wt = ta.attention_weights(s.target_item, ctx).unwrap();
        assert_eq!(ws.len(), wt.len());
        let total: f64 = ws.iter().map(|&(_, _, w)| w).sum();
        assert!((total - 1.0).abs() <= 1e-9, "weights sum to {total}");
        for (j, (&(pa, sa, wa), &(pb, sb, wb))) in ws.iter().zip(&wt).enumerate() {
            assert_eq!((pa, sa), (pb, sb));
            max_weight_dev = max_weight_dev.max((wa - wb).abs());
            if !ctx.aug.mask[j] {
                assert_eq!(wa, 0.0, "masked position {j} has nonzero weight");
            }
        }
    }
    assert!(
        max_weight_dev <= 1e-9,
        "zero-adapter attention weights deviate by {max_weight_dev:.2e}"
    );

    // Pad independence: rewriting the item and position IDs at every
    // masked position (covering user 3's two fully padded neighbor slots)
    // must not move any prediction.
    let base = predict(&suin, &set).unwrap();
    let mut mutated = set.clone();
    let rows = (config.k + 1) * config.l;
    for ctx in &mut mutated.contexts {
        for i in 0..ctx.aug.total_len() {
            if !ctx.aug.mask[i] {
                ctx.aug.item_ids[i] = 1 + (i as u64 % 11);
                ctx.aug.position_ids[i] = i as u64 % rows as u64;
            }
        }
    }
    let moved = predict(&suin, &mutated).unwrap();
    assert_eq!(base, moved, "padded positions leaked into predictions");

    pass(
        "attention_masking_shift_and_degeneration_invariants",
        format!(
            "masked weights sum to 1 and stay 0, shift dev {max_shift_dev:.1e}, zero-adapter dev {max_pred_dev:.1e} (weights {max_weight_dev:.1e}), pad rewrite moved nothing"
        ),
    );
}

// ── 5. Holdout leakage across the file pipeline ──────────────────────

#[test]
fn holdout_users_never_enter_pool_or_neighbor_files() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path().join("run"));
    let mut config = RunConfig::default();
    config.seed = 33;
    config.threads = 1;
    config.synthetic.users = 800;
    config.synthetic.items = 300;
    config.synthetic.clusters = 4;
    config.synthetic.len_min = 3;
    config.synthetic.len_max = 12;
    config.encoder.d_prime = 8;
    config.encoder.max_len = 12;
    config.encoder.epochs = 1;
    config.retrieval.k_retrieve = 5;

    cmd_generate(&config, &run).unwrap();
    cmd_split(&config, &run).unwrap();
    cmd_pretrain(&config, &run).unwrap();
    cmd_build_pool(&config, &run).unwrap();
    cmd_retrieve(&config, &run).unwrap();

    let splits = std::fs::read_to_string(run.stage("split").join("splits.csv")).unwrap();
    let mut split_of: BTreeMap<u64, String> = BTreeMap::new();
    for line in splits.lines().skip(1) {
        let (u, s) = line.split_once(',').unwrap();
        split_of.insert(u.parse().unwrap(), s.to_string());
    }
    let holdout: BTreeSet<u64> = split_of
        .iter()
        .filter(|(_, s)| s.as_str() != "train")
        .map(|(&u, _)| u)
        .collect();
    assert!(holdout.len() > 100, "expected a real holdout, got {}", holdout.len());

    let pool_file = std::fs::read_to_string(run.stage("pool").join("pool.tsv")).unwrap();
    let mut pool_users = BTreeSet::new();
    for line in pool_file.lines() {
        let uid: u64 = line.split('\t').next().unwrap().parse().unwrap();
        assert_eq!(split_of[&uid], "train", "pool user {uid} is not train-split");
        assert!(!holdout.contains(&uid));
        pool_users.insert(uid);
    }
    assert!(!pool_users.is_empty());

    let neighbors = read_neighbors(&run.stage("retrieve").join("neighbors.tsv")).unwrap();
    let mut holdout_queries = 0usize;
    let mut entries = 0usize;
    for (uid, list) in &neighbors {
        if holdout.contains(uid) {
            holdout_queries += 1;
        }
        for (nbr, _) in list {
            assert_eq!(
                split_of[nbr], "train",
                "user {uid} retrieved holdout neighbor {nbr}"
            );
            entries += 1;
        }
    }
    assert!(
        holdout_queries > 0,
        "no holdout users were queried; the check would be vacuous"
    );

    pass(
        "holdout_users_never_enter_pool_or_neighbor_files",
        format!(
            "{} pool users all train-split; {entries} neighbor entries across {} users ({holdout_queries} holdout queries) never name one of {} holdout users",
            pool_users.len(),
            neighbors.len(),
            holdout.len()
        ),
    );
}

// ── 6. Metric oracles and closed forms ───────────────────────────────

#[test]
fn auc_matches_pairwise_oracle_and_bce_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.gen_range(2..=60);
        let quantize = case % 2 == 0; // force score ties on half the cases
        let (scores, labels) = loop {
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let s: f64 = rng.gen_range(0.0..1.0);
                    if quantize {
                        (s * 10.0).round() / 10.0
                    } else {
                        s
                    }
                })
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
            if labels.contains(&0) && labels.contains(&1) {
                break (scores, labels);
            }
        };

        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let oracle = num / den;
        let got = metrics::auc(&scores, &labels).unwrap();
        worst = worst.max((got - oracle).abs());
        assert!(
            (got - oracle).abs() <= 1e-9,
            "case {case}: auc {got} vs pairwise oracle {oracle}"
        );
    }

    // An uninformative prediction costs exactly ln 2 nats either way.
    let ln2 = std::f64::consts::LN_2;
    assert!((metrics::logloss(&[0.5], &[1]).unwrap() - ln2).abs() <= 1e-9);
    assert!((metrics::logloss(&[0.5], &[0]).unwrap() - ln2).abs() <= 1e-9);
    // And sigmoid maps a zero logit to that prediction.
    let mut g = Graph::new();
    let x = g.leaf(vec![0.0], vec![1]).unwrap();
    let s = g.sigmoid(x);
    assert_eq!(g.value(s)[0], 0.5);

    pass(
        "auc_matches_pairwise_oracle_and_bce_closed_form",
        format!(
            "200 random score sets (half quantized for ties), worst |auc - oracle| = {worst:.1e}; logloss(0.5) = ln 2 both labels"
        ),
    );
}

// ── 7 & 8. End-to-end lift of the full model ─────────────────────────

/// Planted-cluster corpus tuned so the encoder sees the whole history but
/// the CTR window is deliberately narrow: neighbor slots then widen the
/// evidence with retrieval-vetted items.
fn corpus_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.threads = 1;
    c.synthetic.users = 2000;
    c.synthetic.items = 500;
    c.synthetic.clusters = 4;
    c.synthetic.latent_dim = 8;
    c.synthetic.len_min = 6;
    c.synthetic.len_max = 14;
    c.synthetic.length_exponent = 1.0;
    c.synthetic.temperature = 2.5;
    c.encoder.d_prime = 16;
    c.encoder.max_len = 14;
    c.encoder.epochs = 6;
    c.retrieval.k_retrieve = 10;
    c.model.d = 16;
    c.model.d_item = 16;
    c.model.l = 3;
    c.model.k = 4;
    c.model.mlp_hidden = vec![64, 32];
    c.model.adapter_hidden = 32;
    c.train.epochs = 12;
    c.train.batch_size = 128;
    c.train.lr = 1e-3;
    c.train.patience = 3;
    c
}

#[test]
fn full_model_beats_no_augmentation_and_random_neighbors() {
    let t0 = Instant::now();
    let config = corpus_config();
    let seeds: Vec<u64> = (0..5).collect();
    let mut full = Vec::new();
    let mut none = Vec::new();
    let mut random = Vec::new();

    for &seed in &seeds {
        let arts = build_seed_artifacts(&config, seed).unwrap();
        let run_variant = |variant: Variant| -> f64 {
            let mut c = config.clone();
            c.model.variant = variant;
            run_setting(&arts, &c, seed).unwrap().0
        };
        full.push(run_variant(Variant::Full));
        none.push(run_variant(Variant::NoSuNoUta));
        random.push(run_variant(Variant::RandomUsers));
    }

    let (m_full, m_none, m_random) = (mean(&full), mean(&none), mean(&random));
    let wins_none = seeds.iter().filter(|&&s| full[s as usize] > none[s as usize]).count();
    let wins_random = seeds
        .iter()
        .filter(|&&s| full[s as usize] > random[s as usize])
        .count();
    let secs = t0.elapsed().as_secs_f64();

    let per_seed: Vec<String> = seeds
        .iter()
        .map(|&s| {
            let i = s as usize;
            format!("seed {s}: full {:.4} none {:.4} random {:.4}", full[i], none[i], random[i])
        })
        .collect();
    println!("{}", per_seed.join("\n"));

    assert!(
        m_full > m_none,
        "mean test AUC: full {m_full:.4} must beat no-augmentation {m_none:.4}"
    );
    assert!(
        m_full > m_random,
        "mean test AUC: full {m_full:.4} must beat random neighbors {m_random:.4}"
    );
    assert!(wins_none >= 4, "full beat no-augmentation on only {wins_none}/5 seeds");
    assert!(wins_random >= 4, "full beat random neighbors on only {wins_random}/5 seeds");
    assert!(secs < 600.0, "direction check took {secs:.0}s, budget is 600s");

    pass(
        "full_model_beats_no_augmentation_and_random_neighbors",
        format!(
            "5 seeds: mean AUC full {m_full:.4} > none {m_none:.4} (+{:.4}, {wins_none}/5 seeds) and > random {m_random:.4} (+{:.4}, {wins_random}/5 seeds), {secs:.0}s",
            m_full - m_none,
            m_full - m_random
        ),
    );
}

#[test]
fn some_topk_beats_k0_and_curve_is_emitted() {
    let mut config = corpus_config();
    config.ablate.seeds = 3;
    config.ablate.topk_max = 6;

    let table = run_sweep(&config, Sweep::Topk).unwrap();
    let mut means: BTreeMap<usize, f64> = BTreeMap::new();
    let mut csv = String::from("k,mean_auc,per_seed_auc\n");
    for row in &table.rows {
        assert!(row.error.is_none(), "setting k={}: {:?}", row.setting, row.error);
        let aucs: Vec<f64> = row.per_seed.iter().map(|&(_, a, _)| a).collect();
        let k: usize = row.setting.parse().unwrap();
        means.insert(k, mean(&aucs));
        let per_seed: Vec<String> = aucs.iter().map(|a| format!("{a:.6}")).collect();
        csv.push_str(&format!("{k},{:.6},{}\n", mean(&aucs), per_seed.join(";")));
    }

    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("topk_auc_curve.csv");
    std::fs::write(&out, &csv).unwrap();

    let baseline = means[&0];
    let (&best_k, &best) = means
        .iter()
        .filter(|(&k, _)| k >= 1)
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    assert!(
        best >= baseline,
        "best augmented setting K={best_k} ({best:.4}) fell below K=0 ({baseline:.4})"
    );

    let curve: Vec<String> = means.iter().map(|(k, a)| format!("K={k}: {a:.4}")).collect();
    pass(
        "some_topk_beats_k0_and_curve_is_emitted",
        format!(
            "best K={best_k} mean AUC {best:.4} >= K=0 {baseline:.4} over 3 seeds; curve [{}] written to {}",
            curve.join(", "),
            out.display()
        ),
    );
}

// ── 9. Byte-level determinism ────────────────────────────────────────

fn tiny_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 3;
    c.threads = 1;
    c.synthetic.users = 60;
    c.synthetic.items = 30;
    c.synthetic.clusters = 2;
    c.synthetic.len_min = 2;
    c.synthetic.len_max = 10;
    c.encoder.d_prime = 4;
    c.encoder.max_len = 8;
    c.encoder.epochs = 1;
    c.retrieval.k_retrieve = 6;
    c.model.d = 4;
    c.model.d_item = 4;
    c.model.l = 6;
    c.model.k = 2;
    c.model.mlp_hidden = vec![8];
    c.model.adapter_hidden = 4;
    c.train.epochs = 2;
    c.train.batch_size = 32;
    c
}

fn run_everything(config: &RunConfig, run: &RunDir) {
    cmd_generate(config, run).unwrap();
    cmd_split(config, run).unwrap();
    cmd_pretrain(config, run).unwrap();
    cmd_build_pool(config, run).unwrap();
    cmd_retrieve(config, run).unwrap();
    cmd_train(config, run).unwrap();
    cmd_evaluate(config, run, Split::Test, Grouping::None).unwrap();
    cmd_evaluate(config, run, Split::Val, Grouping::SeqLength).unwrap();
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, base: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, base, out);
            } else {
                out.insert(
                    path.strip_prefix(base).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn assert_identical(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>, what: &str) {
    let ka: Vec<_> = a.keys().collect();
    let kb: Vec<_> = b.keys().collect();
    assert_eq!(ka, kb, "{what}: file sets differ");
    for (path, bytes) in a {
        assert_eq!(bytes, &b[path], "{what}: {} differs", path.display());
    }
}

#[test]
fn identical_seed_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_run_config();

    let run_a = RunDir::new(dir.path().join("a"));
    run_everything(&config, &run_a);
    let first = snapshot(run_a.root());

    // Fresh directory, same config and seed.
    let run_b = RunDir::new(dir.path().join("b"));
    run_everything(&config, &run_b);
    assert_identical(&first, &snapshot(run_b.root()), "fresh-directory rerun");

    // Every stage rerun in place over its own outputs.
    run_everything(&config, &run_a);
    assert_identical(&first, &snapshot(run_a.root()), "in-place rerun");

    let bytes: usize = first.values().map(Vec::len).sum();
    pass(
        "identical_seed_reruns_are_byte_identical",
        format!(
            "{} artifact files ({bytes} bytes incl. model weights, logs, reports, manifests) byte-identical across a fresh-directory rerun and an in-place rerun",
            first.len()
        ),
    );
}
