//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

mod common;

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use dynembed::client::corpus::ZipfCorpus;
use dynembed::client::skipgram::{
    batch_indices, eval_vocab_accuracy, train_skipgram, train_skipgram_concurrent, train_step, ReferenceBackend,
    ServiceBackend, SkipGramConfig, SkipGramData, TrainingBackend, INPUT_TABLE, OUTPUT_TABLE,
};
use dynembed::client::DynEmbedClient;
use dynembed::retrieval::{score, ScoredKey};
use dynembed::sampler::{merge_shard_samples, sample, shard_sample, softmax_cross_entropy, strategy_weight};
use dynembed::service::{
    shard_of, CheckpointManifest, Cluster, Handler, Master, RemoteHandler, Request, UpdateMode, Worker, WorkerOptions,
};
use dynembed::store::CountingBloomFilter;
use dynembed::{
    BloomSpec, EmbeddingKey, Error, LifetimePolicy, OptimizerKind, OptimizerSpec, SamplerStrategy, TableConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const OPTIMIZERS: [OptimizerKind; 3] = [OptimizerKind::Sgd, OptimizerKind::Adagrad, OptimizerKind::Momentum];

fn in_process(n: u32) -> (Cluster, DynEmbedClient) {
    let cluster = Cluster::in_process(n, |_| WorkerOptions::default());
    let client = DynEmbedClient::with_handler(cluster.master.clone());
    (cluster, client)
}

fn all_entries(backend: &dyn TrainingBackend, keys: &[EmbeddingKey]) -> Vec<Option<EntryBits>> {
    let mut out = entries_bits(&backend.lookup_entries(INPUT_TABLE, keys).unwrap());
    out.extend(entries_bits(&backend.lookup_entries(OUTPUT_TABLE, keys).unwrap()));
    out
}

// 1. Service-backed training on one worker reproduces in-process training bit for bit.
#[test]
fn criterion_01_backward_compatibility_exact() {
    const MAX_RUNTIME: Duration = Duration::from_secs(300);
    let started = Instant::now();
    let data = zipf_data();
    let keys = data.keys();
    let outcomes: Vec<(OptimizerKind, bool, bool)> = std::thread::scope(|s| {
        let handles: Vec<_> = OPTIMIZERS
            .iter()
            .map(|&kind| {
                let keys = &keys;
                s.spawn(move || {
                    let cfg = skipgram_config(kind, 7);
                    let cluster = Cluster::tcp(1, |_| WorkerOptions::default()).unwrap();
                    let client = DynEmbedClient::connect(&cluster.master_addr().unwrap()).unwrap();
                    let service = ServiceBackend::new(&client, &cfg).unwrap();
                    let svc = train_skipgram(&service, data, &cfg).unwrap();
                    let reference = ReferenceBackend::new(&cfg).unwrap();
                    let rf = train_skipgram(&reference, data, &cfg).unwrap();
                    let losses_equal = svc.losses.len() == rf.losses.len()
                        && svc
                            .losses
                            .iter()
                            .zip(&rf.losses)
                            .all(|(a, b)| a.to_bits() == b.to_bits());
                    let tables_equal = all_entries(&service, keys) == all_entries(&reference, keys);
                    (kind, losses_equal, tables_equal)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let elapsed = started.elapsed();
    let passed = outcomes.iter().all(|&(_, l, t)| l && t) && elapsed <= MAX_RUNTIME;
    report(
        1,
        passed,
        format!("{outcomes:?} (optimizer, losses identical, embeddings identical) in {elapsed:.1?}"),
    );
    assert!(passed);
}

// 2. Two client threads against two workers track the reference loss.
#[test]
fn criterion_02_backward_compatibility_statistical() {
    const REL_TOL: f64 = 0.02;
    let data = zipf_data();
    let cfg = skipgram_config(OptimizerKind::Sgd, 7);
    let cluster = Cluster::tcp(2, |_| WorkerOptions::default()).unwrap();
    let client = DynEmbedClient::connect(&cluster.master_addr().unwrap()).unwrap();
    let service = ServiceBackend::new(&client, &cfg).unwrap();
    let concurrent = train_skipgram_concurrent(&service, data, &cfg, 2).unwrap();
    let reference = train_skipgram(&ReferenceBackend::new(&cfg).unwrap(), data, &cfg).unwrap();
    let a = concurrent.mean_loss(4000..5000);
    let b = reference.mean_loss(4000..5000);
    let rel = (a - b).abs() / b;
    let passed = rel <= REL_TOL;
    report(
        2,
        passed,
        format!("mean loss steps 4000-5000: concurrent {a:.5}, reference {b:.5}, relative gap {rel:.4}"),
    );
    assert!(passed);
}

// 3. A larger dictionary never hurts held-out accuracy.
#[test]
fn criterion_03_dictionary_size_trend() {
    const MARGIN: f64 = 0.02;
    const MAX_RUNTIME: Duration = Duration::from_secs(1200);
    const HELDOUT: usize = 2000;
    let started = Instant::now();
    let cutoffs = [Some(100), Some(1000), None];
    let seeds = [1u64, 2, 3];
    let text = zipf_text();
    let heldout = ZipfCorpus::default().heldout(HELDOUT, 99);
    let acc: Vec<Vec<f64>> = std::thread::scope(|s| {
        let handles: Vec<Vec<_>> = cutoffs
            .iter()
            .map(|&cutoff| {
                seeds
                    .iter()
                    .map(|&seed| {
                        let heldout = &heldout;
                        s.spawn(move || {
                            let cfg = SkipGramConfig {
                                cutoff,
                                ..skipgram_config(OptimizerKind::Sgd, seed)
                            };
                            let data = SkipGramData::from_text(text, cfg.window, cutoff).unwrap();
                            let backend = ReferenceBackend::new(&cfg).unwrap();
                            train_skipgram(&backend, &data, &cfg).unwrap();
                            eval_vocab_accuracy(&backend, &data.vocab, heldout, cutoff, cfg.dim as usize).unwrap()
                        })
                    })
                    .collect()
            })
            .collect();
        handles
            .into_iter()
            .map(|row| row.into_iter().map(|h| h.join().unwrap()).collect())
            .collect()
    });
    let means: Vec<f64> = acc.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let elapsed = started.elapsed();
    let passed = means.windows(2).all(|w| w[1] >= w[0]) && means[2] - means[0] > MARGIN && elapsed <= MAX_RUNTIME;
    report(
        3,
        passed,
        format!(
            "mean top-1 accuracy for cutoffs 100/1000/unlimited: {means:.4?} (per seed {acc:.4?}) in {elapsed:.1?}"
        ),
    );
    assert!(passed);
}

fn brute_force_top_k(table: &[(EmbeddingKey, Vec<f32>)], act: &[f32], k: usize, has_bias: bool) -> Vec<ScoredKey> {
    let mut all: Vec<ScoredKey> = table
        .iter()
        .map(|(id, v)| ScoredKey {
            id: id.clone(),
            score: score(act, v, has_bias),
        })
        .collect();
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.id.as_bytes().cmp(b.id.as_bytes()))
    });
    all.truncate(k);
    all
}

// 4. Sharded top-k equals a brute-force scan, ties included.
#[test]
fn criterion_04_distributed_top_k_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    let mut mismatches = 0;
    for t in 0..50 {
        let n_keys = rng.random_range(1..=2000);
        let dim = rng.random_range(1..=16u32);
        let has_bias = rng.random_bool(0.5);
        // Small integers force many exact ties.
        let integer = t % 2 == 0;
        let stored = dim as usize + usize::from(has_bias);
        let table: Vec<(EmbeddingKey, Vec<f32>)> = (0..n_keys)
            .map(|i| {
                let v = (0..stored)
                    .map(|_| {
                        if integer {
                            rng.random_range(-2..=2) as f32
                        } else {
                            rng.random_range(-1.0..1.0)
                        }
                    })
                    .collect();
                (key(&format!("t{t}k{i}")), v)
            })
            .collect();
        let acts: Vec<Vec<f32>> = (0..2)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        if integer {
                            rng.random_range(-2..=2) as f32
                        } else {
                            rng.random_range(-1.0..1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        for n in [1, 2, 4, 8] {
            let (_c, client) = in_process(n);
            let handle = client
                .table(TableConfig::new(format!("topk{t}"), dim).with_bias(has_bias))
                .unwrap();
            handle.assign(table.clone(), 1).unwrap();
            for act in &acts {
                for k in [1usize, 5, 50] {
                    let got = handle.top_k(act, k as u32).unwrap();
                    let want = brute_force_top_k(&table, act, k, has_bias);
                    let same = got.len() == want.len()
                        && got
                            .iter()
                            .zip(&want)
                            .all(|(a, b)| a.id == b.id && a.score.to_bits() == b.score.to_bits());
                    checked += 1;
                    mismatches += usize::from(!same);
                }
            }
        }
    }
    let passed = mismatches == 0;
    report(
        4,
        passed,
        format!("{checked} queries over 50 tables × 4 shardings, {mismatches} mismatches"),
    );
    assert!(passed);
}

fn random_index(rng: &mut impl Rng, n: usize) -> Vec<(EmbeddingKey, u64)> {
    (0..n)
        .map(|i| (key(&format!("r{i}")), rng.random_range(0..50)))
        .collect()
}

/// Samples through the sharded path: split the index by owner, sample each
/// shard, merge.
fn sharded_sample(
    index: &[(EmbeddingKey, u64)],
    positives: &[EmbeddingKey],
    num_sampled: usize,
    seed: u64,
    strategy: SamplerStrategy,
    n: u32,
) -> dynembed::Result<Vec<dynembed::sampler::SampledResult>> {
    let positives = dynembed::sampler::distinct(positives);
    let shards: Vec<_> = (0..n)
        .map(|s| {
            let part: Vec<_> = index.iter().filter(|(k, _)| shard_of(k, n) == s).cloned().collect();
            shard_sample(&part, &positives, num_sampled, seed, strategy, 0)
        })
        .collect();
    merge_shard_samples(&positives, &shards, num_sampled, strategy)
}

// 5. Positives appear exactly once; draw frequencies match the strategy.
#[test]
fn criterion_05_sampler_correctness() {
    const CALLS: usize = 10_000;
    const DRAWS: usize = 100_000;
    const SIGNIFICANCE: f64 = 0.001;
    const RATIO_TOL: f64 = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut violations = 0;
    for call in 0..CALLS {
        let n_index = rng.random_range(0..40);
        let index = random_index(&mut rng, n_index);
        let n_pos = rng.random_range(0..8);
        let positives: Vec<EmbeddingKey> = (0..n_pos)
            .map(|_| {
                // Mix resident keys, duplicates and never-seen keys.
                if !index.is_empty() && rng.random_bool(0.7) {
                    index[rng.random_range(0..index.len())].0.clone()
                } else {
                    key(&format!("new{}", rng.random_range(0..4)))
                }
            })
            .collect();
        if index.is_empty() && positives.is_empty() {
            continue;
        }
        let num_sampled = rng.random_range(1..20);
        let strategy = if call % 2 == 0 {
            SamplerStrategy::Uniform
        } else {
            SamplerStrategy::FrequencyPower { power: 0.75 }
        };
        let n = [1, 2, 3, 4][call % 4];
        let out = sharded_sample(&index, &positives, num_sampled, call as u64, strategy, n).unwrap();
        let mut distinct = Vec::new();
        for p in &positives {
            if !distinct.contains(p) {
                distinct.push(p.clone());
            }
        }
        let head_ok = out.len() >= distinct.len()
            && out[..distinct.len()]
                .iter()
                .zip(&distinct)
                .all(|(r, p)| r.is_positive && &r.id == p);
        let tail = &out[distinct.len()..];
        let tail_ok = tail.iter().all(|r| !r.is_positive && !distinct.contains(&r.id));
        let ids: HashSet<&EmbeddingKey> = out.iter().map(|r| &r.id).collect();
        let probs_ok = out.iter().all(|r| r.prob > 0.0 && r.prob <= 1.0);
        if !(head_ok && tail_ok && ids.len() == out.len() && out.len() <= distinct.len() + num_sampled && probs_ok) {
            violations += 1;
        }
    }

    let uniform_index = random_index(&mut rng, 16);
    let mut counts: HashMap<EmbeddingKey, u64> = HashMap::new();
    for i in 0..DRAWS {
        let r = sample(&uniform_index, &[], 1, i as u64, SamplerStrategy::Uniform, 0).unwrap();
        *counts.entry(r[0].id.clone()).or_default() += 1;
    }
    let expected = DRAWS as f64 / 16.0;
    let chi2: f64 = uniform_index
        .iter()
        .map(|(k, _)| {
            let o = *counts.get(k).unwrap_or(&0) as f64;
            (o - expected).powi(2) / expected
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new(15.0).unwrap().cdf(chi2);

    let freq_index: Vec<(EmbeddingKey, u64)> = (0..16).map(|i| (key(&format!("f{i}")), i as u64 + 1)).collect();
    let strategy = SamplerStrategy::FrequencyPower { power: 1.0 };
    let z: f64 = freq_index.iter().map(|(_, f)| strategy_weight(strategy, *f)).sum();
    let mut fcounts: HashMap<EmbeddingKey, u64> = HashMap::new();
    for i in 0..DRAWS {
        let r = sample(&freq_index, &[], 1, 1_000_000 + i as u64, strategy, 0).unwrap();
        *fcounts.entry(r[0].id.clone()).or_default() += 1;
    }
    let worst_ratio = freq_index
        .iter()
        .map(|(k, f)| (*fcounts.get(k).unwrap_or(&0) as f64 / DRAWS as f64 - *f as f64 / z).abs())
        .fold(0.0, f64::max);

    let passed = violations == 0 && p_value > SIGNIFICANCE && worst_ratio <= RATIO_TOL;
    report(
        5,
        passed,
        format!(
            "{violations} positive-handling violations in {CALLS} calls; uniform chi2 {chi2:.2} (p = {p_value:.4}); \
             frequency_power(1) worst ratio error {worst_ratio:.4}"
        ),
    );
    assert!(passed);
}

// 6. Sampling every key turns sampled softmax into the full softmax.
#[test]
fn criterion_06_sampled_softmax_degeneracy() {
    const TOL: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (_c, client) = in_process(2);
    let dim = 4u32;
    let handle = client
        .table(
            TableConfig::new("degenerate", dim)
                .with_bias(true)
                .with_sampler(SamplerStrategy::Uniform),
        )
        .unwrap();
    let vocab: Vec<(EmbeddingKey, Vec<f32>)> = (0..8)
        .map(|i| {
            (
                key(&format!("v{i}")),
                (0..=dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        })
        .collect();
    handle.assign(vocab.clone(), 1).unwrap();
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let act: Vec<f32> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pos = rng.random_range(0..8);
        let sl = handle
            .sampled_logits(vec![act.clone()], vec![vec![vocab[pos].0.clone()]], 8, trial)
            .unwrap();
        assert_eq!(sl.results.len(), 8);
        let (sampled, _) = softmax_cross_entropy(&sl.logits[0], &sl.labels[0]).unwrap();
        let logits: Vec<f64> = vocab
            .iter()
            .map(|(_, w)| act.iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() + w[dim as usize] as f64)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        worst = worst.max((sampled - (lse - logits[pos])).abs());
    }
    let passed = worst <= TOL;
    report(
        6,
        passed,
        format!("max |sampled − full| cross-entropy over 50 cases: {worst:.3e}"),
    );
    assert!(passed);
}

// 7. Optimizer traces equal their recurrences; SGD matches its closed form.
#[test]
fn criterion_07_optimizer_oracles() {
    const STEPS: u64 = 1000;
    const LR: f32 = 0.01;
    const W0: f32 = 1.0;
    const CLOSED_FORM_TOL: f64 = 1e-6;
    let (_c, client) = in_process(1);
    let k = key("scalar");
    let mut detail = Vec::new();
    let mut passed = true;
    for kind in OPTIMIZERS {
        let spec = OptimizerSpec::with_defaults(kind, LR);
        let handle = client
            .table(TableConfig::new(format!("opt_{kind:?}"), 1).with_optimizer(spec))
            .unwrap();
        handle.assign(vec![(k.clone(), vec![W0])], 0).unwrap();
        let mut trace = Vec::new();
        for t in 1..=STEPS {
            let w = handle.lookup_entries(std::slice::from_ref(&k), false).unwrap()[0]
                .as_ref()
                .unwrap()
                .vector[0];
            // Loss w²/2, gradient w.
            handle.apply_gradients(vec![(k.clone(), vec![w])], LR, t, true).unwrap();
            trace.push(
                handle.lookup_entries(std::slice::from_ref(&k), false).unwrap()[0]
                    .as_ref()
                    .unwrap()
                    .vector[0],
            );
        }

        let mut oracle = Vec::new();
        let (mut w, mut acc, mut m) = (W0, spec.adagrad_initial_accumulator, 0.0f32);
        for _ in 0..STEPS {
            let g = w;
            match kind {
                OptimizerKind::Sgd => w -= LR * g,
                OptimizerKind::Adagrad => {
                    acc += g * g;
                    w -= LR * g / acc.sqrt();
                }
                OptimizerKind::Momentum => {
                    m = spec.momentum_coefficient * m + g;
                    w -= LR * m;
                }
            }
            oracle.push(w);
        }
        let ulp_equal = trace.iter().zip(&oracle).all(|(a, b)| a.to_bits() == b.to_bits());
        passed &= ulp_equal;
        detail.push(format!("{kind:?} 0-ULP {ulp_equal}"));
        if kind == OptimizerKind::Sgd {
            let worst = trace
                .iter()
                .enumerate()
                .map(|(t, &w)| {
                    let exact = W0 as f64 * (1.0 - LR as f64).powi(t as i32 + 1);
                    ((w as f64 - exact) / exact).abs()
                })
                .fold(0.0, f64::max);
            passed &= worst <= CLOSED_FORM_TOL;
            detail.push(format!("SGD closed-form worst relative error {worst:.3e}"));
        }
    }
    report(7, passed, detail.join(", "));
    assert!(passed);
}

fn train_some(client: &DynEmbedClient, cfg: &SkipGramConfig, steps: std::ops::Range<u64>) -> ServiceBackend {
    let backend = ServiceBackend::new(client, cfg).unwrap();
    for step in steps {
        train_step(&backend, zipf_data(), cfg, step).unwrap();
    }
    backend
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

// 8. Checkpoints restore exactly, across topologies, and refuse to load when incomplete.
#[test]
fn criterion_08_checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("ckpt");
    let cfg = SkipGramConfig {
        steps: 300,
        ..skipgram_config(OptimizerKind::Adagrad, 8)
    };
    let keys = zipf_data().keys();
    let (_c, client) = in_process(2);
    let original = train_some(&client, &cfg, 0..cfg.steps);
    let manifest = client.save(&ckpt, cfg.steps).unwrap();
    let before = all_entries(&original, &keys);
    let before_stats = client.stats().unwrap();

    let (_c2, same) = in_process(2);
    same.restore(&ckpt).unwrap();
    let same_backend = ServiceBackend::new(&same, &cfg).unwrap();
    let same_ok = all_entries(&same_backend, &keys) == before && same.stats().unwrap() == before_stats;

    let (_c4, wider) = in_process(4);
    wider.restore(&ckpt).unwrap();
    let wider_backend = ServiceBackend::new(&wider, &cfg).unwrap();
    let wider_ok = all_entries(&wider_backend, &keys) == before;

    let files: Vec<String> = manifest.tables.iter().flat_map(|t| t.files.clone()).collect();
    let mut partial_ok = true;
    for (i, f) in files.iter().enumerate() {
        let damaged = tmp.path().join(format!("damaged{i}"));
        copy_dir(&ckpt, &damaged);
        std::fs::remove_file(damaged.join(f)).unwrap();
        let (_c, fresh) = in_process(2);
        partial_ok &= matches!(fresh.restore(&damaged), Err(Error::PartialCheckpoint(_)));
    }
    let passed = same_ok && wider_ok && partial_ok;
    report(
        8,
        passed,
        format!(
            "same topology identical {same_ok}, 2→4 identical {wider_ok}, \
             each of {} deleted snapshots rejected {partial_ok}",
            files.len()
        ),
    );
    assert!(passed);
}

// 9. Export keeps exactly the frequent keys; the admission filter is exact
// when lightly loaded and near its target false-positive rate when full.
#[test]
fn criterion_09_lifetime_management() {
    const FPP: f64 = 0.01;
    const UNSEEN: usize = 100_000;
    let tmp = tempfile::tempdir().unwrap();
    let (_c, client) = in_process(2);
    let cfg = TableConfig::new("lifetime", 3).with_lifetime(LifetimePolicy {
        frequency_cutoff: 5,
        bloom: None,
    });
    let handle = client.table(cfg.clone()).unwrap();
    let mut expected = HashSet::new();
    for i in 0..60u64 {
        let k = key(&format!("l{i}"));
        let freq = i % 11;
        handle.assign(vec![(k.clone(), vec![0.5; 3])], 0).unwrap();
        for step in 0..freq {
            handle
                .apply_gradients(vec![(k.clone(), vec![0.0; 3])], 0.1, step + 1, true)
                .unwrap();
        }
        if freq >= 5 {
            expected.insert(k);
        }
    }
    client.save(&tmp.path().join("c"), 0).unwrap();
    let (_r, restored) = in_process(3);
    restored.restore(&tmp.path().join("c")).unwrap();
    let all: Vec<EmbeddingKey> = (0..60).map(|i| key(&format!("l{i}"))).collect();
    let got: HashSet<EmbeddingKey> = restored
        .table(cfg)
        .unwrap()
        .lookup_entries(&all, false)
        .unwrap()
        .into_iter()
        .zip(&all)
        .filter_map(|(e, k)| e.map(|_| k.clone()))
        .collect();
    let export_ok = got == expected;

    let spec = BloomSpec {
        expected_keys: 10_000,
        target_false_positive_rate: FPP,
        admit_threshold: 3,
    };
    let mut light = CountingBloomFilter::new(&spec);
    let mut exact = true;
    for i in 0..200 {
        let k = key(&format!("light{i}"));
        let sightings: Vec<bool> = (0..4).map(|_| light.admit(&k)).collect();
        exact &= sightings == [false, false, true, true];
    }
    let mut full = CountingBloomFilter::new(&spec);
    for i in 0..spec.expected_keys {
        let k = key(&format!("seen{i}"));
        for _ in 0..spec.admit_threshold {
            full.admit(&k);
        }
    }
    let false_admits = (0..UNSEEN)
        .filter(|i| full.would_admit(&key(&format!("unseen{i}"))))
        .count();
    let rate = false_admits as f64 / UNSEEN as f64;
    let passed = export_ok && exact && rate <= 2.0 * FPP;
    report(
        9,
        passed,
        format!(
            "export kept {} of 60 keys (expected {}), threshold exact {exact}, false-admit rate {rate:.4} (limit {})",
            got.len(),
            expected.len(),
            2.0 * FPP
        ),
    );
    assert!(passed);
}

// 10. Resident entries depend only on which keys were trained.
#[test]
fn criterion_10_memory_independent_of_topology() {
    const STEPS: u64 = 300;
    let data = zipf_data();
    let cfg = SkipGramConfig {
        steps: STEPS,
        ..skipgram_config(OptimizerKind::Sgd, 10)
    };
    let mut centers = HashSet::new();
    let mut contexts = HashSet::new();
    for step in 0..STEPS {
        for i in batch_indices(data.pairs.len(), step, cfg.batch, cfg.seed) {
            centers.insert(data.pairs[i].0.clone());
            contexts.insert(data.pairs[i].1.clone());
        }
    }
    let expected = (centers.len() + contexts.len()) as u64;
    let mut observed = Vec::new();
    let mut registry_only = true;
    for workers in [1, 2, 4] {
        for clients in [1usize, 2, 4] {
            let (cluster, admin) = in_process(workers);
            let master: Arc<dyn Handler> = cluster.master.clone();
            let expected_ids = vec![cfg.input_table().table_id(), cfg.output_table().table_id()];
            let registries: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..clients)
                    .map(|c| {
                        let master = master.clone();
                        let cfg = &cfg;
                        s.spawn(move || {
                            let client = DynEmbedClient::with_handler(master);
                            let backend = ServiceBackend::new(&client, cfg).unwrap();
                            for step in (c as u64..STEPS).step_by(clients) {
                                train_step(&backend, data, cfg, step).unwrap();
                            }
                            client.registry()
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
            // Clients hold table identities only, never embedding state.
            registry_only &= registries.iter().all(|r| *r == expected_ids);
            let resident: u64 = admin.stats().unwrap().iter().map(|t| t.resident).sum();
            observed.push(((workers, clients), resident));
        }
    }
    let passed = observed.iter().all(|&(_, r)| r == expected) && registry_only;
    report(
        10,
        passed,
        format!("expected {expected} resident entries; observed (workers, clients) → count: {observed:?}"),
    );
    assert!(passed);
}

// 11. A sandbox server rejects every mutation and its contents stay put.
#[test]
fn criterion_11_sandbox_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("ckpt");
    let table = TableConfig::new("served", 4);
    {
        let (_c, client) = in_process(2);
        let h = client.table(table.clone()).unwrap();
        h.assign(
            (0..100).map(|i| (key(&format!("s{i}")), vec![i as f32; 4])).collect(),
            1,
        )
        .unwrap();
        client.save(&ckpt, 1).unwrap();
    }
    let workers: Vec<Arc<Worker>> = (0..2)
        .map(|i| {
            let w = Worker::new(WorkerOptions {
                shard_id: i,
                sandbox: true,
                ..Default::default()
            });
            w.preload_checkpoint(&ckpt, 2).unwrap();
            Arc::new(w)
        })
        .collect();
    let master = Arc::new(Master::new(
        workers.iter().map(|w| w.clone() as Arc<dyn Handler>).collect(),
    ));
    let client = DynEmbedClient::with_handler(master.clone());
    let h = client.table(table.clone()).unwrap();
    let before = client.stats().unwrap();

    let rejected = |r: dynembed::Result<_>| matches!(r, Err(Error::SandboxViolation(_)));
    let attacks: Vec<(&str, bool)> = vec![
        (
            "gradient update",
            rejected(
                h.apply_gradients(vec![(key("s1"), vec![1.0; 4])], 0.1, 2, true)
                    .map(|_| ()),
            ),
        ),
        (
            "assign",
            rejected(h.assign(vec![(key("s2"), vec![9.0; 4])], 2).map(|_| ())),
        ),
        (
            "assign new key",
            rejected(h.assign(vec![(key("intruder"), vec![9.0; 4])], 2).map(|_| ())),
        ),
        ("restore", rejected(client.restore(&ckpt).map(|_| ()))),
        (
            "create memory table",
            rejected(client.table(TableConfig::new("other", 4)).map(|_| ())),
        ),
        (
            "direct worker update",
            rejected(
                workers[0]
                    .handle(Request::Update {
                        table: "served".into(),
                        mode: UpdateMode::Assign,
                        pairs: vec![(key("s3"), vec![0.0; 4])],
                        learning_rate: 0.0,
                        global_step: 3,
                        update_frequency: false,
                    })
                    .map(|_| ()),
            ),
        ),
        (
            "direct worker import",
            rejected(
                workers[1]
                    .handle(Request::ImportShard {
                        table: "served".into(),
                        paths: CheckpointManifest::read(&ckpt).unwrap().tables[0]
                            .files
                            .iter()
                            .map(|f| ckpt.join(f).to_string_lossy().into_owned())
                            .collect(),
                    })
                    .map(|_| ()),
            ),
        ),
        (
            "lookup with create",
            h.lookup_entries(&[key("ghost")], true).is_ok()
                && h.lookup_entries(&[key("ghost")], false).unwrap()[0].is_none(),
        ),
    ];
    let after = client.stats().unwrap();
    let failed: Vec<&str> = attacks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let passed = failed.is_empty() && before == after;
    report(
        11,
        passed,
        format!(
            "{} attacks, not rejected: {failed:?}; digest before {:016x} after {:016x}",
            attacks.len(),
            before[0].content_digest,
            after[0].content_digest
        ),
    );
    assert!(passed);
}

// 12. The cell property suite passes quickly.
#[test]
fn criterion_12_dyncell_suite() {
    const MAX_RUNTIME: Duration = Duration::from_secs(60);
    let started = Instant::now();
    let results = dyncell::verify::run_suite(0);
    let elapsed = started.elapsed();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let passed = failed.is_empty() && elapsed <= MAX_RUNTIME;
    report(
        12,
        passed,
        format!("{} checks, failed {failed:?}, in {elapsed:.1?}", results.len()),
    );
    assert!(passed);
}

struct WorkerProcess {
    child: Child,
    addr: String,
}

impl WorkerProcess {
    fn spawn(port: u16, shard: u32, dir: &Path) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_dynembed-worker"))
            .args(["--port", &port.to_string(), "--shard-id", &shard.to_string()])
            .arg("--backend")
            .arg(format!("file:{}", dir.display()))
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("start worker");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let addr = line
            .split_whitespace()
            .last()
            .expect("worker prints its address")
            .to_string();
        Self { child, addr }
    }

    fn port(&self) -> u16 {
        self.addr.rsplit(':').next().unwrap().parse().unwrap()
    }
}

impl Drop for WorkerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

// 13. Killing and restarting a file-backed worker loses no acknowledged update.
#[test]
fn criterion_13_crash_restart() {
    const STEPS: u64 = 1200;
    const KILL_AT: u64 = 400;
    const OUTAGE_STEPS: u64 = 10;
    let tmp = tempfile::tempdir().unwrap();
    let data = zipf_data();
    let keys = data.keys();
    let cfg = SkipGramConfig {
        steps: STEPS,
        ..skipgram_config(OptimizerKind::Sgd, 13)
    };
    let heldout = ZipfCorpus::default().heldout(500, 13);
    let dirs: Vec<_> = (0..2).map(|i| tmp.path().join(format!("w{i}"))).collect();
    let mut procs: Vec<WorkerProcess> = (0..2).map(|i| WorkerProcess::spawn(0, i, &dirs[i as usize])).collect();
    let handlers: Vec<Arc<dyn Handler>> = procs
        .iter()
        .enumerate()
        .map(|(i, p)| Arc::new(RemoteHandler::worker(p.addr.clone(), i as u32)) as Arc<dyn Handler>)
        .collect();
    let client = DynEmbedClient::with_handler(Arc::new(Master::new(handlers)));
    let backend = ServiceBackend::new(&client, &cfg).unwrap();
    for step in 0..KILL_AT {
        train_step(&backend, data, &cfg, step).unwrap();
    }
    let acknowledged = all_entries(&backend, &keys);

    let port = procs[1].port();
    procs[1].child.kill().unwrap();
    procs[1].child.wait().unwrap();
    let outage: Vec<u64> = (KILL_AT..KILL_AT + OUTAGE_STEPS).collect();
    let outage_rejected = outage.iter().all(|&step| {
        matches!(
            train_step(&backend, data, &cfg, step),
            Err(Error::WorkerUnreachable { shard: 1, .. })
        )
    });
    procs[1] = WorkerProcess::spawn(port, 1, &dirs[1]);
    let recovered = all_entries(&backend, &keys) == acknowledged;
    for step in KILL_AT + OUTAGE_STEPS..STEPS {
        train_step(&backend, data, &cfg, step).unwrap();
    }
    let stats = client.stats().unwrap();
    let accuracy = eval_vocab_accuracy(&backend, &data.vocab, &heldout, None, cfg.dim as usize).unwrap();

    // The same run without a crash, skipping the steps issued during the outage.
    let (_c, clean_client) = in_process(2);
    let clean = ServiceBackend::new(&clean_client, &cfg).unwrap();
    for step in (0..STEPS).filter(|s| !outage.contains(s)) {
        train_step(&clean, data, &cfg, step).unwrap();
    }
    let clean_stats = clean_client.stats().unwrap();
    let clean_accuracy = eval_vocab_accuracy(&clean, &data.vocab, &heldout, None, cfg.dim as usize).unwrap();

    let same_tables = stats == clean_stats;
    let passed = outage_rejected && recovered && same_tables && accuracy == clean_accuracy;
    report(
        13,
        passed,
        format!(
            "outage steps rejected {outage_rejected}, acknowledged state recovered {recovered}, \
             final tables match run without the outage steps {same_tables}, accuracy {accuracy:.4} vs {clean_accuracy:.4}"
        ),
    );
    assert!(passed);
}
