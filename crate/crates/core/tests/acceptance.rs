//! Prints one PASS/FAIL line per acceptance criterion and exits non-zero if
//! any criterion fails.

// Oracles index explicitly on purpose.
#![allow(clippy::needless_range_loop)]

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rptm_core::config::RunConfig;
use rptm_core::evalrank::{
    cmc, evaluate_embeddings, joint_distances, k_reciprocal_rerank, load_split, mean_average_precision,
    pairwise_distances, rank, rerank_parts, RerankConfig,
};
use rptm_core::features::{extract, FeatureConfig};
use rptm_core::gmsmatch::{gms_verify, match_brute_force, GmsConfig, Match};
use rptm_core::learn::{forward, train, train_on_vectors, window_means, EpochRecord, TrainConfig};
use rptm_core::mining::{select_positive, MiningConfig, PositiveStrategy};
use rptm_core::pipeline::{embed_manifest, evaluate_split};
use rptm_core::relational::{build_relational_matrix, load_matrix, save_matrix, DatasetManifest, TauPolicy};
use rptm_core::synth::{
    cluster_relational_matrix, generate_dataset, generate_embeddings, render_dataset, ClusterSpec, EmbeddingSet,
    SynthSpec,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn run(n: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => Outcome {
            pass: false,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
            ),
        },
    };
    let took = start.elapsed();
    let in_time = limit.is_none_or(|l| took <= l);
    let pass = out.pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" / {}s", l.as_secs()));
    println!(
        "criterion {n} [{name}]: {} ({}; {:.2}s{budget})",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
    pass
}

fn gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    let mut redraws = 0;
    let seeds = 25;
    for seed in 0..seeds {
        let (p, r) = common::gradcheck::problem(1000 + seed);
        redraws += r;
        worst = worst.max(common::gradcheck::max_relative_error(&p));
    }
    Outcome {
        pass: worst <= 1e-4,
        detail: format!("{seeds} models, max relative error {worst:.2e} <= 1e-4, {redraws} kink redraws"),
    }
}

fn gms_discrimination() -> Outcome {
    let spec = SynthSpec {
        n_ids: 2,
        poses_per_id: 2,
        images_per_pose: 3,
        image_size: 224,
        noise_sigma: 2.0,
        seed: 5,
    };
    let cfg = FeatureConfig::default();
    let gms = GmsConfig::default();
    let feats: Vec<_> = render_dataset(&spec).unwrap().iter().map(|img| extract(img, &cfg).unwrap()).collect();
    let (mut within, mut cross) = (Vec::new(), Vec::new());
    let (mut shuffled_total, mut shuffled_accepted) = (0usize, 0usize);
    for i in 0..feats.len() {
        for j in 0..feats.len() {
            let ((id_i, pose_i, _), (id_j, pose_j, _)) = (spec.layout(i), spec.layout(j));
            if i == j || id_i != id_j {
                continue;
            }
            let matches = match_brute_force(&feats[i], &feats[j]);
            let count = gms_verify(&matches, &feats[i], &feats[j], &gms).unwrap().accepted_count() as f64;
            if pose_i == pose_j {
                within.push(count);
                let perm = common::permutation(feats[j].len(), 1 + (i * 31 + j) as u64);
                let shuffled: Vec<Match> = matches
                    .iter()
                    .map(|m| Match {
                        train_idx: perm[m.train_idx],
                        ..*m
                    })
                    .collect();
                shuffled_total += shuffled.len();
                shuffled_accepted += gms_verify(&shuffled, &feats[i], &feats[j], &gms).unwrap().accepted_count();
            } else {
                cross.push(count);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (w, c) = (mean(&within), mean(&cross));
    let shuffled_rate = shuffled_accepted as f64 / shuffled_total as f64;
    Outcome {
        pass: w >= 10.0 * c && shuffled_rate <= 0.05,
        detail: format!(
            "within-pose mean {w:.1}, cross-pose mean {c:.1} (ratio {:.1} >= 10), shuffled acceptance {:.2}% <= 5%",
            w / c.max(f64::MIN_POSITIVE),
            100.0 * shuffled_rate
        ),
    }
}

fn relational_soundness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_ids: 3,
        poses_per_id: 3,
        images_per_pose: 4,
        image_size: 224,
        noise_sigma: 2.0,
        seed: 5,
    };
    let ds = generate_dataset(&spec, dir.path()).unwrap();
    let mx = build_relational_matrix(&ds.manifest, &FeatureConfig::default(), &GmsConfig::default()).unwrap();
    let groups = ds.group_labels(spec.poses_per_id);
    let (mut anchors, mut sound) = (0, 0);
    for a in 0..ds.manifest.len() {
        if let Some(p) = select_positive(&mx, a, TauPolicy::Mean, 10.0).unwrap() {
            anchors += 1;
            sound += (groups[p] == groups[a]) as usize;
        }
    }
    let rate = sound as f64 / anchors as f64;
    Outcome {
        pass: anchors == ds.manifest.len() && rate >= 0.9,
        detail: format!(
            "{sound}/{anchors} mined positives share the anchor's pose group ({:.1}% >= 90%), {} images",
            100.0 * rate,
            ds.manifest.len()
        ),
    }
}

fn benchmark_spec(first_id: usize) -> ClusterSpec {
    ClusterSpec {
        n_ids: 10,
        first_id,
        poses_per_id: 2,
        points_per_pose: 10,
        dim: 32,
        within_sigma: 0.1,
        center_distance: 1.0,
        pose_distance: 1.0,
    }
}

/// Trains on ids `0..10` and scores held-out ids `10..20`: first instance of
/// every cluster is a query, the rest gallery.
fn benchmark_run(seed: u64, strategy: PositiveStrategy, lambda_tri: f64) -> (f64, Vec<EpochRecord>) {
    let train_set = generate_embeddings(&benchmark_spec(0), seed).unwrap();
    let test_set = generate_embeddings(&benchmark_spec(10), seed).unwrap();
    let mx = cluster_relational_matrix(&train_set, 20, 40.0).unwrap();
    let (labels, classes) = train_set.dense_labels();
    let cfg = TrainConfig {
        epochs: 20,
        lambda_tri,
        seed,
        ..TrainConfig::default()
    };
    let mining = MiningConfig {
        positive: strategy,
        ..MiningConfig::default()
    };
    let out = train_on_vectors(&train_set.vectors, &labels, classes, &mx, &mining, &cfg, |_| {}).unwrap();
    let emb: Vec<Vec<f64>> = test_set.vectors.iter().map(|x| forward(&out.model, x).unwrap().0).collect();
    (held_out_map(&test_set, &emb), out.history)
}

fn held_out_map(set: &EmbeddingSet, emb: &[Vec<f64>]) -> f64 {
    let (mut q, mut q_ids, mut g, mut g_ids) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..set.len() {
        if set.instances[i] == 0 {
            q.push(emb[i].clone());
            q_ids.push(set.ids[i]);
        } else {
            g.push(emb[i].clone());
            g_ids.push(set.ids[i]);
        }
    }
    evaluate_embeddings(&q, &q_ids, &g, &g_ids, None).unwrap().map
}

fn descends(history: &[EpochRecord]) -> bool {
    window_means(history, 5).windows(2).all(|w| w[1] < w[0])
}

fn ablation_direction() -> Outcome {
    let seeds = 0..5u64;
    let (mut rptm, mut random) = (Vec::new(), Vec::new());
    let mut monotone = true;
    for seed in seeds {
        let (m, h) = benchmark_run(seed, PositiveStrategy::Relational, 2.0);
        monotone &= descends(&h);
        rptm.push(m);
        let (m, h) = benchmark_run(seed, PositiveStrategy::RandomSameId, 2.0);
        monotone &= descends(&h);
        random.push(m);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&rptm), mean(&random));
    Outcome {
        pass: a >= b && monotone,
        detail: format!(
            "held-out mAP RPTM_mean {a:.4} >= random same-id {b:.4}; 5-epoch window descent in all 10 runs: {monotone}"
        ),
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut agree = 0;
    for _ in 0..100 {
        let (d, q_ids, g_ids) = common::eval::instance(&mut rng);
        let r = rank(&d, &q_ids, &g_ids).unwrap();
        let ok = (1..=10).all(|k| cmc(&r, k).unwrap() == common::eval::cmc_oracle(&d, &q_ids, &g_ids, k))
            && mean_average_precision(&r).unwrap() == common::eval::map_oracle(&d, &q_ids, &g_ids);
        agree += ok as usize;
    }
    let hand = rank(
        &rptm_core::evalrank::DistanceMatrix::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap(),
        &[7],
        &[7, 1, 7],
    )
    .unwrap();
    let ap = mean_average_precision(&hand).unwrap();
    Outcome {
        pass: agree == 100 && (ap - 0.833_333).abs() <= 1e-6,
        detail: format!("{agree}/100 instances equal the scan oracles exactly; ranks 1,3 -> AP {ap:.6}"),
    }
}

fn reranking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut preserved = true;
    for _ in 0..20 {
        let (nq, ng) = (rng.random_range(1..5), rng.random_range(4..30));
        let pts: Vec<Vec<f64>> = (0..nq + ng).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let all = joint_distances(&pts[..nq], &pts[nq..]).unwrap();
        let re = k_reciprocal_rerank(&all, nq, &RerankConfig { k1: 6, k2: 3, eta: 1.0 }).unwrap();
        let plain = pairwise_distances(&pts[..nq], &pts[nq..]).unwrap();
        let ids = vec![0; ng];
        preserved &= rank(&re, &vec![0; nq], &ids).unwrap().orders == rank(&plain, &vec![0; nq], &ids).unwrap().orders;
    }
    let pts = common::eval::toy_points();
    let all = joint_distances(&pts[..2], &pts[2..]).unwrap();
    let mut worst = 0.0f64;
    for (k1, k2) in [(2, 1), (3, 2), (4, 2), (5, 3)] {
        let parts = rerank_parts(&all, 2, k1, k2).unwrap();
        let oracle = common::eval::jaccard_oracle(&all, 2, k1, k2);
        for q in 0..2 {
            for g in 0..6 {
                worst = worst.max((parts.jaccard.get(q, g) - oracle[q][g]).abs());
            }
        }
    }
    let big: Vec<Vec<f64>> = (0..150).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let vehicle = RerankConfig { k1: 60, k2: 15, eta: 0.2 };
    let ran = vehicle.validate().is_ok()
        && k_reciprocal_rerank(&joint_distances(&big[..30], &big[30..]).unwrap(), 30, &vehicle)
            .map(|d| d.data.iter().all(|v| v.is_finite()))
            .unwrap_or(false);
    Outcome {
        pass: preserved && worst <= 1e-9 && ran,
        detail: format!(
            "eta=1 keeps every ordering: {preserved}; toy Jaccard max deviation {worst:.1e} <= 1e-9; k1=60 k2=15 eta=0.2 runs: {ran}"
        ),
    }
}

fn hyperparameters() -> Outcome {
    let golden = include_str!("golden/default_run_config.json");
    let text = RunConfig::default().to_json();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let t = &v["train"];
    let expected = [
        ("lr0", 0.005),
        ("lr_decay_factor", 0.1),
        ("lr_step", 20.0),
        ("epochs", 80.0),
        ("batch_size", 24.0),
        ("margin", 0.3),
        ("lambda_tri", 2.0),
        ("lambda_ent", 0.5),
        ("momentum", 0.9),
        ("weight_decay", 5e-4),
    ];
    let wrong: Vec<&str> = expected
        .iter()
        .filter(|(k, val)| t[*k].as_f64() != Some(*val))
        .map(|(k, _)| *k)
        .collect();
    Outcome {
        pass: text == golden && wrong.is_empty(),
        detail: format!(
            "default config matches golden file byte for byte: {}; mismatched values: {wrong:?}",
            text == golden
        ),
    }
}

fn lambda_sensitivity() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for lambda in [0.5, 1.0, 2.0] {
        let (map, history) = benchmark_run(0, PositiveStrategy::Relational, lambda);
        let d = descends(&history);
        ok &= d && map.is_finite() && history.len() == 20;
        parts.push(format!("lambda_tri={lambda}: mAP {map:.4}, window descent {d}"));
    }
    Outcome {
        pass: ok,
        detail: parts.join("; "),
    }
}

fn pipeline_metrics(root: &Path) -> String {
    let spec = SynthSpec {
        n_ids: 3,
        poses_per_id: 2,
        images_per_pose: 4,
        image_size: 96,
        noise_sigma: 2.0,
        seed: 11,
    };
    let ds = generate_dataset(&spec, root.join("data")).unwrap();
    let manifest = DatasetManifest::load(root.join("data/manifest.csv")).unwrap();
    let cfg = RunConfig {
        features: FeatureConfig {
            match_size: (96, 96),
            ..FeatureConfig::default()
        },
        train: TrainConfig {
            epochs: 4,
            p: 3,
            k: 4,
            batch_size: 12,
            input_size: 96,
            seed: 11,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    let mx = build_relational_matrix(&manifest, &cfg.features, &cfg.gms).unwrap();
    save_matrix(&mx, root.join("matrix.bin")).unwrap();
    let mx = load_matrix(root.join("matrix.bin")).unwrap();
    let out = train(&manifest, &mx, &cfg.mining, &cfg.train, |_| {}).unwrap();
    out.model.save(root.join("model.bin")).unwrap();
    let model = rptm_core::learn::EmbeddingModel::load(root.join("model.bin")).unwrap();
    let emb = embed_manifest(&model, &manifest, cfg.train.input_size).unwrap();
    let split = load_split(ds.dir.join("split.csv")).unwrap();
    let plain = evaluate_split(&emb, &split, None).unwrap();
    let re = evaluate_split(&emb, &split, Some(&RerankConfig { k1: 6, k2: 3, eta: 0.2 })).unwrap();
    plain.to_csv() + &re.to_csv()
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (x, y) = (pipeline_metrics(a.path()), pipeline_metrics(b.path()));
    Outcome {
        pass: x == y && x.contains("mAP"),
        detail: format!("two synth -> matrix -> train -> eval runs give identical metric CSVs: {}", x == y),
    }
}

fn main() {
    let results = [
        run(1, "gradient correctness", Some(Duration::from_secs(10)), gradient_check),
        run(2, "GMS discrimination", Some(Duration::from_secs(60)), gms_discrimination),
        run(3, "relational-triplet soundness", None, relational_soundness),
        run(4, "ablation direction", Some(Duration::from_secs(120)), ablation_direction),
        run(5, "metric oracles", None, metric_oracles),
        run(6, "re-ranking", None, reranking),
        run(7, "hyperparameter fidelity", None, hyperparameters),
        run(8, "lambda_tri sensitivity", None, lambda_sensitivity),
        run(9, "determinism", None, determinism),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
