//! End-to-end acceptance checks. Each test prints one `[PASS]` or `[FAIL]`
//! line to stderr, bypassing the test harness capture.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use common::*;
use crossband::data::Domain;
use crossband::eval::{cmc, mean_average_precision, SimilarityMatrix};
use crossband::harness::{cmd_synth, cmd_train, compare_runs, rerun, RunConfig, TrainOutput};
use crossband::model::{average_local, BodyTransformer, LoraConfig, ModelConfig, Region};
use crossband::training::{
    batch_hard_triplet_loss, domain_aware_batches, mining_statistics, train, BatchSpec,
    MiningStats, TrainConfig,
};
use rand::Rng;

fn report(name: &str, pass: bool, detail: impl AsRef<str>) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let line = format!("[{tag}] {name}: {}\n", detail.as_ref());
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(pass, "{name}: {}", detail.as_ref());
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1()
        .unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    flat(a)
        .iter()
        .zip(flat(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn random_patches(cfg: &ModelConfig, b: usize, dtype: DType, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = b * cfg.n_patches() * cfg.patch_dim();
    let data: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, (b, cfg.n_patches(), cfg.patch_dim()), &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

#[test]
fn loss_gradients_agree_with_finite_differences() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let p = loss_problem(seed);
        for kind in [LossKind::Identity, LossKind::Triplet, LossKind::Combined] {
            worst = worst.max(loss_gradient_error(&p, kind, 1e-6));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "loss gradients",
        worst < 1e-4 && secs < 10.0,
        format!("max rel error {worst:.2e} (< 1e-4), {secs:.2}s (< 10s)"),
    );
}

#[test]
fn ranking_metrics_agree_with_brute_force() {
    let start = Instant::now();
    let (mut cmc_mismatch, mut map_err, mut instances) = (0, 0.0f64, 0);
    for seed in 0..200u64 {
        let mut r = rng(1000 + seed);
        let nq = r.random_range(1..=20);
        let ng = r.random_range(1..=50);
        let subjects = r.random_range(1..=ng);
        let gs: Vec<String> = (0..ng).map(|j| format!("p{}", j % subjects)).collect();
        let qs: Vec<String> = (0..nq).map(|_| gs[r.random_range(0..ng)].clone()).collect();
        let coarse = seed % 2 == 0;
        let values: Vec<Vec<f64>> = (0..nq)
            .map(|_| {
                (0..ng)
                    .map(|_| {
                        let v: f64 = r.random_range(-1.0..1.0);
                        if coarse {
                            (v * 3.0).round() / 3.0
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        let excluded: Vec<Vec<bool>> = (0..nq)
            .map(|_| (0..ng).map(|_| r.random_bool(0.1)).collect())
            .collect();
        let sim = SimilarityMatrix {
            row_labels: (0..nq).map(|i| format!("q{i}")).collect(),
            col_labels: (0..ng).map(|j| format!("g{j:02}")).collect(),
            values,
        };
        let k = ng.min(20);
        if cmc(&sim, &qs, &gs, k).unwrap() != oracle_cmc(&sim, &qs, &gs, k) {
            cmc_mismatch += 1;
        }
        let (om, scored, _) = oracle_map(&sim, &qs, &gs, &excluded);
        if scored > 0 {
            let m = mean_average_precision(&sim, &qs, &gs, Some(&excluded)).unwrap();
            map_err = map_err.max((m.map - om).abs());
        }
        instances += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "ranking metrics",
        cmc_mismatch == 0 && map_err <= 1e-9 && secs < 30.0,
        format!("{instances} instances, {cmc_mismatch} CMC mismatches, max mAP error {map_err:.1e}, {secs:.2}s"),
    );
}

#[test]
fn mining_matches_exhaustive_recomputation() {
    let mut mismatches = 0;
    for seed in 0..50u64 {
        let mut r = rng(2000 + seed);
        let (ids, per) = (r.random_range(2..7), r.random_range(2..5));
        let n = ids * per;
        let labels: Vec<usize> = (0..n).map(|i| i / per).collect();
        let domains: Vec<Domain> = (0..n).map(|_| Domain::ALL[r.random_range(0..4)]).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..8)
                    .map(|_| r.random_range(-4i32..5) as f64 * 0.25)
                    .collect()
            })
            .collect();
        let t = Tensor::new(rows.clone(), &Device::Cpu).unwrap();
        let (_, rec) = batch_hard_triplet_loss(&t, &labels, &domains, 0.0).unwrap();
        let oracle = brute_force_mining(&rows, &labels);
        let selections_agree = rec.anchors.len() == n
            && rec
                .anchors
                .iter()
                .zip(&oracle)
                .enumerate()
                .all(|(i, (a, o))| {
                    a.anchor == i
                        && (a.positive, a.negative) == (o.0, o.1)
                        && a.positive_distance == o.2
                        && a.negative_distance == o.3
                        && a.anchor_domain == domains[i]
                        && a.positive_domain == domains[o.0]
                        && a.negative_domain == domains[o.1]
                });
        let pos = (0..n)
            .filter(|&i| domains[oracle[i].0] != domains[i])
            .count();
        let neg = (0..n)
            .filter(|&i| domains[oracle[i].1] == domains[i])
            .count();
        let stats_agree = mining_statistics(std::slice::from_ref(&rec)).unwrap()
            == MiningStats::from_counts(n, pos, neg).unwrap();
        if !(selections_agree && stats_agree) {
            mismatches += 1;
        }
    }
    report(
        "batch-hard mining",
        mismatches == 0,
        format!("50 batches, {mismatches} mismatches"),
    );
}

#[test]
fn domain_aware_sampler_covers_all_domains() {
    // s03 and s08 lack LWIR; s07 has a single VIS image but stays eligible
    let m = sampler_manifest(12, 3, &[3, 8], &[7]);
    let spec = BatchSpec {
        p: 4,
        k: 8,
        domain_aware: true,
        seed: 17,
    };
    let sampler = domain_aware_batches(&m, &spec).unwrap();
    let (mut good, mut leaked) = (0, 0);
    for batch in sampler.stream().take(1000) {
        let mut per_subject: BTreeMap<&str, Vec<Domain>> = BTreeMap::new();
        for &i in &batch {
            let r = &m.records()[i];
            per_subject
                .entry(r.subject_id.as_str())
                .or_default()
                .push(r.domain);
        }
        if per_subject.contains_key("s03") || per_subject.contains_key("s08") {
            leaked += 1;
        }
        let complete = per_subject.len() == 4
            && per_subject.values().all(|ds| {
                Domain::ALL
                    .iter()
                    .all(|d| ds.iter().filter(|&&x| x == *d).count() == 2)
            });
        good += complete as usize;
    }
    report(
        "domain-aware sampler",
        good == 1000 && leaked == 0,
        format!("{good}/1000 batches complete, {leaked} with ineligible subjects"),
    );
}

#[test]
fn lora_adapters_preserve_and_merge() {
    let cfg = ModelConfig::compact(64, 32, 8, 32, 2, 4, 4);
    let base = BodyTransformer::new(&cfg, DType::F32, 31).unwrap();
    let lora = LoraConfig {
        rank: 4,
        alpha: 8.0,
        seed: 9,
    };
    let mut adapted = base.clone();
    adapted.apply_lora(&lora).unwrap();
    let mut fresh: f64 = 0.0;
    let mut r = rng(5);
    for i in 0..10 {
        let x = random_patches(&cfg, 4, DType::F32, 300 + i);
        fresh = fresh.max(max_abs_diff(
            &base.forward(&x).unwrap().z_final,
            &adapted.forward(&x).unwrap().z_final,
        ));
    }
    for (_, v) in adapted.lora_vars() {
        let noise: Vec<f32> = (0..v.elem_count())
            .map(|_| r.random_range(-0.2f32..0.2))
            .collect();
        v.set(&Tensor::from_vec(noise, v.dims(), &Device::Cpu).unwrap())
            .unwrap();
    }
    let merged = adapted.merge_lora().unwrap();
    let mut merge_err: f64 = 0.0;
    for i in 0..100 {
        let x = random_patches(&cfg, 1, DType::F32, 400 + i);
        merge_err = merge_err.max(max_abs_diff(
            &adapted.forward(&x).unwrap().z_final,
            &merged.forward(&x).unwrap().z_final,
        ));
    }

    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(&dir.path().join("data"), 12);
    let mut model = BodyTransformer::new(&tiny_model(4), DType::F32, 12).unwrap();
    let before: Vec<Vec<u32>> = model
        .base_vars()
        .iter()
        .map(|(_, v)| {
            flat(v.as_tensor())
                .iter()
                .map(|&x| (x as f32).to_bits())
                .collect()
        })
        .collect();
    let tc = TrainConfig {
        epochs: 2,
        learning_rate: 1e-2,
        batch: BatchSpec {
            p: 2,
            k: 4,
            domain_aware: true,
            seed: 12,
        },
        lora: Some(lora),
        ..Default::default()
    };
    train(&mut model, &m, &tc, &dir.path().join("run")).unwrap();
    let changed = model
        .base_vars()
        .iter()
        .zip(&before)
        .filter(|((_, v), b)| {
            flat(v.as_tensor())
                .iter()
                .map(|&x| (x as f32).to_bits())
                .collect::<Vec<_>>()
                != **b
        })
        .count();
    report(
        "LoRA adapters",
        fresh <= 1e-6 && merge_err <= 1e-5 && changed == 0,
        format!("fresh diff {fresh:.1e} (<= 1e-6), merge diff {merge_err:.1e} (<= 1e-5), {changed} base tensors changed"),
    );
}

#[test]
fn token_layout_and_region_features() {
    let full = ModelConfig::default();
    let tokens = full.n_tokens();
    let model = BodyTransformer::new(&full, DType::F32, 0).unwrap();
    let x = random_patches(&full, 1, DType::F32, 1);
    let out = model.forward(&x).unwrap();
    let dims = (out.z_global.dims()[1], out.z_final.dims()[1]);
    let local = average_local(&out.z_face, &out.z_torso, &out.z_lower).unwrap();
    let exact_mean = flat(&local)
        .iter()
        .zip(flat(&out.z_local))
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let mut cfg = ModelConfig::compact(64, 32, 8, 16, 2, 2, 4);
    cfg.patches_attend_global = false;
    let small = BodyTransformer::new(&cfg, DType::F64, 3).unwrap();
    let x = random_patches(&cfg, 1, DType::F64, 2);
    let base = small.forward(&x).unwrap();
    let mut violations = 0;
    for p in 0..cfg.n_patches() {
        let mut v = flat(&x);
        for j in 0..cfg.patch_dim() {
            v[p * cfg.patch_dim() + j] += 0.5;
        }
        let y = small
            .forward(&Tensor::from_vec(v, x.dims(), &Device::Cpu).unwrap())
            .unwrap();
        for region in Region::ALL {
            let moved = max_abs_diff(base.region(region), y.region(region)) > 0.0;
            if moved != cfg.region_mask(region).patches.contains(&p) {
                violations += 1;
            }
        }
    }
    let full_small =
        BodyTransformer::new(&ModelConfig::compact(64, 32, 8, 16, 2, 2, 4), DType::F64, 3).unwrap();
    let face = *cfg.region_mask(Region::Face).patches.iter().next().unwrap();
    let mut v = flat(&x);
    v[face * cfg.patch_dim()] += 0.5;
    let nudged = Tensor::from_vec(v, x.dims(), &Device::Cpu).unwrap();
    let face_moves = max_abs_diff(
        &full_small.forward(&x).unwrap().z_face,
        &full_small.forward(&nudged).unwrap().z_face,
    ) > 0.0;
    report(
        "token layout",
        tokens == 196 && dims == (768, 1536) && exact_mean && violations == 0 && face_moves,
        format!(
            "{tokens} tokens, dim(z_global)={}, dim(z_final)={}, z_local exact mean: {exact_mean}, {violations} locality violations, face token reacts to face patch: {face_moves}",
            dims.0, dims.1
        ),
    );
}

struct Smoke {
    _dir: tempfile::TempDir,
    root: PathBuf,
    out: TrainOutput,
    elapsed: Duration,
}

fn smoke() -> &'static Smoke {
    static SMOKE: OnceLock<Smoke> = OnceLock::new();
    SMOKE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let start = Instant::now();
        let mut cfg = RunConfig::smoke();
        cfg.data = Some(cmd_synth(&cfg, &root.join("data")).unwrap().manifest);
        let out = cmd_train(&cfg, &root.join("train")).unwrap();
        Smoke {
            _dir: dir,
            root,
            out,
            elapsed: start.elapsed(),
        }
    })
}

const PINNED_RANK1: [(Domain, f64); 3] = [
    (Domain::Swir, 0.8),
    (Domain::Mwir, 0.8),
    (Domain::Lwir, 0.9),
];

#[test]
fn smoke_run_identifies_infrared_queries() {
    let s = smoke();
    let report_ = s.out.report.as_ref().unwrap();
    let mut pass = s.elapsed < Duration::from_secs(15 * 60);
    let mut parts = Vec::new();
    for (d, pinned) in PINNED_RANK1 {
        let r1 = report_.domain(d).unwrap().rank1();
        pass &= r1 >= 0.8 && (r1 - pinned).abs() <= 0.05 + 1e-12;
        parts.push(format!("{d} {r1:.2}"));
    }
    report(
        "smoke run",
        pass,
        format!(
            "rank-1 {} (>= 0.8, pinned ±0.05), {:.0}s",
            parts.join(", "),
            s.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn first_epoch_hard_positives_cross_domains() {
    let s = smoke();
    let pct = s.out.epochs[0].pct_hard_pos_cross_domain;
    report(
        "cross-domain hard positives",
        pct > 50.0,
        format!("epoch 1: {pct:.1}% (> 50%)"),
    );
}

#[test]
fn persisted_config_reproduces_metrics() {
    let s = smoke();
    let again = s.root.join("rerun");
    rerun(&s.out.run_dir, &again).unwrap();
    let diff = compare_runs(&s.out.run_dir, &again).unwrap();
    report(
        "reproducibility",
        diff <= 1e-6,
        format!("max metric difference {diff:.1e} (<= 1e-6)"),
    );
}
