//! Independent reference implementations and fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use crossband::data::{
    generate_synthetic_dataset, DatasetManifest, Domain, ImageRecord, Split, SyntheticConfig,
};
use crossband::eval::SimilarityMatrix;
use crossband::harness::RunConfig;
use crossband::model::ModelConfig;
use crossband::training::{batch_hard_triplet_loss, combined_loss, identity_loss, BatchSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- losses

pub struct LossProblem {
    pub features: Vec<Vec<f64>>,
    pub classifier: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub domains: Vec<Domain>,
}

/// 8 samples of 16-dim features, 4 identities with 2 samples each, and a
/// fixed 16 -> 4 linear classifier.
pub fn loss_problem(seed: u64) -> LossProblem {
    let mut r = rng(seed);
    let features = (0..8)
        .map(|_| (0..16).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let classifier = (0..16)
        .map(|_| (0..4).map(|_| r.random_range(-0.5..0.5)).collect())
        .collect();
    let domains = (0..8).map(|_| Domain::ALL[r.random_range(0..4)]).collect();
    LossProblem {
        features,
        classifier,
        labels: vec![0, 0, 1, 1, 2, 2, 3, 3],
        domains,
    }
}

#[derive(Clone, Copy, Debug)]
pub enum LossKind {
    Identity,
    Triplet,
    Combined,
}

fn loss_value(p: &LossProblem, x: &Tensor, kind: LossKind) -> Tensor {
    let w = Tensor::new(p.classifier.clone(), &Device::Cpu).unwrap();
    let id = || identity_loss(&x.matmul(&w).unwrap(), &p.labels).unwrap();
    let tri = || {
        batch_hard_triplet_loss(x, &p.labels, &p.domains, 0.0)
            .unwrap()
            .0
    };
    match kind {
        LossKind::Identity => id(),
        LossKind::Triplet => tri(),
        LossKind::Combined => combined_loss(&id(), &tri(), 1.0).unwrap(),
    }
}

/// Largest elementwise relative error between the autodiff gradient with
/// respect to the features and central finite differences.
pub fn loss_gradient_error(p: &LossProblem, kind: LossKind, h: f64) -> f64 {
    let x = Var::new(p.features.clone(), &Device::Cpu).unwrap();
    let grads = loss_value(p, x.as_tensor(), kind).backward().unwrap();
    let g: Vec<Vec<f64>> = grads.get(&x).unwrap().to_vec2().unwrap();
    let eval = |rows: &Vec<Vec<f64>>| -> f64 {
        let t = Tensor::new(rows.clone(), &Device::Cpu).unwrap();
        loss_value(p, &t, kind)
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar()
            .unwrap()
    };
    let mut worst: f64 = 0.0;
    for i in 0..p.features.len() {
        for j in 0..p.features[i].len() {
            let mut plus = p.features.clone();
            plus[i][j] += h;
            let mut minus = p.features.clone();
            minus[i][j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = g[i][j].abs().max(fd.abs()).max(1e-7);
            worst = worst.max((g[i][j] - fd).abs() / denom);
        }
    }
    worst
}

// ---------------------------------------------------------------- mining

/// Exhaustive batch-hard selection: `(positive, negative)` per anchor, ties
/// to the lowest index.
pub fn brute_force_mining(rows: &[Vec<f64>], labels: &[usize]) -> Vec<(usize, usize, f64, f64)> {
    let n = rows.len();
    let d = |a: usize, b: usize| -> f64 {
        rows[a]
            .iter()
            .zip(&rows[b])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    (0..n)
        .map(|a| {
            let pos: Vec<usize> = (0..n)
                .filter(|&j| j != a && labels[j] == labels[a])
                .collect();
            let neg: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
            let far = pos.iter().copied().fold(
                pos[0],
                |best, j| if d(a, j) > d(a, best) { j } else { best },
            );
            let near =
                neg.iter().copied().fold(
                    neg[0],
                    |best, j| if d(a, j) < d(a, best) { j } else { best },
                );
            (far, near, d(a, far), d(a, near))
        })
        .collect()
}

// ---------------------------------------------------------------- ranking

/// Strict "ranks before" relation: higher score, then smaller label, then
/// smaller index.
fn before(sim: &SimilarityMatrix, i: usize, a: usize, b: usize) -> bool {
    let (sa, sb) = (sim.values[i][a], sim.values[i][b]);
    if sa != sb {
        return sa > sb;
    }
    let (la, lb) = (&sim.col_labels[a], &sim.col_labels[b]);
    if la != lb {
        return la < lb;
    }
    a < b
}

/// CMC by counting, for each query, how many columns outrank its best match.
pub fn oracle_cmc(sim: &SimilarityMatrix, qs: &[String], gs: &[String], k_max: usize) -> Vec<f64> {
    let g = gs.len();
    let ranks: Vec<usize> = (0..qs.len())
        .map(|i| {
            (0..g)
                .filter(|&j| gs[j] == qs[i])
                .map(|j| 1 + (0..g).filter(|&k| before(sim, i, k, j)).count())
                .min()
                .unwrap()
        })
        .collect();
    (1..=k_max.min(g))
        .map(|k| ranks.iter().filter(|&&r| r <= k).count() as f64 / qs.len() as f64)
        .collect()
}

/// Mean average precision by direct summation over relevant items. Returns
/// `(map, scored, skipped)`.
pub fn oracle_map(
    sim: &SimilarityMatrix,
    qs: &[String],
    gs: &[String],
    excluded: &[Vec<bool>],
) -> (f64, usize, usize) {
    let g = gs.len();
    let (mut total, mut scored, mut skipped) = (0.0, 0, 0);
    for i in 0..qs.len() {
        let kept: Vec<usize> = (0..g).filter(|&j| !excluded[i][j]).collect();
        let relevant: Vec<usize> = kept.iter().copied().filter(|&j| gs[j] == qs[i]).collect();
        if relevant.is_empty() {
            skipped += 1;
            continue;
        }
        let position = |j: usize| 1 + kept.iter().filter(|&&k| before(sim, i, k, j)).count();
        let mut ap = 0.0;
        for &j in &relevant {
            let pj = position(j);
            let hits = relevant.iter().filter(|&&r| position(r) <= pj).count();
            ap += hits as f64 / pj as f64;
        }
        total += ap / relevant.len() as f64;
        scored += 1;
    }
    (total / scored as f64, scored, skipped)
}

// ---------------------------------------------------------------- fixtures

/// Image-less manifest with `per_domain` records per subject and domain.
/// Subjects in `missing_lwir` have no LWIR media; subjects in `single` have
/// only one image in VIS.
pub fn sampler_manifest(
    n: usize,
    per_domain: usize,
    missing_lwir: &[usize],
    single: &[usize],
) -> DatasetManifest {
    let mut recs = Vec::new();
    for s in 0..n {
        for d in Domain::ALL {
            if d == Domain::Lwir && missing_lwir.contains(&s) {
                continue;
            }
            let count = if d == Domain::Vis && single.contains(&s) {
                1
            } else {
                per_domain
            };
            for k in 0..count {
                recs.push(ImageRecord {
                    subject_id: format!("s{s:02}"),
                    domain: d,
                    template_id: format!("s{s:02}_{d}"),
                    media_id: format!("s{s:02}_{d}_{k}"),
                    image_path: String::new(),
                    bbox: None,
                    split: Split::Train,
                });
            }
        }
    }
    DatasetManifest::new(recs, ".").unwrap()
}

pub fn tiny_synth(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_subjects: 6,
        test_subjects: Some(2),
        images_per_subject_per_domain: 2,
        image_height: 48,
        image_width: 16,
        patch_size: 8,
        seed,
        ..Default::default()
    }
}

pub fn tiny_dataset(dir: &Path, seed: u64) -> DatasetManifest {
    generate_synthetic_dataset(&tiny_synth(seed), dir).unwrap()
}

pub fn tiny_model(n_classes: usize) -> ModelConfig {
    ModelConfig::compact(48, 16, 8, 16, 1, 2, n_classes)
}

/// Seconds-scale configuration over a [`tiny_dataset`].
pub fn tiny_run_config(data: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 3,
        data: Some(data.to_path_buf()),
        synth: tiny_synth(3),
        model: tiny_model(4),
        ..Default::default()
    };
    cfg.train.epochs = 2;
    cfg.train.learning_rate = 1e-3;
    cfg.train.batch = BatchSpec {
        p: 2,
        k: 4,
        domain_aware: true,
        seed: 3,
    };
    cfg.eval.batch_size = 8;
    cfg.propagate_seed();
    cfg
}
