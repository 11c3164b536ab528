mod common;

use std::fs;
use std::path::Path;

use common::*;
use crossband::data::{Domain, Split};
use crossband::eval::{cosine_similarity_matrix, FeatureRecord, FeatureStore};
use crossband::harness::*;
use crossband::training::{read_train_log, FINAL_CHECKPOINT, MINING_LOG, TRAIN_LOG};

fn synth_into(root: &Path) -> std::path::PathBuf {
    let cfg = RunConfig {
        synth: tiny_synth(3),
        ..Default::default()
    };
    cmd_synth(&cfg, &root.join("data")).unwrap().manifest
}

fn leftovers(root: &Path) -> Vec<String> {
    fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".partial") || n.ends_with(".lock"))
        .collect()
}

#[test]
fn train_eval_stats_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let manifest = synth_into(root);
    let cfg = tiny_run_config(&manifest);

    let out = cmd_train(&cfg, &root.join("train")).unwrap();
    assert_eq!(out.epochs.len(), 2);
    let run = root.join("train");
    for f in [
        CONFIG_FILE,
        RUN_RECORD,
        TRAIN_LOG,
        MINING_LOG,
        FINAL_CHECKPOINT,
        REPORT_FILE,
        SUMMARY_CSV,
        FEATURES_FILE,
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let persisted = RunConfig::load(run.join(CONFIG_FILE)).unwrap();
    assert_eq!(persisted, out.config);
    assert_eq!(persisted.model.n_classes, 4);
    assert_eq!(RunRecord::load(&run).unwrap().seed, 3);

    let again = rerun(&run, &root.join("again")).unwrap();
    assert!(again.report.is_some());
    let diff = compare_runs(&run, &root.join("again")).unwrap();
    assert!(diff <= 1e-6, "rerun differs by {diff}");

    let mut eval_cfg = persisted.clone();
    let ev = cmd_eval(
        &eval_cfg,
        &EvalSource::Run(run.clone()),
        &root.join("eval-protocol"),
    )
    .unwrap();
    let report = ev.report.unwrap();
    assert_eq!(report.domains.len(), 3);
    assert_eq!(
        report
            .domains
            .iter()
            .map(|d| d.cmc.clone())
            .collect::<Vec<_>>(),
        out.report
            .as_ref()
            .unwrap()
            .domains
            .iter()
            .map(|d| d.cmc.clone())
            .collect::<Vec<_>>()
    );

    eval_cfg.eval.mode = EvalMode::Matrix;
    let features = EvalSource::Features(run.join(FEATURES_FILE));
    let m = cmd_eval(&eval_cfg, &features, &root.join("eval-matrix"))
        .unwrap()
        .matrix
        .unwrap();
    assert_eq!(m.domains.len(), 4);
    assert!(
        fs::read_to_string(root.join("eval-matrix/matrix.csv"))
            .unwrap()
            .lines()
            .count()
            == 5
    );

    eval_cfg.eval.mode = EvalMode::Ablation;
    assert!(cmd_eval(&eval_cfg, &features, &root.join("eval-bad")).is_err());
    eval_cfg.eval.global_only_row = true;
    let checkpoint = EvalSource::Checkpoint(run.join(FINAL_CHECKPOINT));
    let table = cmd_eval(&eval_cfg, &checkpoint, &root.join("eval-ablation"))
        .unwrap()
        .ablation
        .unwrap();
    assert_eq!(table.rows.len(), 5);
    assert!(table.rows[4].regions.is_empty());

    let rows = cmd_stats(&run, &root.join("stats")).unwrap();
    let logged = read_train_log(run.join(TRAIN_LOG)).unwrap();
    assert_eq!(rows.len(), logged.len());
    let csv = fs::read_to_string(root.join("stats/mining_stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + logged.len());
    for r in &rows {
        assert!((0.0..=100.0).contains(&r.pct_hard_pos_cross_domain));
        assert!((0.0..=100.0).contains(&r.pct_hard_neg_same_domain));
    }
    assert_eq!(recount_mining(&run).unwrap(), rows);
    assert!(root.join("stats/mining_stats.svg").is_file());

    let test_ids: Vec<String> = {
        let m = crossband::data::load_manifest(&manifest)
            .unwrap()
            .split(Split::Test);
        let s = m.subjects().next().unwrap().to_string();
        Domain::ALL.iter().map(|d| format!("{s}_{d}_00")).collect()
    };
    let sim = cmd_heatmap(&run.join(FEATURES_FILE), &test_ids, &root.join("heat")).unwrap();
    assert_eq!((sim.rows(), sim.cols()), (4, 4));
    let store = FeatureStore::load(run.join(FEATURES_FILE)).unwrap();
    let items: Vec<_> = test_ids
        .iter()
        .map(|m| (m.clone(), store.get(m).unwrap().vector.clone()))
        .collect();
    assert_eq!(sim, cosine_similarity_matrix(&items, &items).unwrap());
    assert!(root.join("heat/heatmap.png").is_file());
    assert!(leftovers(root).is_empty());
}

#[test]
fn identical_vectors_give_a_uniform_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let recs = (0..3)
        .map(|i| FeatureRecord {
            media_id: format!("m{i}"),
            subject_id: "s".into(),
            domain: Domain::ALL[i],
            template_id: "t".into(),
            vector: vec![0.3, -1.2, 2.0],
        })
        .collect();
    let path = tmp.path().join("f.jsonl");
    FeatureStore::new(recs).unwrap().save_jsonl(&path).unwrap();
    let ids: Vec<String> = (0..3).map(|i| format!("m{i}")).collect();
    let sim = cmd_heatmap(&path, &ids, &tmp.path().join("h")).unwrap();
    assert!(sim
        .values
        .iter()
        .flatten()
        .all(|&v| (v - 1.0).abs() < 1e-12));
    assert!(cmd_heatmap(&path, &ids[..1], &tmp.path().join("h1")).is_err());
    assert!(!tmp.path().join("h1").exists());
}

#[test]
fn failed_runs_leave_no_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let manifest = synth_into(root);
    let mut cfg = tiny_run_config(&manifest);
    cfg.train.subjects = Some(99);
    assert!(cmd_train(&cfg, &root.join("bad")).is_err());
    assert!(!root.join("bad").exists());
    cfg.train.subjects = None;
    cfg.data = Some(root.join("missing.jsonl"));
    assert!(cmd_train(&cfg, &root.join("bad")).is_err());
    assert!(!root.join("bad").exists());
    assert!(leftovers(root).is_empty());
}

#[test]
fn synth_runs_are_reproducible_and_immutable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        synth: tiny_synth(7),
        ..Default::default()
    };
    let a = cmd_synth(&cfg, &tmp.path().join("a")).unwrap();
    let b = cmd_synth(&cfg, &tmp.path().join("b")).unwrap();
    assert_eq!(a.records, 6 * 4 * 2);
    assert_eq!(
        fs::read(&a.manifest).unwrap(),
        fs::read(&b.manifest).unwrap()
    );
    let img = "images/s000/LWIR_01.png";
    assert_eq!(
        fs::read(a.run_dir.join(img)).unwrap(),
        fs::read(b.run_dir.join(img)).unwrap()
    );
    assert!(cmd_synth(&cfg, &a.run_dir).is_err());
}

#[test]
fn sampler_sweep_writes_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_into(tmp.path());
    let mut cfg = tiny_run_config(&manifest);
    cfg.train.epochs = 1;
    let rows = cmd_sweep(&cfg, &SweepAxis::Sampler, &tmp.path().join("sweep")).unwrap();
    assert_eq!(rows.len(), 2);
    let csv = fs::read_to_string(tmp.path().join("sweep/summary.csv")).unwrap();
    assert!(csv.starts_with("sampler,SWIR,MWIR,LWIR\n"));
    for r in &rows {
        assert!(r.run_dir.join(FINAL_CHECKPOINT).is_file());
        let c = RunConfig::load(r.run_dir.join(CONFIG_FILE)).unwrap();
        assert_eq!(c.train.batch.domain_aware, r.label == "domain-aware");
    }
}

#[test]
fn shipped_smoke_config_matches_the_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let mut cfg = RunConfig::load(path).unwrap();
    cfg.model.n_classes = 20;
    assert_eq!(cfg, RunConfig::smoke());
}
