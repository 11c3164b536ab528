use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[synth]
n_subjects = 6
test_subjects = 2
images_per_subject_per_domain = 2
image_height = 48
image_width = 16
patch_size = 8

[model]
image_height = 48
image_width = 16
patch_size = 8
embed_dim = 16
depth = 1
heads = 2
mlp_dim = 32
fusion_hidden = 32
region_rows = { face = { start = 0, end = 1 }, torso = { start = 1, end = 3 }, lower = { start = 3, end = 6 } }

[train]
epochs = 1
learning_rate = 0.001

[train.batch]
p = 2
k = 4

[eval]
batch_size = 8
"#;

fn crossband(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossband"))
        .args(args)
        .env("CROSSBAND_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], root: &Path) -> String {
    let o = crossband(args, root);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn fails(args: &[&str], root: &Path) -> String {
    let o = crossband(args, root);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "multi-line error: {err}");
    err
}

/// Every file under `dir` except the run record, which names the run.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "run.json") {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: String,
    manifest: String,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let config = config.to_string_lossy().into_owned();
    let stdout = ok(
        &[
            "synth",
            "--config",
            &config,
            "--out",
            root.join("data").to_str().unwrap(),
        ],
        &root,
    );
    let manifest = stdout.trim().to_string();
    assert!(Path::new(&manifest).is_file());
    Fixture {
        _tmp: tmp,
        root,
        config,
        manifest,
    }
}

#[test]
fn synth_is_deterministic_per_seed() {
    let f = fixture();
    let a = f.root.join("a");
    let b = f.root.join("b");
    for d in [&a, &b] {
        ok(
            &[
                "synth",
                "--config",
                &f.config,
                "--seed",
                "7",
                "--out",
                d.to_str().unwrap(),
            ],
            &f.root,
        );
    }
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&f.root.join("data")));
}

#[test]
fn synth_defaults_to_the_output_root() {
    let f = fixture();
    let stdout = ok(&["synth", "--config", &f.config], &f.root);
    assert!(stdout
        .trim()
        .starts_with(f.root.join("synth-001").to_str().unwrap()));
}

#[test]
fn invalid_input_exits_nonzero_with_one_line() {
    let f = fixture();
    let err = fails(
        &[
            "synth",
            "--config",
            &f.config,
            "--set",
            "synth.image_height=50",
        ],
        &f.root,
    );
    assert!(err.starts_with("error:"), "{err}");
    let err = fails(
        &[
            "train",
            "--config",
            &f.config,
            "--data",
            &f.manifest,
            "--domains",
            "VIS,UV",
        ],
        &f.root,
    );
    assert!(err.contains("UV"), "{err}");
    fails(&["synth", "--set", "synth.n_subjects=1"], &f.root);
    fails(&["eval", "--data", &f.manifest], &f.root);
    fails(
        &["stats", "--run", f.root.join("nope").to_str().unwrap()],
        &f.root,
    );
    let leftovers: Vec<_> = fs::read_dir(&f.root)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".partial") || n.ends_with(".lock"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn train_flags_reach_the_persisted_config() {
    let f = fixture();
    let run = f.root.join("vis-swir");
    ok(
        &[
            "train",
            "--config",
            &f.config,
            "--data",
            &f.manifest,
            "--domains",
            "VIS,SWIR",
            "--subjects",
            "3",
            "--sampler",
            "random",
            "--lora",
            "rank=2,alpha=4",
            "--set",
            "train.batch.k=2",
            "--out",
            run.to_str().unwrap(),
        ],
        &f.root,
    );
    let cfg = fs::read_to_string(run.join("config.toml")).unwrap();
    let v: toml::Value = toml::from_str(&cfg).unwrap();
    let train = &v["train"];
    assert_eq!(train["domains"].as_array().unwrap().len(), 2);
    assert_eq!(train["subjects"].as_integer(), Some(3));
    assert_eq!(train["batch"]["domain_aware"].as_bool(), Some(false));
    assert_eq!(train["lora"]["rank"].as_integer(), Some(2));
    assert_eq!(v["model"]["n_classes"].as_integer(), Some(3));
}

#[test]
fn eval_stats_heatmap_and_rerun() {
    let f = fixture();
    let run = f.root.join("run");
    let stdout = ok(
        &[
            "train",
            "--config",
            &f.config,
            "--data",
            &f.manifest,
            "--out",
            run.to_str().unwrap(),
        ],
        &f.root,
    );
    assert!(stdout.contains("query_domain,gallery_size,queries,rank1,rank5,rank10,map"));
    let run_s = run.to_str().unwrap();

    let m = f.root.join("matrix");
    ok(
        &[
            "eval",
            "--run",
            run_s,
            "--mode",
            "matrix",
            "--out",
            m.to_str().unwrap(),
        ],
        &f.root,
    );
    assert!(fs::read_to_string(m.join("matrix.csv"))
        .unwrap()
        .starts_with("gallery\\query,VIS,SWIR,MWIR,LWIR"));

    let a = f.root.join("ablation");
    ok(
        &[
            "eval",
            "--run",
            run_s,
            "--mode",
            "ablation",
            "--out",
            a.to_str().unwrap(),
        ],
        &f.root,
    );
    assert_eq!(
        fs::read_to_string(a.join("ablation.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );

    let s = f.root.join("stats");
    let stdout = ok(
        &["stats", "--run", run_s, "--out", s.to_str().unwrap()],
        &f.root,
    );
    assert!(stdout.starts_with("epoch,pct_hard_pos_cross_domain,pct_hard_neg_same_domain\n1,"));
    assert!(s.join("mining_stats.svg").is_file());

    let ids = "s004_VIS_00,s004_SWIR_00,s004_MWIR_00,s004_LWIR_00";
    let feats = run.join("features.jsonl");
    let h = f.root.join("heat");
    ok(
        &[
            "heatmap",
            "--features",
            feats.to_str().unwrap(),
            "--ids",
            ids,
            "--out",
            h.to_str().unwrap(),
        ],
        &f.root,
    );
    assert_eq!(
        fs::read_to_string(h.join("heatmap.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );
    fails(
        &[
            "heatmap",
            "--features",
            feats.to_str().unwrap(),
            "--ids",
            "s004_VIS_00",
        ],
        &f.root,
    );

    let r = f.root.join("again");
    ok(
        &["rerun", "--run", run_s, "--out", r.to_str().unwrap()],
        &f.root,
    );
    assert_eq!(
        fs::read_to_string(run.join("train_log.jsonl")).unwrap(),
        fs::read_to_string(r.join("train_log.jsonl")).unwrap()
    );
    fails(
        &["rerun", "--run", run_s, "--out", r.to_str().unwrap()],
        &f.root,
    );
}
