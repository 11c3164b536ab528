use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::config::{EvalMode, RunConfig};
use super::plots::{heatmap_image, line_chart_svg, save_png};
use super::store::{RunDir, CONFIG_FILE};
use crate::data::{
    generate_synthetic_dataset, ingest_detections, load_manifest, save_manifest, DatasetManifest,
    IngestSummary, Split,
};
use crate::error::{Error, Result};
use crate::eval::{
    cosine_similarity_matrix, default_ablation_subsets, evaluate_model, gallery_query_matrix,
    local_feature_ablation, run_identification_protocol, write_atomic, AblationTable, DomainMatrix,
    EvalReport, FeatureStore, SimilarityMatrix,
};
use crate::model::{load_checkpoint, BodyTransformer};
use crate::training::{
    mining_statistics, read_mining_log, read_train_log, train, EpochLog, TrainingSet,
    FINAL_CHECKPOINT, MINING_LOG, TRAIN_LOG,
};

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const FEATURES_FILE: &str = "features.jsonl";

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    write_atomic(&p, text.as_bytes())?;
    Ok(p)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    Ok(cwd.join(p))
}

fn manifest_of(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::config("no dataset manifest given (set `data` or pass --data)"))?;
    load_manifest(path)
}

pub struct SynthOutput {
    pub run_dir: PathBuf,
    pub manifest: PathBuf,
    pub records: usize,
}

/// Generates a synthetic dataset into a new run directory.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthOutput> {
    cfg.synth.validate()?;
    let run = RunDir::create(out)?;
    let manifest = generate_synthetic_dataset(&cfg.synth, run.path())?;
    run.write_config(cfg)?;
    let run_dir = run.commit("synth", cfg.seed)?;
    Ok(SynthOutput {
        manifest: run_dir.join("manifest.jsonl"),
        run_dir,
        records: manifest.len(),
    })
}

/// Labels detected body boxes and writes the resulting manifest with
/// absolute image paths.
pub fn cmd_ingest(detections: &Path, threshold: f64, out: &Path) -> Result<IngestSummary> {
    let (manifest, summary) = ingest_detections(detections, threshold)?;
    let base = absolute(manifest.base_dir())?;
    let records = manifest
        .records()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if Path::new(&r.image_path).is_relative() {
                r.image_path = base.join(&r.image_path).to_string_lossy().into_owned();
            }
            r
        })
        .collect();
    let out_dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_manifest(&DatasetManifest::new(records, out_dir)?, out)?;
    Ok(summary)
}

/// Per-domain rank table: one row per query domain.
pub fn summary_csv(report: &EvalReport) -> String {
    let mut out = String::from("query_domain,gallery_size,queries");
    for k in &report.protocol.ranks {
        out.push_str(&format!(",rank{k}"));
    }
    out.push_str(",map\n");
    for d in &report.domains {
        out.push_str(&format!(
            "{},{},{}",
            d.query_domain, d.gallery_size, d.queries
        ));
        for k in &report.protocol.ranks {
            out.push_str(&d.rank(*k).map_or(String::from(","), |v| format!(",{v}")));
        }
        out.push_str(
            &d.map
                .map_or(String::from(",\n"), |m| format!(",{}\n", m.map)),
        );
    }
    out
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    report.save(dir.join(REPORT_FILE))?;
    write_text(dir, SUMMARY_CSV, &summary_csv(report))?;
    report.save_similarity_csv(dir)?;
    Ok(())
}

pub struct TrainOutput {
    pub run_dir: PathBuf,
    pub epochs: Vec<EpochLog>,
    pub report: Option<EvalReport>,
    /// Configuration as persisted, with derived fields filled in.
    pub config: RunConfig,
}

/// Trains into `dir` and, if configured, evaluates the test split. Returns
/// the effective config, which the caller persists.
pub(crate) fn train_into(
    cfg: &RunConfig,
    dir: &Path,
) -> Result<(RunConfig, Vec<EpochLog>, Option<EvalReport>)> {
    cfg.validate()?;
    let manifest = manifest_of(cfg)?;
    let mut effective = cfg.clone();
    effective.data = cfg.data.as_deref().map(absolute).transpose()?;
    effective.model.n_classes = TrainingSet::new(&manifest, &cfg.train)?.n_classes();
    let mut model = BodyTransformer::new(&effective.model, DType::F32, cfg.seed)?;
    let outcome = train(&mut model, &manifest, &effective.train, dir)?;
    let report = if cfg.eval.after_train && !manifest.split(Split::Test).is_empty() {
        let (features, mut report) =
            evaluate_model(&model, &manifest, &effective.protocol, cfg.eval.batch_size)?;
        features.save_jsonl(dir.join(FEATURES_FILE))?;
        report.config = serde_json::to_value(&effective)?;
        write_report(dir, &report)?;
        Some(report)
    } else {
        None
    };
    Ok((effective, outcome.epochs, report))
}

/// Trains a model into a new run directory.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutput> {
    let run = RunDir::create(out)?;
    let (effective, epochs, report) = train_into(cfg, run.path())?;
    run.write_config(&effective)?;
    let run_dir = run.commit("train", cfg.seed)?;
    Ok(TrainOutput {
        run_dir,
        epochs,
        report,
        config: effective,
    })
}

/// Where `eval` takes its features from.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalSource {
    /// A completed training run directory.
    Run(PathBuf),
    Checkpoint(PathBuf),
    /// A stored feature file; enough for protocol and matrix modes.
    Features(PathBuf),
}

impl EvalSource {
    fn checkpoint(&self) -> Option<PathBuf> {
        match self {
            EvalSource::Run(d) => Some(d.join(FINAL_CHECKPOINT)),
            EvalSource::Checkpoint(p) => Some(p.clone()),
            EvalSource::Features(_) => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOutput {
    pub run_dir: PathBuf,
    pub report: Option<EvalReport>,
    pub matrix: Option<DomainMatrix>,
    pub ablation: Option<AblationTable>,
}

/// Runs the configured evaluation mode into a new run directory.
pub fn cmd_eval(cfg: &RunConfig, source: &EvalSource, out: &Path) -> Result<EvalOutput> {
    cfg.protocol.validate()?;
    let manifest = manifest_of(cfg)?;
    let test = manifest.split(Split::Test);
    let model = source.checkpoint().map(load_checkpoint).transpose()?;
    if let Some(p) = source.checkpoint().filter(|p| !p.is_file()) {
        return Err(Error::invalid(format!(
            "checkpoint {} not found",
            p.display()
        )));
    }
    let run = RunDir::create(out)?;
    let features = || -> Result<FeatureStore> {
        match (source, &model) {
            (EvalSource::Features(p), _) => FeatureStore::load(p),
            (_, Some(m)) => crate::eval::extract_features(m, &test, cfg.eval.batch_size),
            _ => unreachable!("every other source has a checkpoint"),
        }
    };
    let mut output = EvalOutput::default();
    match cfg.eval.mode {
        EvalMode::Protocol => {
            let store = features()?;
            if model.is_some() {
                store.save_jsonl(run.path().join(FEATURES_FILE))?;
            }
            let mut report = run_identification_protocol(&store, &test, &cfg.protocol)?;
            report.config = serde_json::to_value(cfg)?;
            write_report(run.path(), &report)?;
            output.report = Some(report);
        }
        EvalMode::Matrix => {
            let store = features()?;
            let matrix = gallery_query_matrix(&store, &test, &cfg.protocol)?;
            write_text(run.path(), "matrix.csv", &matrix.to_csv())?;
            write_atomic(
                &run.path().join("matrix.json"),
                &serde_json::to_vec_pretty(&matrix)?,
            )?;
            output.matrix = Some(matrix);
        }
        EvalMode::Ablation => {
            let m = model.as_ref().ok_or_else(|| {
                Error::config("ablation needs token outputs; evaluate a run or checkpoint, not a feature file")
            })?;
            let mut subsets = default_ablation_subsets();
            if cfg.eval.global_only_row {
                subsets.push(Vec::new());
            }
            let table = local_feature_ablation(
                m,
                &test,
                &cfg.protocol,
                &subsets,
                cfg.eval.global_only_row,
                cfg.eval.batch_size,
            )?;
            write_text(
                run.path(),
                "ablation.csv",
                &table.to_csv(&cfg.protocol.queries),
            )?;
            write_atomic(
                &run.path().join("ablation.json"),
                &serde_json::to_vec_pretty(&table)?,
            )?;
            output.ablation = Some(table);
        }
    }
    run.write_config(cfg)?;
    output.run_dir = run.commit("eval", cfg.seed)?;
    Ok(output)
}

/// Mining percentages of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMining {
    pub epoch: usize,
    pub pct_hard_pos_cross_domain: f64,
    pub pct_hard_neg_same_domain: f64,
}

/// Recounts every epoch's statistics from the per-batch mining records.
pub fn recount_mining(run_dir: &Path) -> Result<Vec<EpochMining>> {
    let batches = read_mining_log(run_dir.join(MINING_LOG))?;
    let mut by_epoch: BTreeMap<usize, Vec<_>> = BTreeMap::new();
    for b in batches {
        by_epoch.entry(b.epoch).or_default().push(b.record);
    }
    by_epoch
        .into_iter()
        .map(|(epoch, recs)| {
            let s = mining_statistics(&recs)?;
            Ok(EpochMining {
                epoch,
                pct_hard_pos_cross_domain: s.pct_hard_pos_cross_domain,
                pct_hard_neg_same_domain: s.pct_hard_neg_same_domain,
            })
        })
        .collect()
}

/// Per-epoch mining statistics of a training run as CSV and an SVG chart.
/// When the run kept its mining log the logged values are cross-checked
/// against a recount.
pub fn cmd_stats(train_run: &Path, out: &Path) -> Result<Vec<EpochMining>> {
    let log_path = train_run.join(TRAIN_LOG);
    if !log_path.is_file() {
        return Err(Error::invalid(format!(
            "no training log at {}",
            log_path.display()
        )));
    }
    let rows: Vec<EpochMining> = read_train_log(&log_path)?
        .iter()
        .map(|e| EpochMining {
            epoch: e.epoch,
            pct_hard_pos_cross_domain: e.pct_hard_pos_cross_domain,
            pct_hard_neg_same_domain: e.pct_hard_neg_same_domain,
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!(
            "{} has no epochs",
            log_path.display()
        )));
    }
    if train_run.join(MINING_LOG).is_file() {
        let recount = recount_mining(train_run)?;
        if recount != rows {
            return Err(Error::Validation(format!(
                "mining log of {} disagrees with its training log",
                train_run.display()
            )));
        }
    }
    let run = RunDir::create(out)?;
    let mut csv = String::from("epoch,pct_hard_pos_cross_domain,pct_hard_neg_same_domain\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            r.epoch, r.pct_hard_pos_cross_domain, r.pct_hard_neg_same_domain
        ));
    }
    write_text(run.path(), "mining_stats.csv", &csv)?;
    let x: Vec<f64> = rows.iter().map(|r| r.epoch as f64).collect();
    let svg = line_chart_svg(
        "Hard-mining statistics (%)",
        &x,
        &[
            (
                "hard pos cross-domain",
                rows.iter().map(|r| r.pct_hard_pos_cross_domain).collect(),
            ),
            (
                "hard neg same-domain",
                rows.iter().map(|r| r.pct_hard_neg_same_domain).collect(),
            ),
        ],
        (0.0, 100.0),
    )?;
    write_text(run.path(), "mining_stats.svg", &svg)?;
    run.commit("stats", 0)?;
    Ok(rows)
}

/// Pairwise cosine similarities of the selected media, as CSV and PNG.
pub fn cmd_heatmap(features: &Path, media_ids: &[String], out: &Path) -> Result<SimilarityMatrix> {
    if media_ids.len() < 2 {
        return Err(Error::invalid("a heatmap needs at least two media ids"));
    }
    let store = FeatureStore::load(features)?;
    let items = media_ids
        .iter()
        .map(|m| {
            store
                .get(m)
                .map(|r| (m.clone(), r.vector.clone()))
                .ok_or_else(|| Error::invalid(format!("media `{m}` not in {}", features.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let sim = cosine_similarity_matrix(&items, &items)?;
    let run = RunDir::create(out)?;
    write_text(run.path(), "heatmap.csv", &sim.to_csv())?;
    save_png(
        &heatmap_image(&sim.values, 48)?,
        &run.path().join("heatmap.png"),
    )?;
    run.commit("heatmap", 0)?;
    Ok(sim)
}

/// Repeats a completed `train` run from its persisted config.
pub fn rerun(run_dir: &Path, out: &Path) -> Result<TrainOutput> {
    let record = super::store::RunRecord::load(run_dir)?;
    if record.command != "train" {
        return Err(Error::invalid(format!(
            "{} is a `{}` run; only training runs can be repeated",
            run_dir.display(),
            record.command
        )));
    }
    let cfg = RunConfig::load(run_dir.join(CONFIG_FILE))?;
    cmd_train(&cfg, out)
}

/// Largest absolute difference between the logged and reported numbers of
/// two training runs.
pub fn compare_runs(a: &Path, b: &Path) -> Result<f64> {
    let la = read_train_log(a.join(TRAIN_LOG))?;
    let lb = read_train_log(b.join(TRAIN_LOG))?;
    if la.len() != lb.len() {
        return Err(Error::Validation(
            "runs logged different numbers of epochs".into(),
        ));
    }
    let mut diff: f64 = 0.0;
    let mut push = |x: f64, y: f64| diff = diff.max((x - y).abs());
    for (x, y) in la.iter().zip(&lb) {
        push(x.mean_id_loss, y.mean_id_loss);
        push(x.mean_triplet_loss, y.mean_triplet_loss);
        push(x.mean_loss, y.mean_loss);
        push(x.pct_hard_pos_cross_domain, y.pct_hard_pos_cross_domain);
        push(x.pct_hard_neg_same_domain, y.pct_hard_neg_same_domain);
    }
    let (pa, pb) = (a.join(REPORT_FILE), b.join(REPORT_FILE));
    match (pa.is_file(), pb.is_file()) {
        (true, true) => {
            let (ra, rb) = (EvalReport::load(pa)?, EvalReport::load(pb)?);
            if ra.domains.len() != rb.domains.len() {
                return Err(Error::Validation("reports cover different domains".into()));
            }
            for (x, y) in ra.domains.iter().zip(&rb.domains) {
                if x.query_domain != y.query_domain || x.cmc.len() != y.cmc.len() {
                    return Err(Error::Validation("reports differ in shape".into()));
                }
                for (u, v) in x.cmc.iter().zip(&y.cmc) {
                    push(*u, *v);
                }
                if let (Some(u), Some(v)) = (x.map, y.map) {
                    push(u.map, v.map);
                }
            }
        }
        (false, false) => {}
        _ => {
            return Err(Error::Validation(
                "only one run has an evaluation report".into(),
            ))
        }
    }
    Ok(diff)
}
