use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, SGD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{batch_hard_triplet_loss, combined_loss, identity_loss};
use super::mining::{mining_statistics, MiningRecord, MiningStats};
use super::sampler::{BatchSampler, BatchSpec};
use crate::data::{mix_seed, DatasetManifest, Domain, ImageCache, Split};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, BodyTransformer, LoraConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Floor of the cosine schedule.
    pub min_learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// Weight of the triplet term.
    pub lambda: f64,
    /// Triplet margin.
    pub margin: f64,
    pub batch: BatchSpec,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Training domains; records in other domains are never seen.
    pub domains: Vec<Domain>,
    /// Keep this many training identities (seeded choice).
    pub subjects: Option<usize>,
    /// Adapter-only training when set.
    pub lora: Option<LoraConfig>,
    /// Store each batch's features next to its mining record.
    pub log_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 3e-4,
            min_learning_rate: 0.0,
            warmup_steps: 0,
            weight_decay: 0.01,
            optimizer: OptimizerKind::AdamW,
            lambda: 1.0,
            margin: 0.0,
            batch: BatchSpec::default(),
            checkpoint_every: 0,
            seed: 0,
            domains: Domain::ALL.to_vec(),
            subjects: None,
            lora: None,
            log_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.min_learning_rate >= 0.0 && self.min_learning_rate <= self.learning_rate) {
            return Err(Error::config(
                "min_learning_rate must lie in [0, learning_rate]",
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config(format!(
                "margin must be >= 0, got {}",
                self.margin
            )));
        }
        if self.domains.is_empty() {
            return Err(Error::config("no training domains"));
        }
        if self.subjects == Some(0) {
            return Err(Error::config("subjects must be positive"));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` out of `total`.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let t = (step - self.warmup_steps) as f64 / span as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos());
        self.min_learning_rate + (self.learning_rate - self.min_learning_rate) * cos
    }
}

/// Training records after split, domain and identity filtering, with the
/// class index of every identity.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub manifest: DatasetManifest,
    pub classes: BTreeMap<String, usize>,
}

impl TrainingSet {
    pub fn new(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Self> {
        let train =
            manifest.filtered(|r| r.split == Split::Train && cfg.domains.contains(&r.domain));
        if train.is_empty() {
            return Err(Error::invalid(
                "manifest has no training records in the chosen domains",
            ));
        }
        let mut subjects: Vec<String> = train.subjects().map(str::to_string).collect();
        if let Some(n) = cfg.subjects {
            if n > subjects.len() {
                return Err(Error::config(format!(
                    "asked for {n} training subjects, only {} available",
                    subjects.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5B]));
            subjects.shuffle(&mut rng);
            subjects.truncate(n);
            subjects.sort();
        }
        let keep: std::collections::BTreeSet<&str> = subjects.iter().map(String::as_str).collect();
        let manifest = train.filtered(|r| keep.contains(r.subject_id.as_str()));
        let classes = subjects
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        Ok(Self { manifest, classes })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub mean_id_loss: f64,
    pub mean_triplet_loss: f64,
    pub mean_loss: f64,
    pub pct_hard_pos_cross_domain: f64,
    pub pct_hard_neg_same_domain: f64,
    pub anchors: usize,
    pub hard_pos_cross_domain: usize,
    pub hard_neg_same_domain: usize,
}

impl EpochLog {
    pub fn mining_stats(&self) -> Result<MiningStats> {
        MiningStats::from_counts(
            self.anchors,
            self.hard_pos_cross_domain,
            self.hard_neg_same_domain,
        )
    }
}

/// One line of `mining.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMining {
    pub epoch: usize,
    pub step: usize,
    pub media_ids: Vec<String>,
    pub record: MiningRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
}

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const MINING_LOG: &str = "mining.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.safetensors";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub checkpoint: PathBuf,
    pub steps: usize,
}

enum Opt {
    AdamW(AdamW),
    Sgd(SGD),
}

impl Opt {
    fn set_lr(&mut self, lr: f64) {
        match self {
            Opt::AdamW(o) => o.set_learning_rate(lr),
            Opt::Sgd(o) => o.set_learning_rate(lr),
        }
    }

    fn step(&mut self, loss: &Tensor) -> Result<()> {
        match self {
            Opt::AdamW(o) => o.backward_step(loss)?,
            Opt::Sgd(o) => o.backward_step(loss)?,
        }
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn write_line<T: Serialize>(w: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}

/// Optimises identity plus weighted triplet loss on `z_final`.
///
/// Writes `train_log.jsonl` (one line per epoch), `mining.jsonl` (one line
/// per batch) and checkpoints into `out_dir`. Under `cfg.lora` adapters are
/// attached first and only they are updated.
pub fn train(
    model: &mut BodyTransformer,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let set = TrainingSet::new(manifest, cfg)?;
    if set.n_classes() != model.config().n_classes {
        return Err(Error::config(format!(
            "model has {} classes but the training set has {} identities",
            model.config().n_classes,
            set.n_classes()
        )));
    }
    if let Some(lora) = &cfg.lora {
        match model.lora_config() {
            None => model.apply_lora(lora)?,
            Some(existing) if existing == lora => {}
            Some(existing) => {
                return Err(Error::config(format!(
                    "model already carries adapters {existing:?}, config asks for {lora:?}"
                )))
            }
        }
    }
    let sampler = BatchSampler::with_domains(&set.manifest, &cfg.batch, &cfg.domains)?;
    let schedule: Vec<Vec<Vec<usize>>> = (0..cfg.epochs as u64).map(|e| sampler.epoch(e)).collect();
    let total_steps: usize = schedule.iter().map(Vec::len).sum();

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(TRAIN_LOG);
    let mining_path = out_dir.join(MINING_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut mining =
        BufWriter::new(File::create(&mining_path).map_err(|e| Error::io(&mining_path, e))?);

    let vars = model.trainable_vars();
    let mut opt = match cfg.optimizer {
        OptimizerKind::AdamW => Opt::AdamW(AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: cfg.weight_decay,
                ..ParamsAdamW::default()
            },
        )?),
        OptimizerKind::Sgd => Opt::Sgd(SGD::new(vars, cfg.learning_rate)?),
    };

    let mc = model.config().clone();
    let mut cache = ImageCache::new(mc.image_height, mc.image_width, mc.patch_size);
    let records = set.manifest.records();
    let mut global_step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for (e, batches) in schedule.iter().enumerate() {
        let epoch = e + 1;
        let (mut id_sum, mut tri_sum, mut loss_sum) = (0.0, 0.0, 0.0);
        let mut epoch_records = Vec::with_capacity(batches.len());
        let mut lr = cfg.learning_rate;
        for (step, batch) in batches.iter().enumerate() {
            lr = cfg.learning_rate_at(global_step, total_steps);
            opt.set_lr(lr);
            let x = cache.batch_tensor(&set.manifest, batch, model.dtype(), model.device())?;
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| set.classes[&records[i].subject_id])
                .collect();
            let domains: Vec<Domain> = batch.iter().map(|&i| records[i].domain).collect();
            let feats = model.forward(&x)?;
            let logits = model.classify(&feats.z_final)?;
            let id = identity_loss(&logits, &labels)?;
            let (tri, record) =
                batch_hard_triplet_loss(&feats.z_final, &labels, &domains, cfg.margin)?;
            let loss = combined_loss(&id, &tri, cfg.lambda)?;
            let (id_v, tri_v, loss_v) = (scalar(&id)?, scalar(&tri)?, scalar(&loss)?);
            if !(id_v.is_finite() && tri_v.is_finite() && loss_v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    id_loss: id_v,
                    triplet_loss: tri_v,
                });
            }
            opt.step(&loss)?;
            let features = if cfg.log_features {
                Some(
                    feats
                        .z_final
                        .detach()
                        .to_dtype(DType::F64)?
                        .to_vec2::<f64>()?,
                )
            } else {
                None
            };
            write_line(
                &mut mining,
                &mining_path,
                &BatchMining {
                    epoch,
                    step,
                    media_ids: batch.iter().map(|&i| records[i].media_id.clone()).collect(),
                    record: record.clone(),
                    features,
                },
            )?;
            id_sum += id_v;
            tri_sum += tri_v;
            loss_sum += loss_v;
            epoch_records.push(record);
            global_step += 1;
        }
        let stats = mining_statistics(&epoch_records)?;
        let n = batches.len().max(1) as f64;
        let entry = EpochLog {
            epoch,
            steps: batches.len(),
            learning_rate: lr,
            mean_id_loss: id_sum / n,
            mean_triplet_loss: tri_sum / n,
            mean_loss: loss_sum / n,
            pct_hard_pos_cross_domain: stats.pct_hard_pos_cross_domain,
            pct_hard_neg_same_domain: stats.pct_hard_neg_same_domain,
            anchors: stats.anchors,
            hard_pos_cross_domain: stats.hard_pos_cross_domain,
            hard_neg_same_domain: stats.hard_neg_same_domain,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (id {:.4}, triplet {:.4}), hard positives cross-domain {:.1}%",
            entry.mean_loss,
            entry.mean_id_loss,
            entry.mean_triplet_loss,
            entry.pct_hard_pos_cross_domain
        );
        write_line(&mut log, &log_path, &entry)?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        mining.flush().map_err(|e| Error::io(&mining_path, e))?;
        epochs.push(entry);
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
            let dir = out_dir.join("checkpoints");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            save_checkpoint(model, dir.join(format!("epoch_{epoch:03}.safetensors")))?;
        }
    }
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(model, &checkpoint)?;
    Ok(TrainOutcome {
        epochs,
        checkpoint,
        steps: global_step,
    })
}

/// Reads `train_log.jsonl`.
pub fn read_train_log(path: impl AsRef<Path>) -> Result<Vec<EpochLog>> {
    read_jsonl(path.as_ref())
}

/// Reads `mining.jsonl`.
pub fn read_mining_log(path: impl AsRef<Path>) -> Result<Vec<BatchMining>> {
    read_jsonl(path.as_ref())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::ManifestParse {
                path: path.to_path_buf(),
                line: i + 1,
                field: "<record>".into(),
                message: e.to_string(),
            })
        })
        .collect()
}
