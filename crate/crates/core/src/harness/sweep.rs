//! Families of training runs that differ along one axis.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::commands::train_into;
use super::config::RunConfig;
use super::store::RunDir;
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::model::LoraConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    /// Domain-aware against random batches.
    Sampler,
    /// One run per training-domain list.
    Domains(Vec<Vec<Domain>>),
    /// Full finetuning against adapter-only training.
    Adaptation(LoraConfig),
    /// One run per number of training identities.
    Subjects(Vec<usize>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Sampler => "sampler",
            SweepAxis::Domains(_) => "domains",
            SweepAxis::Adaptation(_) => "adaptation",
            SweepAxis::Subjects(_) => "subjects",
        }
    }

    /// VIS alone, then SWIR, MWIR and LWIR added one at a time.
    pub fn default_domains() -> Self {
        SweepAxis::Domains((1..=4).map(|n| Domain::ALL[..n].to_vec()).collect())
    }
}

/// Keeps the per-domain share of a domain-aware batch when the number of
/// training domains changes.
fn rescale_k(cfg: &mut RunConfig, from: usize) {
    let per_domain = (cfg.train.batch.k / from.max(1)).max(1);
    let n = cfg.train.domains.len();
    cfg.train.batch.k = (per_domain * n).max(2);
}

/// Labelled configs, one per point on the axis.
pub fn sweep_variants(base: &RunConfig, axis: &SweepAxis) -> Result<Vec<(String, RunConfig)>> {
    let mut out = Vec::new();
    match axis {
        SweepAxis::Sampler => {
            for name in ["domain-aware", "random"] {
                let mut c = base.clone();
                c.set_sampler(name)?;
                out.push((name.to_string(), c));
            }
        }
        SweepAxis::Domains(lists) => {
            for list in lists {
                if list.is_empty() {
                    return Err(Error::config("empty domain list in sweep"));
                }
                let mut c = base.clone();
                c.train.domains = list.clone();
                rescale_k(&mut c, base.train.domains.len());
                let label = list
                    .iter()
                    .map(|d| d.as_str())
                    .collect::<Vec<_>>()
                    .join("+");
                out.push((label, c));
            }
        }
        SweepAxis::Adaptation(lora) => {
            let mut full = base.clone();
            full.train.lora = None;
            out.push(("full".to_string(), full));
            let mut adapted = base.clone();
            adapted.train.lora = Some(lora.clone());
            out.push((format!("lora-r{}", lora.rank), adapted));
        }
        SweepAxis::Subjects(counts) => {
            for &n in counts {
                let mut c = base.clone();
                c.train.subjects = Some(n);
                out.push((format!("subjects-{n}"), c));
            }
        }
    }
    Ok(out)
}

/// Rank-1 per query domain for one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub run_dir: PathBuf,
    pub rank1: Vec<(Domain, f64)>,
}

/// Trains and evaluates every variant as a sub-run of `out`, then writes
/// `summary.csv`.
pub fn cmd_sweep(base: &RunConfig, axis: &SweepAxis, out: &Path) -> Result<Vec<SweepRow>> {
    let variants = sweep_variants(base, axis)?;
    for (_, c) in &variants {
        c.validate()?;
    }
    let run = RunDir::create(out)?;
    let mut rows = Vec::with_capacity(variants.len());
    for (label, mut c) in variants {
        c.eval.after_train = true;
        let sub = RunDir::create(run.path().join(&label))?;
        let (effective, _, report) = train_into(&c, sub.path())?;
        sub.write_config(&effective)?;
        sub.commit("train", c.seed)?;
        let report =
            report.ok_or_else(|| Error::invalid("sweep needs a test split to report on"))?;
        rows.push(SweepRow {
            run_dir: out.join(&label),
            label,
            rank1: report
                .domains
                .iter()
                .map(|d| (d.query_domain, d.rank1()))
                .collect(),
        });
    }
    let domains = &base.protocol.queries;
    let mut csv = String::from(axis.name());
    for d in domains {
        csv.push_str(&format!(",{d}"));
    }
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.label);
        for d in domains {
            let v = r.rank1.iter().find(|(x, _)| x == d).map(|(_, v)| *v);
            csv.push_str(&v.map_or(String::from(","), |v| format!(",{v}")));
        }
        csv.push('\n');
    }
    crate::eval::write_atomic(&run.path().join("summary.csv"), csv.as_bytes())?;
    run.write_config(base)?;
    run.commit(&format!("sweep-{}", axis.name()), base.seed)?;
    Ok(rows)
}
