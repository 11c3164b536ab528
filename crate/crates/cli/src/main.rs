use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use crossband::data::parse_domain_list;
use crossband::harness::{
    cmd_eval, cmd_heatmap, cmd_ingest, cmd_stats, cmd_sweep, cmd_synth, cmd_train, next_run_dir,
    output_root, rerun, summary_csv, EvalSource, RunConfig, SweepAxis, CONFIG_FILE,
};
use crossband::model::LoraConfig;

/// Cross-spectral body identification toolkit.
#[derive(Parser)]
#[command(name = "crossband", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to a fresh directory under $CROSSBAND_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. --set train.learning_rate=1e-3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Total number of subjects.
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        test_subjects: Option<usize>,
        /// Images per subject and domain.
        #[arg(long)]
        images: Option<usize>,
    },
    /// Label detected body boxes by face overlap and write a manifest.
    Ingest {
        /// Line-delimited detection frames.
        #[arg(long)]
        detections: PathBuf,
        /// Output manifest path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = crossband::data::DEFAULT_FACE_IOU_THRESHOLD)]
        threshold: f64,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training domains, e.g. VIS,SWIR.
        #[arg(long)]
        domains: Option<String>,
        /// Number of training identities to keep.
        #[arg(long)]
        subjects: Option<usize>,
        /// domain-aware or random.
        #[arg(long)]
        sampler: Option<String>,
        /// Adapter-only training, e.g. rank=8 or rank=8,alpha=16.
        #[arg(long)]
        lora: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a run, checkpoint or feature file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// protocol, matrix or ablation.
        #[arg(long)]
        mode: Option<String>,
        /// Training run directory; its config is the default.
        #[arg(long, conflicts_with_all = ["checkpoint", "features"])]
        run: Option<PathBuf>,
        #[arg(long, conflicts_with = "features")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Hard-mining statistics of a training run as CSV and SVG.
    Stats {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine-similarity heatmap of selected media.
    Heatmap {
        #[arg(long)]
        features: PathBuf,
        /// Comma separated media ids.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        ids: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one run per point on an axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// sampler, domains, adaptation or subjects.
        #[arg(long)]
        axis: String,
        /// Points on the axis: domain lists separated by `;`, subject counts
        /// separated by `,`, or the LoRA spec for `adaptation`.
        #[arg(long)]
        values: Option<String>,
    },
    /// Repeat a training run from its persisted config.
    Rerun {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn base_config(common: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match common.config.as_deref().or(fallback) {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.propagate_seed();
    }
    for o in &common.overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}

fn out_dir(out: &Option<PathBuf>, prefix: &str) -> PathBuf {
    out.clone()
        .unwrap_or_else(|| next_run_dir(&output_root(), prefix))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            subjects,
            test_subjects,
            images,
        } => {
            let mut cfg = base_config(&common, None)?;
            if let Some(n) = subjects {
                cfg.synth.n_subjects = n;
            }
            if test_subjects.is_some() {
                cfg.synth.test_subjects = test_subjects;
            }
            if let Some(n) = images {
                cfg.synth.images_per_subject_per_domain = n;
            }
            let out = cmd_synth(&cfg, &out_dir(&common.out, "synth"))?;
            println!("{}", out.manifest.display());
        }
        Command::Ingest {
            detections,
            out,
            threshold,
        } => {
            let s = cmd_ingest(&detections, threshold, &out)?;
            println!(
                "{}: {} frames, {} boxes, {} labeled, {} dropped",
                out.display(),
                s.frames,
                s.body_boxes,
                s.labeled,
                s.dropped
            );
        }
        Command::Train {
            common,
            data,
            domains,
            subjects,
            sampler,
            lora,
            epochs,
            lr,
        } => {
            let mut cfg = base_config(&common, None)?;
            if data.is_some() {
                cfg.data = data;
            }
            if let Some(d) = domains {
                cfg.set_domains(&d)?;
            }
            if subjects.is_some() {
                cfg.train.subjects = subjects;
            }
            if let Some(s) = sampler {
                cfg.set_sampler(&s)?;
            }
            if let Some(l) = lora {
                cfg.set_lora(&l)?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.train.learning_rate = lr;
            }
            let out = cmd_train(&cfg, &out_dir(&common.out, "train"))?;
            if let Some(last) = out.epochs.last() {
                println!(
                    "epoch {}: loss {:.4} (id {:.4}, triplet {:.4})",
                    last.epoch, last.mean_loss, last.mean_id_loss, last.mean_triplet_loss
                );
            }
            if let Some(r) = &out.report {
                print!("{}", summary_csv(r));
            }
            println!("{}", out.run_dir.display());
        }
        Command::Eval {
            common,
            data,
            mode,
            run,
            checkpoint,
            features,
        } => {
            let source = match (run, checkpoint, features) {
                (Some(r), _, _) => EvalSource::Run(r),
                (_, Some(c), _) => EvalSource::Checkpoint(c),
                (_, _, Some(f)) => EvalSource::Features(f),
                _ => bail!("give one of --run, --checkpoint or --features"),
            };
            let fallback = match &source {
                EvalSource::Run(r) => Some(r.join(CONFIG_FILE)),
                _ => None,
            };
            let mut cfg = base_config(&common, fallback.as_deref())?;
            if data.is_some() {
                cfg.data = data;
            }
            if let Some(m) = mode {
                cfg.eval.mode = m.parse()?;
            }
            let out = cmd_eval(&cfg, &source, &out_dir(&common.out, "eval"))?;
            if let Some(r) = &out.report {
                print!("{}", summary_csv(r));
            }
            if let Some(m) = &out.matrix {
                print!("{}", m.to_csv());
            }
            if let Some(t) = &out.ablation {
                print!("{}", t.to_csv(&cfg.protocol.queries));
            }
            println!("{}", out.run_dir.display());
        }
        Command::Stats { run, out } => {
            let target = out.unwrap_or_else(|| {
                let name = run
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                run.with_file_name(format!("{name}-stats"))
            });
            let rows = cmd_stats(&run, &target)?;
            println!("epoch,pct_hard_pos_cross_domain,pct_hard_neg_same_domain");
            for r in rows {
                println!(
                    "{},{:.2},{:.2}",
                    r.epoch, r.pct_hard_pos_cross_domain, r.pct_hard_neg_same_domain
                );
            }
            println!("{}", target.display());
        }
        Command::Heatmap { features, ids, out } => {
            let target = out_dir(&out, "heatmap");
            let sim = cmd_heatmap(&features, &ids, &target)?;
            print!("{}", sim.to_csv());
            println!("{}", target.display());
        }
        Command::Sweep {
            common,
            data,
            axis,
            values,
        } => {
            let mut cfg = base_config(&common, None)?;
            if data.is_some() {
                cfg.data = data;
            }
            let axis = match (axis.as_str(), values) {
                ("sampler", _) => SweepAxis::Sampler,
                ("domains", None) => SweepAxis::default_domains(),
                ("domains", Some(v)) => SweepAxis::Domains(
                    v.split(';')
                        .map(parse_domain_list)
                        .collect::<Result<_, _>>()?,
                ),
                ("adaptation", v) => {
                    let mut probe = cfg.clone();
                    probe.set_lora(v.as_deref().unwrap_or(""))?;
                    SweepAxis::Adaptation(probe.train.lora.unwrap_or_else(LoraConfig::default))
                }
                ("subjects", Some(v)) => SweepAxis::Subjects(
                    v.split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<Result<_, _>>()
                        .context("subject counts")?,
                ),
                ("subjects", None) => bail!("--axis subjects needs --values, e.g. 5,10,20"),
                (other, _) => bail!("unknown sweep axis `{other}`"),
            };
            let target = out_dir(&common.out, "sweep");
            for r in cmd_sweep(&cfg, &axis, &target)? {
                let cells: Vec<String> =
                    r.rank1.iter().map(|(d, v)| format!("{d} {v:.3}")).collect();
                println!("{}: {}", r.label, cells.join(", "));
            }
            println!("{}", target.display());
        }
        Command::Rerun { run, out } => {
            let out = rerun(&run, &out_dir(&out, "rerun"))?;
            if let Some(r) = &out.report {
                print!("{}", summary_csv(r));
            }
            println!("{}", out.run_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
