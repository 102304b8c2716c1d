use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use priornet::backbone::{read_checkpoint, write_checkpoint};
use priornet::clip::{assemble_clip, load_frame_dir, plan_frame_indices, read_detection_sidecar, write_clip, write_dataset};
use priornet::harness::{evaluate, missingness_diagnostic, run_ablation_on, train, AblationRun, Dataset, TrainConfig};
use priornet::objective::run_gradcheck;
use priornet::synth::{generate_dataset, SynthSpec};
use priornet::Result;

const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "priornet", version, about = "Engagement estimation with zero-frame placeholders, Q/K/V adapters and an evidential loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a directory of PNG frames plus a detection sidecar into one clip file.
    Preprocess {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        sidecar: PathBuf,
        /// A `.pncl` file, or a directory that receives the next free `clip_NNNNN.pncl`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        clip_len: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        label: usize,
        #[arg(long, default_value = "unknown")]
        subject: String,
    },
    /// Generate a synthetic clip directory from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters and head; writes a checkpoint and prints the run summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the summary JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Metrics of a checkpoint on a clip directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train all eight component combinations for several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-missingness-group accuracy of checkpoint A against checkpoint B.
    Diagnose {
        #[arg(long = "ckpt-a")]
        ckpt_a: PathBuf,
        #[arg(long = "ckpt-b")]
        ckpt_b: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare the analytic loss gradient with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(p) = path {
        fs::write(p, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn next_clip_path(out: &Path) -> Result<PathBuf> {
    if out.extension().is_some_and(|e| e == "pncl") {
        return Ok(out.to_path_buf());
    }
    fs::create_dir_all(out)?;
    let n = (0..)
        .find(|i| !out.join(format!("clip_{i:05}.pncl")).exists())
        .expect("unbounded range");
    Ok(out.join(format!("clip_{n:05}.pncl")))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    history: &'a [priornet::harness::EpochLoss],
    eval_subjects: &'a [String],
    eval_report: &'a priornet::harness::MetricsReport,
    frozen_checksum: &'a str,
}

#[derive(Serialize)]
struct AblationGrid {
    runs: Vec<AblationRun>,
    full_best_seeds: usize,
}

/// `Ok(false)` reports a completed check that did not pass.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Preprocess {
            frames,
            sidecar,
            out,
            clip_len,
            size,
            label,
            subject,
        } => {
            let raw = load_frame_dir(&frames)?;
            let detections = read_detection_sidecar(&sidecar)?;
            let plan = plan_frame_indices(raw.len(), clip_len)?;
            let (clip, meta) = assemble_clip(&raw, &detections, &plan, size, label, &subject)?;
            let path = next_clip_path(&out)?;
            write_clip(&path, &clip, &meta)?;
            eprintln!("wrote {} ({} of {} frames missing)", path.display(), meta.missing_count, clip_len);
        }
        Command::Synth { spec, out } => {
            let spec: SynthSpec = serde_json::from_str(&fs::read_to_string(spec)?)?;
            let (clips, metas) = generate_dataset(&spec)?;
            let paths = write_dataset(&out, &clips, &metas)?;
            eprintln!("wrote {} clips to {}", paths.len(), out.display());
        }
        Command::Train { config, out, report } => {
            let cfg = TrainConfig::from_json_file(config)?;
            let outcome = train(&cfg)?;
            write_checkpoint(&out, &outcome.model, cfg.toggles.placeholders)?;
            let summary = TrainSummary {
                history: &outcome.history,
                eval_subjects: &outcome.split.eval_subjects,
                eval_report: &outcome.eval_report,
                frozen_checksum: &outcome.checksum_after,
            };
            emit(&summary, report.as_deref())?;
        }
        Command::Eval { ckpt, data, report } => {
            let (model, header) = read_checkpoint(ckpt)?;
            let dataset = Dataset::load(data)?.with_placeholders(header.placeholders);
            emit(&evaluate(&model, &dataset)?, report.as_deref())?;
        }
        Command::Ablate { config, seeds, out } => {
            let base = TrainConfig::from_json_file(config)?;
            let mut runs = Vec::new();
            for seed in base.seed..base.seed + seeds {
                let cfg = base.reseeded(seed);
                let dataset = cfg.load_data()?;
                let run = run_ablation_on(&cfg, &dataset)?;
                eprintln!("seed {seed}: full accuracy {:.3}, best = {}", run.full().accuracy, run.full_is_best());
                runs.push(run);
            }
            let full_best_seeds = runs.iter().filter(|r| r.full_is_best()).count();
            fs::write(&out, serde_json::to_string_pretty(&AblationGrid { runs, full_best_seeds })?)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Diagnose {
            ckpt_a,
            ckpt_b,
            data,
            report,
        } => {
            let (a, ha) = read_checkpoint(ckpt_a)?;
            let (b, hb) = read_checkpoint(ckpt_b)?;
            let dataset = Dataset::load(data)?;
            emit(&missingness_diagnostic(&a, ha.placeholders, &b, hb.placeholders, &dataset)?, report.as_deref())?;
        }
        Command::Gradcheck { trials, seed } => {
            let report = run_gradcheck(trials, seed)?;
            emit(&report, None)?;
            if report.max_rel_error >= GRADCHECK_TOLERANCE {
                eprintln!("max relative error {:e} exceeds {GRADCHECK_TOLERANCE:e}", report.max_rel_error);
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
