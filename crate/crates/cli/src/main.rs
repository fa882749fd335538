//! `ovo`: score, split, evaluate and report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ovo_core::config::{OvoConfig, SourceFeatures};
use ovo_core::later::CorrectionMode;
use ovo_core::metrics::{assemble_reports, emit_report, read_split_eval, render_text, write_split_eval};
use ovo_core::ovosplit::{assignments_csv, build_splits, merge_topup, per_class_csv};
use ovo_core::pipeline::{
    compute_source_center, load_model_from, run_eval, score_manifest, write_predictions, write_scoring, EvalRequest,
};
use ovo_core::tensorio::{load_manifest, read_tensor, save_manifest, Manifest, Split};

#[derive(Parser)]
#[command(name = "ovo", version, about = "Viewpoint-shift benchmark tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every video in a manifest from its depth maps and poses.
    Score(ScoreArgs),
    /// Assign train / id_test / isolation / ood_test / excluded splits.
    Split(SplitArgs),
    /// Evaluate one split as an ordered stream.
    Eval(EvalArgs),
    /// Combine eval outputs into a robustness table.
    Report(ReportArgs),
}

#[derive(Args)]
struct ScoreArgs {
    /// Root holding `<video_id>/poses.txt` and `<video_id>/depth_<frame>.ovot`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Regex extracting the timestamp key from a video id.
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Scored manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Scored top-up manifest (origin=topup), merged into the OOD pool.
    #[arg(long)]
    topup: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    split: Split,
    /// Manifest with the split column filled.
    #[arg(long)]
    manifest: PathBuf,
    /// Root holding `<video_id>/features.ovot`.
    #[arg(long, alias = "data")]
    features: PathBuf,
    /// Directory with `lora_B_<layer>.ovot` files.
    #[arg(long)]
    lora: PathBuf,
    /// Directory with `classifier_W.ovot`, `classifier_b.ovot` and `classes.txt`.
    #[arg(long)]
    head: PathBuf,
    #[arg(long, default_value = "later")]
    mode: CorrectionMode,
    #[arg(long)]
    alpha: Option<f64>,
    /// Sliding-window size for the target queue; cumulative when unset.
    #[arg(long)]
    queue_capacity: Option<usize>,
    #[arg(long)]
    sv_threshold: Option<f64>,
    /// Precomputed source center (a d-vector tensor). Computed from the
    /// manifest's training videos when absent.
    #[arg(long)]
    source_center: Option<PathBuf>,
    /// Use every view of the training videos for the source center.
    #[arg(long)]
    all_views: bool,
    /// Method name in the report; defaults to the mode.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-video predictions as JSON lines.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Output JSON for this run.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Eval outputs written by `ovo eval`.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Text report; the JSON and CSV tables are written next to it.
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<OvoConfig> {
    Ok(OvoConfig::load_or_default(path)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn score(args: ScoreArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(p) = args.pattern {
        cfg.scoring.timestamp_pattern = Some(p);
    }
    if let Some(s) = args.seed {
        cfg.scoring.seed = s;
    }
    let manifest = load_manifest(&args.manifest)?;
    let outcome = score_manifest(&args.data, &manifest, &cfg)?;
    write_scoring(&outcome, &args.out)?;

    let unscored = outcome.videos.iter().filter(|v| v.score_deg.is_none()).count();
    eprintln!(
        "scored {} videos in {} groups ({} without a valid frame, {} unmatched ids)",
        outcome.videos.len(),
        outcome.groups.groups.len(),
        unscored,
        outcome.groups.unmatched.len()
    );
    Ok(())
}

fn split(args: SplitArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let mut split_cfg = cfg.split;
    if let Some(s) = args.seed {
        split_cfg.seed = s;
    }
    if let Some(k) = args.per_class {
        split_cfg.per_class_test_count = k;
    }
    let base = load_manifest(&args.manifest)?;
    let (merged, warnings) = match &args.topup {
        Some(path) => merge_topup(&base, &load_manifest(path)?, &split_cfg)?,
        None => (base, Vec::new()),
    };
    for w in &warnings {
        eprintln!("topup {}: excluded ({})", w.video_id, w.reason.as_str());
    }
    let out = build_splits(&merged, &split_cfg)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    save_manifest(&out.manifest, args.out.join("manifest.csv"))?;
    write(&args.out.join("assignments.csv"), &assignments_csv(&out.assignments))?;
    write(&args.out.join("per_class.csv"), &per_class_csv(&out.summary))?;
    let summary = serde_json::json!({ "summary": out.summary, "topup_warnings": warnings });
    write(&args.out.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;

    let c = &out.summary.counts;
    eprintln!(
        "train {}  id_test {}  isolation {}  ood_test {}  excluded {}",
        c.train, c.id_test, c.isolation, c.ood_test, c.excluded
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let mut later = cfg.later;
    if let Some(a) = args.alpha {
        later.alpha = a;
    }
    if args.queue_capacity.is_some() {
        later.queue_capacity = args.queue_capacity;
    }
    if let Some(t) = args.sv_threshold {
        later.sv_threshold_rel = t;
    }
    if args.all_views {
        later.source_features = SourceFeatures::AllViews;
    }

    let manifest: Manifest = load_manifest(&args.manifest)?;
    let model = load_model_from(&args.lora, &args.head)?;
    let source_center = match &args.source_center {
        Some(path) => read_tensor(path)?.to_vector()?,
        None => compute_source_center(&args.features, &manifest, later.source_features)?,
    };
    let req = EvalRequest {
        data: &args.features,
        manifest: &manifest,
        model: &model,
        source_center: &source_center,
        split: args.split,
        mode: args.mode,
        later,
        method: args.method.unwrap_or_else(|| args.mode.to_string()),
    };
    let (result, predictions) = run_eval(&req)?;
    if result.total == 0 {
        bail!("no videos in split {}", args.split);
    }
    write_split_eval(&result, &args.out)?;
    if let Some(path) = &args.predictions {
        write_predictions(&predictions, &model.head, path)?;
    }
    eprintln!(
        "{} on {}: {}/{} correct",
        result.method, result.split, result.correct, result.total
    );
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    if args.out.extension().is_some_and(|e| e == "json" || e == "csv") {
        bail!("--out names the text report; the .json and .csv tables are written next to it");
    }
    let runs = args
        .inputs
        .iter()
        .map(|p| read_split_eval(p))
        .collect::<Result<Vec<_>, _>>()?;
    let (reports, incomplete) = assemble_reports(&runs)?;
    for m in &incomplete {
        eprintln!("method {m}: needs both an id_test and an ood_test run, skipped");
    }
    if reports.is_empty() {
        bail!("no method has both an id_test and an ood_test run");
    }
    write(&args.out, &render_text(&reports))?;
    emit_report(&reports, &args.out.with_extension("json"))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score(a) => score(a),
        Command::Split(a) => split(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors often embed their source; skip causes already shown.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
