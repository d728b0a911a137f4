use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sedet::commands::{cmd_anchors, cmd_compare, cmd_detect, cmd_eval, cmd_synth, cmd_train};
use sedet::error::ErrorClass;
use sedet::postprocess::write_detections;
use sedet::train::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "sedet", version, about = "Train, evaluate and run a small anchor-based detector")]
struct Cli {
    /// Run configuration (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (PPM images, labelme files, manifest).
    Synth {
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Cluster dataset box sizes into anchors.
    Anchors {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 9)]
        k: usize,
    },
    /// Train a model.
    Train {
        /// Training manifest; overrides `train_manifest` from the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate one checkpoint, or two and compare them.
    Eval {
        #[arg(long, required = true, num_args = 1..=2)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Detect objects in PPM images.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write copies of the images with boxes drawn.
        #[arg(long)]
        annotate: bool,
        images: Vec<PathBuf>,
    },
    /// Compare two evaluation reports.
    Compare { a: PathBuf, b: PathBuf },
}

/// Command-line misuse not caught by the argument parser.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.set_seed(cli.seed.unwrap_or(cfg.seed));
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::Synth { count } => {
            let manifest = cmd_synth(&cfg, count, &out)?;
            println!("wrote {count} scenes, manifest {}", manifest.display());
        }
        Command::Anchors { manifest, k } => {
            let path = out.join("anchors.json");
            let report = cmd_anchors(&cfg, &manifest, k, &path)?;
            print!("{}", report.table());
            println!("anchors written to {}", path.display());
        }
        Command::Train { manifest, val, epochs } => {
            if let Some(m) = manifest {
                cfg.train_manifest = Some(m);
            }
            if let Some(v) = val {
                cfg.val_manifest = Some(v);
            }
            if let Some(e) = epochs {
                cfg.optimizer.epochs = e;
            }
            if cfg.train_manifest.is_none() {
                bail!(Usage("train needs --manifest or train_manifest in the config".into()));
            }
            println!("{}", sedet::train::LOG_HEADER);
            let outcome = cmd_train(&cfg, |e| println!("{}", e.tsv()))?;
            match outcome.best_map {
                Some(m) => println!("best mAP {m:.5}; checkpoints in {}", out.display()),
                None => println!("checkpoints in {}", out.display()),
            }
        }
        Command::Eval { checkpoint, manifest } => {
            let single = checkpoint.len() == 1;
            let mut reports = Vec::new();
            for (i, ck) in checkpoint.iter().enumerate() {
                let dir = if single { out.clone() } else { out.join(["a", "b"][i]) };
                let report = cmd_eval(ck, &manifest, &cfg.nms, cfg.eval_iou_threshold, &dir)
                    .with_context(|| format!("evaluating {}", ck.display()))?;
                println!("{}", ck.display());
                print!("{}", report.table());
                reports.push(report);
            }
            if let [a, b] = &reports[..] {
                let cmp = sedet::metrics::compare_runs(a, b)?;
                print!("{}", cmp.table());
                write_json(&out.join("comparison.json"), &cmp)?;
            }
        }
        Command::Detect { checkpoint, annotate, images } => {
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let annotated = out.join("annotated");
            let result = cmd_detect(&checkpoint, &images, &cfg.nms, annotate.then_some(annotated.as_path()))?;
            let path = out.join("detections.json");
            write_detections(&path, &result.records)?;
            println!("{} detections from {} images written to {}", result.records.len(), images.len() - result.failures.len(), path.display());
            for (_, e) in &result.failures {
                eprintln!("error: {e}");
            }
            let failed = result.failures.len();
            if let Some((_, e)) = result.failures.into_iter().next() {
                return Err(anyhow::Error::new(e).context(format!("{failed} image(s) could not be processed")));
            }
        }
        Command::Compare { a, b } => {
            let cmp = cmd_compare(&a, &b)?;
            print!("{}", cmp.table());
            if cli.out.is_some() {
                std::fs::create_dir_all(&out)?;
                write_json(&out.join("comparison.json"), &cmp)?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<sedet::Error>() {
            return match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            };
        }
    }
    2
}

/// The error chain joined by `: `, skipping causes already spelled out by
/// the message before them.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.ends_with(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
