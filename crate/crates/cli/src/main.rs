//! `sqa`: train, evaluate and run speech quality assessment models.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use sqa_core::audio::{
    load_wav, magnitude_spectrogram, synth_dataset, Manifest, SynthOptions, Task,
};
use sqa_core::model::{load_checkpoint, Model, ModelInput};
use sqa_core::train::{
    check_names, evaluate, export_embeddings, load_examples, mean_report, run_check, train,
    write_predictions, GradCheckOptions, GRAD_TOLERANCE,
};

use config::RunConfig;

/// Environment variable naming the default parent of run directories.
const RUNS_DIR_ENV: &str = "SQA_RUNS_DIR";

#[derive(Parser)]
#[command(
    name = "sqa",
    version,
    about = "Speech quality and speaker similarity assessment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes best.ckpt, log.csv, config.resolved and report.txt
    Train {
        /// `key = value` run configuration
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        /// Run directory (default: $SQA_RUNS_DIR/<variant>, SQA_RUNS_DIR defaulting to `runs`)
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Training seed; repeat to train one run per seed in `seed_<n>` subdirectories
        #[arg(long)]
        seed: Vec<u64>,
        /// Overrides the configured epoch count
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Score a manifest and report utterance- and system-level metrics
    Eval {
        /// Checkpoint; repeat to average metrics over seeds
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the report to this file
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write per-item predictions as CSV (single checkpoint only)
        #[arg(long)]
        dump_predictions: Option<PathBuf>,
    },
    /// Score one utterance, or one pair with a similarity checkpoint
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Second utterance of the pair
        #[arg(long)]
        wav_b: Option<PathBuf>,
        /// Also print one score per frame
        #[arg(long)]
        frames: bool,
    },
    /// Export per-frame BLSTM features of a MOS model as CSV
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences
    Gradcheck {
        /// `all` or one check name
        #[arg(long, default_value = "all")]
        module: String,
        /// Random draws per check
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random coordinates checked per tensor per draw
        #[arg(long, default_value_t = 2)]
        coords: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write a synthetic corpus: WAV files plus manifest.csv
    Synth {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// `mos` or `similarity`
        #[arg(long, default_value = "mos")]
        mode: Task,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train {
            config,
            train_manifest,
            val_manifest,
            out_dir,
            seed,
            epochs,
            quiet,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            cfg.train_manifest = train_manifest.or(cfg.train_manifest);
            cfg.val_manifest = val_manifest.or(cfg.val_manifest);
            cfg.out_dir = out_dir.or(cfg.out_dir);
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cmd_train(cfg, &seed, quiet)
        }
        Command::Eval {
            ckpt,
            manifest,
            report,
            dump_predictions,
        } => cmd_eval(
            &ckpt,
            &manifest,
            report.as_deref(),
            dump_predictions.as_deref(),
        ),
        Command::Predict {
            ckpt,
            wav,
            wav_b,
            frames,
        } => cmd_predict(&ckpt, &wav, wav_b.as_deref(), frames),
        Command::Embed {
            ckpt,
            manifest,
            out,
        } => {
            let model = load_checkpoint(&ckpt, None)?;
            let data = load_examples(&Manifest::read(&manifest)?)?;
            let rows = export_embeddings(&model, &data, &out)?;
            println!("wrote {rows} frames to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            module,
            trials,
            seed,
            coords,
            inject_fault,
        } => cmd_gradcheck(
            &module,
            &GradCheckOptions {
                trials,
                seed,
                coords_per_tensor: coords,
                inject_fault,
                ..Default::default()
            },
        ),
        Command::Synth {
            seed,
            n,
            mode,
            out_dir,
        } => {
            let manifest = synth_dataset(&out_dir, &SynthOptions::new(seed, n, mode))?;
            println!("{}", manifest.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).with_context(|| format!("{}", p.display()))
}

fn read_manifest(p: &Path) -> Result<Manifest> {
    Manifest::read(p).with_context(|| format!("reading manifest {}", p.display()))
}

fn cmd_train(mut cfg: RunConfig, seeds: &[u64], quiet: bool) -> Result<ExitCode> {
    let train_path = cfg
        .train_manifest
        .clone()
        .context("no training manifest (--train-manifest)")?;
    let val_path = cfg
        .val_manifest
        .clone()
        .context("no validation manifest (--val-manifest)")?;
    cfg.train_manifest = Some(absolute(&train_path)?);
    cfg.val_manifest = Some(absolute(&val_path)?);
    let train_set = load_examples(&read_manifest(&train_path)?)?;
    let val_set = load_examples(&read_manifest(&val_path)?)?;
    let root = match &cfg.out_dir {
        Some(d) => d.clone(),
        None => {
            let base =
                std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            base.join(cfg.model.variant_name().to_lowercase().replace('+', "_"))
        }
    };
    let seeds = if seeds.is_empty() {
        vec![cfg.train.seed]
    } else {
        seeds.to_vec()
    };
    for &seed in &seeds {
        let dir = if seeds.len() == 1 {
            root.clone()
        } else {
            root.join(format!("seed_{seed}"))
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut run = cfg.clone();
        run.train.seed = seed;
        run.out_dir = Some(absolute(&dir)?);
        fs::write(dir.join("config.resolved"), run.to_text())
            .with_context(|| format!("writing {}", dir.join("config.resolved").display()))?;
        let epochs = run.train.epochs;
        let summary = train(&run.model, &run.train, &train_set, &val_set, &dir, |r| {
            if !quiet {
                eprintln!(
                    "[{} seed {seed}] epoch {}/{epochs} train_loss {:.6} val_mse {:.6}",
                    run.model, r.epoch, r.train_loss, r.val_mse
                );
            }
        })?;
        let best = load_checkpoint(dir.join("best.ckpt"), Some(&run.model))?;
        let (report, _) = evaluate(&best, &val_set)?;
        let text = format!(
            "# {} seed {seed}, best epoch {} on {}\n{}",
            run.model,
            summary.best_epoch,
            val_path.display(),
            report.to_text()
        );
        fs::write(dir.join("report.txt"), &text)?;
        println!(
            "{}: best epoch {} val_mse {}",
            dir.display(),
            summary.best_epoch,
            summary.best_val_mse
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(
    ckpts: &[PathBuf],
    manifest: &Path,
    report_path: Option<&Path>,
    dump: Option<&Path>,
) -> Result<ExitCode> {
    ensure!(
        dump.is_none() || ckpts.len() == 1,
        "--dump-predictions needs exactly one --ckpt"
    );
    let manifest_data = read_manifest(manifest)?;
    let models: Vec<Model> = ckpts
        .iter()
        .map(|p| load_checkpoint(p, None).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    for (m, p) in models.iter().zip(ckpts) {
        if m.config().task != manifest_data.task() {
            bail!(
                "{} is a {} checkpoint but {} has the {} schema",
                p.display(),
                m.config().task,
                manifest.display(),
                manifest_data.task()
            );
        }
    }
    let data = load_examples(&manifest_data)?;
    let mut reports = Vec::with_capacity(models.len());
    for (m, p) in models.iter().zip(ckpts) {
        let (report, rows) =
            evaluate(m, &data).with_context(|| format!("evaluating {}", p.display()))?;
        if let Some(d) = dump {
            write_predictions(d, m.config().task, &rows)?;
        }
        reports.push(report);
    }
    let report = mean_report(&reports)?;
    let mut text = String::new();
    if reports.len() > 1 {
        text.push_str(&format!("# mean over {} checkpoints\n", reports.len()));
    }
    text.push_str(&report.to_text());
    print!("{text}");
    if let Some(p) = report_path {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn load_spec(p: &Path) -> Result<sqa_core::audio::Spectrogram> {
    let wave = load_wav(p)?;
    magnitude_spectrogram(&wave).with_context(|| format!("{}", p.display()))
}

fn cmd_predict(ckpt: &Path, wav: &Path, wav_b: Option<&Path>, frames: bool) -> Result<ExitCode> {
    let model = load_checkpoint(ckpt, None)?;
    let input = match (model.config().task, wav_b) {
        (Task::Mos, None) => ModelInput::single(load_spec(wav)?),
        (Task::Similarity, Some(b)) => ModelInput::pair(load_spec(wav)?, load_spec(b)?),
        (Task::Similarity, None) => {
            eprintln!(
                "error: {} scores utterance pairs; pass --wav-b",
                model.config()
            );
            return Ok(ExitCode::from(2));
        }
        (Task::Mos, Some(_)) => {
            eprintln!(
                "error: {} scores single utterances; drop --wav-b",
                model.config()
            );
            return Ok(ExitCode::from(2));
        }
    };
    let out = model.predict(&input)?;
    println!("{}", out.utterance_score);
    if frames {
        for s in &out.frame_scores {
            println!("{s}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(module: &str, opts: &GradCheckOptions) -> Result<ExitCode> {
    let names = check_names();
    let selected: Vec<String> = if module == "all" {
        names
    } else if names.iter().any(|n| n == module) {
        vec![module.to_string()]
    } else {
        bail!(
            "unknown module `{module}`; choose `all` or one of: {}",
            names.join(", ")
        );
    };
    let mut all_ok = true;
    for name in &selected {
        let out = run_check(name, opts)?;
        let verdict = if out.passed() { "ok" } else { "FAIL" };
        all_ok &= out.passed();
        println!(
            "{:<16} trials {:>3}  coords {:>5}  kinks {:>3}  max_rel_err {:.3e}  {verdict}",
            out.name, out.trials, out.coordinates, out.skipped, out.max_rel_error
        );
    }
    println!(
        "{} (tolerance {GRAD_TOLERANCE:e})",
        if all_ok {
            "all checks passed"
        } else {
            "gradient check FAILED"
        }
    );
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
