mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use glyphscope::data::{
    load_dataset, load_image, png_files, stratified_kfold, synth_glyphs, write_dataset, LoadReport, Sample, SkipEntry,
};
use glyphscope::explain::{colormap_overlay, emit_png, explain, CamReport};
use glyphscope::train::{evaluate, run_cross_validation, train_fold, Checkpoint, CvOptions, Evaluation, TrainError};
use glyphscope::Model32;
use serde_json::json;

use config::{ExplainConfig, Overrides, RunConfig};
use report::{mean, metrics_csv, table, write_json, write_text, SplitReport};

/// Training allocates and frees many large activation buffers per step.
/// Keeping them on the heap instead of fresh mappings avoids a page-fault
/// storm that otherwise costs about a fifth of the run time.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    // SAFETY: mallopt only adjusts allocator thresholds and is called
    // before any other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

#[derive(Debug, Parser)]
#[command(
    name = "glyphscope",
    version,
    about = "Train, cross-validate and explain a letter-reversal classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic glyph dataset as PNG files.
    Synth {
        /// Images per class.
        #[arg(short, long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model, validating on the first stratified fold.
    Train(RunArgs),
    /// Stratified K-fold cross-validation.
    Cv(RunArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root with one directory per class.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Grad-CAM overlays for one PNG or every PNG under a directory.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Class to explain; defaults to the predicted class.
        #[arg(long)]
        target: Option<usize>,
        /// Integer enlargement of the written overlays.
        #[arg(long)]
        scale: Option<usize>,
        /// Reads overlay settings from the `explain` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "explain")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
}

fn main() -> ExitCode {
    tune_allocator();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { n, seed, out } => cmd_synth(n, seed, &out),
        Command::Train(args) => cmd_run(&args, false),
        Command::Cv(args) => cmd_run(&args, true),
        Command::Eval { checkpoint, data, out } => cmd_eval(&checkpoint, &data, &out),
        Command::Explain {
            checkpoint,
            input,
            target,
            scale,
            config,
            out,
        } => cmd_explain(&checkpoint, &input, target, scale, config.as_deref(), &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_synth(n: usize, seed: u64, out: &Path) -> Result<()> {
    if n == 0 {
        bail!("synth: --n must be at least 1");
    }
    let ds = synth_glyphs(n, seed);
    let written = write_dataset(&ds, out).context("synth")?;
    println!("wrote {} images to {}", written.len(), out.display());
    Ok(())
}

fn load(root: &Path, class_names: &[String], what: &str) -> Result<LoadReport> {
    let report = load_dataset(root, class_names).with_context(|| format!("load_dataset ({what})"))?;
    log::info!(
        "{what}: {} samples from {}, counts {:?}, {} skipped",
        report.dataset.len(),
        root.display(),
        report.dataset.counts(),
        report.skipped.len()
    );
    Ok(report)
}

fn split_report(
    split: String,
    eval: &Evaluation,
    best_epoch: Option<usize>,
    history: Vec<glyphscope::train::EpochRecord>,
) -> SplitReport {
    SplitReport {
        split,
        metrics: eval.report.clone(),
        confusion: eval.confusion.clone(),
        best_epoch,
        history,
    }
}

/// `train` and `cv`: load, fit, and write checkpoints plus reports.
fn cmd_run(args: &RunArgs, cross_validate: bool) -> Result<()> {
    let started = Instant::now();
    let mut cfg = RunConfig::load(&args.config).context("config")?;
    cfg.apply(&Overrides {
        seed: args.seed,
        out: args.out.clone(),
        folds: args.folds,
    });
    cfg.validate().context("config")?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("output: cannot create {}", out.display()))?;

    let train_set = load(cfg.data_root().context("config")?, &cfg.data.class_names, "data")?;
    let test_set = match &cfg.data.test_root {
        Some(root) => Some(load(root, &cfg.data.class_names, "test data")?),
        None => None,
    };
    let mut skipped: Vec<SkipEntry> = train_set.skipped.clone();
    skipped.extend(test_set.iter().flat_map(|t| t.skipped.iter().cloned()));
    write_json(&out.join("skipped.json"), &skipped)?;

    let ds = &train_set.dataset;
    let opts = CvOptions {
        augment: Some(&cfg.augment),
        test: test_set.as_ref().map(|t| &t.dataset),
        checkpoint_dir: None,
    };
    let mut splits = Vec::new();
    let best_fold;
    let command;
    if cross_validate {
        command = "cv";
        let folds_dir = out.join("folds");
        let opts = CvOptions {
            checkpoint_dir: Some(&folds_dir),
            ..opts
        };
        let result = run_cross_validation::<f32>(ds, &cfg.model, &cfg.train, &opts).context("cross_validation")?;
        for f in &result.folds {
            splits.push(split_report(
                f.fold.to_string(),
                &f.evaluation,
                Some(f.best_epoch),
                f.history.clone(),
            ));
        }
        best_fold = Some(result.best_fold);
        if let Some(test) = &result.test {
            splits.push(split_report("test".into(), test, None, Vec::new()));
        }
    } else {
        command = "train";
        cfg.train.validate().context("config")?;
        let plan = stratified_kfold(&ds.labels(), cfg.train.k_folds, cfg.train.seed).context("stratified_kfold")?;
        let result = train_fold::<f32>(ds, &plan, 0, &cfg.model, &cfg.train, &opts).context("train")?;
        result.checkpoint.save(&out.join("best.ckpt")).context("checkpoint")?;
        splits.push(split_report(
            "holdout".into(),
            &result.evaluation,
            Some(result.best_epoch),
            result.history.clone(),
        ));
        best_fold = None;
        if let Some(test) = opts.test {
            let model: Model32 = result.checkpoint.restore_model().context("checkpoint")?;
            let eval = evaluate(&model, &test.samples, cfg.train.batch_size).context("evaluate")?;
            splits.push(split_report("test".into(), &eval, None, Vec::new()));
        }
    }

    let fold_reports: Vec<_> = splits
        .iter()
        .filter(|s| s.split != "test")
        .map(|s| &s.metrics)
        .collect();
    let summary = mean(&fold_reports);
    write_text(&out.join("metrics.csv"), &metrics_csv(&splits))?;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "averaging": "macro",
            "class_names": ds.class_names,
            "splits": splits,
            "mean": summary,
            "best_fold": best_fold,
        }),
    )?;
    let confusion: Vec<_> = splits
        .iter()
        .map(|s| json!({"split": s.split, "counts": s.confusion.counts}))
        .collect();
    write_json(
        &out.join("confusion.json"),
        &json!({"class_names": ds.class_names, "splits": confusion}),
    )?;
    write_json(
        &out.join("run_manifest.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg,
            "seeds": {"train": cfg.train.seed, "augment": cfg.augment.seed},
            "dataset": {"root": cfg.data.root, "counts": ds.counts(), "skipped": skipped.len()},
            "wall_time_secs": started.elapsed().as_secs_f64(),
        }),
    )?;
    print!("{}", table(&splits));
    println!(
        "mean: precision {:.4} recall {:.4} f1 {:.4} accuracy {:.4}",
        summary.precision, summary.recall, summary.f1, summary.accuracy
    );
    if let Some(b) = best_fold {
        println!("best fold: {b}");
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).context("checkpoint")?;
    let classes = &ckpt.meta.class_names;
    let present: Vec<&String> = classes.iter().filter(|c| data.join(c).is_dir()).collect();
    if present.len() != classes.len() && data.is_dir() {
        let dirs = class_dirs(data)?;
        if dirs.len() != classes.len() {
            return Err(TrainError::ClassMismatch(format!(
                "checkpoint has {} classes {classes:?}, dataset has {} class directories {dirs:?}",
                classes.len(),
                dirs.len()
            )))
            .context("eval");
        }
    }
    let model: Model32 = ckpt.restore_model().context("checkpoint")?;
    let loaded = load(data, classes, "data")?;
    let eval = evaluate(&model, &loaded.dataset.samples, 64).context("evaluate")?;
    fs::create_dir_all(out).with_context(|| format!("output: cannot create {}", out.display()))?;
    let split = split_report("eval".into(), &eval, None, Vec::new());
    write_json(
        &out.join("confusion.json"),
        &json!({"class_names": classes, "counts": eval.confusion.counts}),
    )?;
    write_json(
        &out.join("metrics.json"),
        &json!({"checkpoint": checkpoint, "report": eval.report}),
    )?;
    write_json(&out.join("skipped.json"), &loaded.skipped)?;
    print!("{}", table(&[split]));
    for (name, c) in classes.iter().zip(&eval.report.per_class) {
        println!(
            "  {name:<10} precision {:.4} recall {:.4} f1 {:.4} support {}",
            c.precision, c.recall, c.f1, c.support
        );
    }
    Ok(())
}

fn class_dirs(root: &Path) -> Result<Vec<String>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).with_context(|| format!("load_dataset: cannot read {}", root.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            dirs.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Output file stem for an input image: its path below `root` with
/// separators replaced.
fn output_stem(path: &Path, root: &Path) -> String {
    let rel = path
        .strip_prefix(root)
        .ok()
        .filter(|r| !r.as_os_str().is_empty())
        .unwrap_or(path);
    let rel = rel.with_extension("");
    let parts: Vec<String> = rel
        .components()
        .filter_map(|c| match c {
            std::path::Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect();
    parts.join("_")
}

fn cmd_explain(
    checkpoint: &Path,
    input: &Path,
    target: Option<usize>,
    scale: Option<usize>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let settings = match config {
        Some(p) => RunConfig::load(p).context("config")?.explain,
        None => ExplainConfig::default(),
    };
    let scale = scale.unwrap_or(settings.scale);
    if scale == 0 {
        bail!("explain: --scale must be at least 1");
    }
    let ckpt = Checkpoint::load(checkpoint).context("checkpoint")?;
    let model: Model32 = ckpt.restore_model().context("checkpoint")?;
    let classes = &ckpt.meta.class_names;
    if let Some(t) = target.filter(|&t| t >= classes.len()) {
        bail!("explain: --target {t} out of range for {} classes", classes.len());
    }
    let (files, root) = if input.is_dir() {
        (png_files(input).context("explain")?, input.to_path_buf())
    } else if input.is_file() {
        (
            vec![input.to_path_buf()],
            input.parent().unwrap_or(Path::new("")).to_path_buf(),
        )
    } else {
        bail!("explain: {} does not exist", input.display());
    };
    fs::create_dir_all(out).with_context(|| format!("output: cannot create {}", out.display()))?;

    let mut done = 0;
    for path in &files {
        let pixels = match load_image(path) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let sample = Sample::new(pixels, 0, path.display().to_string());
        let e = explain(&model, &sample, target, &settings.layer).context("grad_cam")?;
        let overlay = colormap_overlay(sample.pixels(), &e.heatmap, settings.alpha).context("colormap_overlay")?;
        let stem = output_stem(path, &root);
        emit_png(&overlay, &out.join(format!("{stem}_cam.png")), scale).context("emit_png")?;
        write_json(
            &out.join(format!("{stem}_cam.json")),
            &CamReport::new(&sample.source_id, &e),
        )?;
        println!(
            "{}: predicted {} (p = {:.4}), explained {}",
            path.display(),
            classes[e.predicted_class],
            e.probabilities[e.predicted_class],
            classes[e.heatmap.target_class]
        );
        done += 1;
    }
    if done == 0 {
        bail!("explain: no readable PNG images under {}", input.display());
    }
    println!(
        "{done} of {} images explained, outputs in {}",
        files.len(),
        out.display()
    );
    Ok(())
}
