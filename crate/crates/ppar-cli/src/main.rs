//! Command-line front end for the `ppar` segmentation toolkit.
//!
//! Subcommands cover the whole artifact pipeline:
//!
//! ```text
//! gen-data          synthesize the two-domain benchmark datasets
//! scan-factors      mine per-class color/texture factors from the source domain
//! build-prototypes  embed class texts into prototype caches
//! train             run the training loop, writing metrics + checkpoints
//! eval              score a checkpoint on the target domains
//! report            pretty-print a stored evaluation report
//! ```
//!
//! Every config-driven command takes `--config <path>` plus optional
//! `--seed` / `--out` overrides applied before validation, so the overridden
//! document is what gets hashed into artifacts. Failures map onto a small
//! exit-code taxonomy: 2 for data/config problems, 3 for embedding-provider
//! trouble, 4 for numerical aborts, 5 for artifact/schema mismatches.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ppar::catalog::ClassCatalog;
use ppar::config::{self, ResolvedConfig, RunConfig};
use ppar::data::{ensure_toy_domain, FolderDataset, ToyDomainSpec};
use ppar::error::{Error, Result};
use ppar::eval::{cross_domain_eval, emit_figures, CrossDomainReport};
use ppar::factors::{load_factor_table, save_factor_table, scan_dataset_factors, VisualFactorTable};
use ppar::text::{build_otp, build_vtp, load_prototypes, save_prototypes, PrototypeSet};
use ppar::train::{load_checkpoint, FitOptions, Trainer};

#[derive(Parser)]
#[command(
    name = "ppar",
    version,
    about = "Training toolkit for prototype-guided domain-generalizable segmentation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// `--config` plus the overrides shared by every config-driven command.
#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic source/target benchmark under a directory
    GenData {
        /// Directory that will receive `source/` and `target/`
        #[arg(long)]
        out: PathBuf,
        /// Images per domain
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Square image size in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Generator seed (the target domain derives its own from this)
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Mine per-class color and texture factors from the training domain
    ScanFactors {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Embed class texts into the plain and factor-enriched prototype caches
    BuildPrototypes {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the training loop, writing metrics and checkpoints
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Resume from this checkpoint instead of starting fresh
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop after this iteration (an interruption, not a schedule
        /// change: a later resume continues the original schedule exactly)
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Score a checkpoint on every configured target domain
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to evaluate (defaults to the run's own)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretty-print the stored evaluation report for this configuration
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            // Surface the full cause chain; "json error in X" alone hides
            // the actual parse failure.
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData {
            out,
            count,
            size,
            seed,
        } => cmd_gen_data(&out, count, size, seed),
        Cmd::ScanFactors { cfg } => cmd_scan_factors(&load_config(&cfg)?),
        Cmd::BuildPrototypes { cfg } => cmd_build_prototypes(&load_config(&cfg)?),
        Cmd::Train {
            cfg,
            checkpoint,
            stop_after,
        } => cmd_train(&load_config(&cfg)?, checkpoint.as_deref(), stop_after),
        Cmd::Eval { cfg, checkpoint } => cmd_eval(&load_config(&cfg)?, checkpoint.as_deref()),
        Cmd::Report { cfg } => cmd_report(&load_config(&cfg)?),
    }
}

/// Parse the config file, apply CLI overrides, and validate. Relative paths
/// inside the document resolve against the config file's directory.
fn load_config(args: &ConfigArgs) -> Result<ResolvedConfig> {
    let mut run = RunConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        run.seed = seed;
    }
    if let Some(out) = &args.out {
        run.output_dir = out.clone();
    }
    let base = match args.config.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    config::resolve(run, &base)
}

fn ensure_output_dir(rc: &ResolvedConfig) -> Result<()> {
    std::fs::create_dir_all(&rc.output_dir).map_err(|e| Error::io(&rc.output_dir, e))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    // Distinct seeds keep the two domains' scene layouts independent; the
    // style gap between them is what makes the benchmark cross-domain.
    let source = ensure_toy_domain(
        &ToyDomainSpec::benchmark_source(seed),
        count,
        size,
        &out.join("source"),
    )?;
    let target = ensure_toy_domain(
        &ToyDomainSpec::benchmark_target(seed + 1),
        count,
        size,
        &out.join("target"),
    )?;
    println!(
        "source: {} images of {size}x{size} under {}",
        source.len(),
        source.root().display()
    );
    println!(
        "target: {} images of {size}x{size} under {}",
        target.len(),
        target.root().display()
    );
    println!("catalog: {}", out.join("source").join("catalog.json").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// scan-factors
// ---------------------------------------------------------------------------

fn cmd_scan_factors(rc: &ResolvedConfig) -> Result<()> {
    ensure_output_dir(rc)?;
    let dataset_id = &rc.run.training.dataset;
    let root = rc.dataset_path(dataset_id)?;
    let dataset = FolderDataset::open(root, &rc.catalog)?;
    let table = scan_dataset_factors(
        dataset.iter(),
        &rc.catalog,
        &rc.run.factors.lbp,
        dataset_id,
        &rc.hashes.factors,
    )?;
    let path = rc.factor_table_path();
    save_factor_table(&table, &path)?;

    println!(
        "scanned {} samples from '{dataset_id}' ({} classes)",
        dataset.len(),
        rc.catalog.n_classes()
    );
    println!(
        "{:>5}  {:<16} {:>8} {:>8} {:>12} {:>12}",
        "class", "name", "color", "texture", "color px", "texture px"
    );
    for row in &table.classes {
        let name = rc.catalog.name(row.class_id).unwrap_or("?");
        println!(
            "{:>5}  {:<16} {:>8} {:>8} {:>12} {:>12}",
            row.class_id,
            name,
            row.color_hex().unwrap_or_else(|| "-".into()),
            row.texture.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
            row.color_support,
            row.texture_support,
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// build-prototypes
// ---------------------------------------------------------------------------

fn cmd_build_prototypes(rc: &ResolvedConfig) -> Result<()> {
    ensure_output_dir(rc)?;
    let provider = rc.run.provider.connect()?;
    let enabled = rc.run.alignment.enabled_factors;

    let otp = build_otp(&rc.catalog, provider.as_ref())?;
    let vtp = if enabled.any() {
        let table_path = rc.factor_table_path();
        let table = load_factor_table(&table_path)?;
        if table.config_hash != rc.hashes.factors {
            return Err(Error::ArtifactMismatch(format!(
                "factor table {} was mined under a different configuration; rerun scan-factors",
                table_path.display()
            )));
        }
        build_vtp(&rc.catalog, &table, enabled, provider.as_ref())?
    } else {
        // No factor is enabled, so no table is consulted; the enriched texts
        // degenerate to the bare class names.
        let empty = VisualFactorTable {
            dataset_id: rc.run.training.dataset.clone(),
            config_hash: rc.hashes.factors.clone(),
            lbp: rc.run.factors.lbp.clone(),
            classes: Vec::new(),
        };
        build_vtp(&rc.catalog, &empty, enabled, provider.as_ref())?
    };

    let otp_path = rc.otp_path();
    let vtp_path = rc.vtp_path();
    save_prototypes(&otp, &rc.hashes.prototypes, &otp_path)?;
    save_prototypes(&vtp, &rc.hashes.prototypes, &vtp_path)?;

    println!("provider: {} (dim {})", otp.provider_id, otp.dim);
    for row in &otp.rows {
        println!("otp[{}] {}", row.class_id, row.text);
    }
    for row in &vtp.rows {
        println!("vtp[{}] {}", row.class_id, row.text);
    }
    println!("wrote {}", otp_path.display());
    println!("wrote {}", vtp_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Load a prototype cache and insist it was built under the active config.
fn load_required_prototypes(rc: &ResolvedConfig, path: &Path) -> Result<PrototypeSet> {
    let cache = load_prototypes(path)?;
    if cache.config_hash != rc.hashes.prototypes {
        return Err(Error::ArtifactMismatch(format!(
            "prototype cache {} was built under a different configuration; rerun build-prototypes",
            path.display()
        )));
    }
    Ok(cache.set)
}

fn cmd_train(
    rc: &ResolvedConfig,
    checkpoint: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<()> {
    ensure_output_dir(rc)?;
    let dataset_id = &rc.run.training.dataset;
    let dataset = FolderDataset::open(rc.dataset_path(dataset_id)?, &rc.catalog)?;
    let samples = dataset.load_all()?;

    let mode = rc.train.mode.clone();
    let otp = if mode.needs_otp() {
        Some(load_required_prototypes(rc, &rc.otp_path())?)
    } else {
        None
    };
    let vtp = if mode.needs_vtp() {
        Some(load_required_prototypes(rc, &rc.vtp_path())?)
    } else {
        None
    };

    let mut trainer = match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            Trainer::resume(
                rc.train.clone(),
                rc.catalog.clone(),
                otp,
                vtp,
                ckpt,
                &rc.hashes.full,
                &rc.hashes.catalog,
            )?
        }
        None => Trainer::new(rc.train.clone(), rc.catalog.clone(), otp, vtp)?,
    };
    let start_iter = trainer.iter;
    if start_iter > 0 {
        println!("resuming at iteration {start_iter}");
    }

    let metrics_path = rc.metrics_path();
    let opts = FitOptions {
        metrics_path: Some(metrics_path.clone()),
        checkpoint_path: Some(rc.checkpoint_path()),
        config_hash: rc.hashes.full.clone(),
        catalog_hash: rc.hashes.catalog.clone(),
        append_metrics: start_iter > 0,
        stop_after_iters: stop_after,
    };

    let rows = match trainer.fit(&samples, &opts) {
        Ok(rows) => rows,
        Err(err) => {
            if matches!(err, Error::NonFinite(_)) {
                eprintln!(
                    "diagnostics: {}",
                    metrics_path.with_file_name("diagnostics.json").display()
                );
            }
            return Err(err);
        }
    };

    for row in &rows {
        // Mirror the NDJSON rows on stdout so progress is visible live.
        println!(
            "{}",
            serde_json::to_string(row).expect("metrics row serializes")
        );
    }
    println!(
        "mode {}: ran {} iterations ({}..{})",
        mode.label(),
        rows.len(),
        start_iter,
        trainer.iter
    );
    println!("metrics: {}", metrics_path.display());
    println!("checkpoint: {}", rc.checkpoint_path().display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(rc: &ResolvedConfig, checkpoint: Option<&Path>) -> Result<()> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| rc.checkpoint_path());
    let ckpt = load_checkpoint(&path)?;
    // Checkpoints may come from other runs (different schedules, modes); all
    // evaluation requires is that the class set matches.
    if ckpt.catalog_hash != rc.hashes.catalog {
        return Err(Error::ArtifactMismatch(format!(
            "checkpoint {} was trained on catalog {} but the active catalog hashes to {}",
            path.display(),
            ckpt.catalog_hash,
            rc.hashes.catalog
        )));
    }

    if rc.run.evaluation.targets.is_empty() {
        return Err(Error::Validation(
            "evaluation.targets lists no domains to score".into(),
        ));
    }
    let mut targets = Vec::new();
    for domain in &rc.run.evaluation.targets {
        let dataset = FolderDataset::open(rc.dataset_path(domain)?, &rc.catalog)?;
        targets.push((domain.clone(), dataset.load_all()?));
    }

    let report = cross_domain_eval(
        &ckpt.payload.backbone,
        &rc.run.training.dataset,
        &targets,
        &rc.catalog,
        &rc.hashes.full,
    )?;
    let written = emit_figures(&report, &rc.eval_dir())?;

    println!("checkpoint: {} (iteration {})", path.display(), ckpt.payload.iter);
    for target in &report.targets {
        println!("{}: mIoU {:.4}", target.domain, target.miou);
    }
    println!("avg mIoU {:.4}", report.avg_miou);
    for file in &written {
        println!("wrote {}", file.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn cmd_report(rc: &ResolvedConfig) -> Result<()> {
    let path = rc
        .eval_dir()
        .join(format!("report_{}.json", rc.hashes.full));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: CrossDomainReport =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;

    print_report(&report, &rc.catalog);
    Ok(())
}

fn print_report(report: &CrossDomainReport, catalog: &ClassCatalog) {
    println!("train domain: {}", report.train_domain);
    println!("config:       {}", report.config_hash);
    for target in &report.targets {
        println!();
        println!("target '{}': mIoU {:.4}", target.domain, target.miou);
        println!("{:>5}  {:<16} {:>8}", "class", "name", "IoU");
        for class in &target.per_class {
            let name = u8::try_from(class.class_id)
                .ok()
                .and_then(|id| catalog.name(id))
                .unwrap_or("?");
            let iou = match class.iou {
                Some(v) => format!("{v:.4}"),
                None => "n/a".into(),
            };
            println!("{:>5}  {:<16} {:>8}", class.class_id, name, iou);
        }
    }
    println!();
    println!(
        "average mIoU over {} target(s): {:.4}",
        report.targets.len(),
        report.avg_miou
    );
}
