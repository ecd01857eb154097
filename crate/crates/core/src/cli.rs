//! Command implementations behind the `mitnet` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analyze::{analyze, AnalysisSummary};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{load_dataset, read_png, write_png};
use crate::error::{Error, Result};
use crate::model::{count_parameters, Variant};
use crate::train::{evaluate, EvalReport, TrainSummary, Trainer};

#[derive(Debug, Parser)]
#[command(name = "mitnet", version, about = "Two-stage spatial-frequency dehazing network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report PSNR/SSIM of a checkpoint on a `hazy/` + `gt/` folder.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-image CSV (default: `<data>/eval.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the dehazed images here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Dehaze one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate several variants and print a comparison table.
    Ablate {
        /// Comma-separated names, e.g. `M1,M6,Me`, or `all`.
        #[arg(long)]
        variants: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Histograms, spectral disparity maps and feature grids for one pair.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
    },
}

pub fn cmd_train(config: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let cfg = RunConfig::load(config)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg, &Checkpoint::load(path)?)?,
        None => Trainer::new(cfg)?,
    };
    trainer.run()
}

pub fn cmd_eval(ckpt: &Path, data: &Path, out: Option<&Path>, dump: Option<&Path>) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt)?;
    let net = ck.restore_model()?;
    let ds = load_dataset(data)?;
    if let Some(d) = dump {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let report = evaluate(&net, &ds.samples, dump)?;
    let mut csv = format!("# config_hash: {}\nid,psnr,ssim\n", ck.config.hash());
    for (id, p, s) in &report.per_image {
        writeln!(csv, "{id},{p},{s}").unwrap();
    }
    writeln!(csv, "mean,{},{}", report.mean_psnr, report.mean_ssim).unwrap();
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| data.join("eval.csv"));
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

pub fn cmd_infer(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let net = Checkpoint::load(ckpt)?.restore_model()?;
    let (_, y2) = net.infer(&read_png(input)?)?;
    write_png(out, &y2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(Variant::ALL.to_vec());
    }
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// Train each variant with the base config's schedule (outputs under
/// `<out_dir>/<variant>`), evaluate it on the training pairs and write
/// `ablation.csv` plus a text table to `out_dir`.
pub fn run_ablation(base: &RunConfig, variants: &[Variant]) -> Result<(Vec<AblationRow>, String)> {
    if variants.is_empty() {
        return Err(Error::UnknownVariant {
            name: String::new(),
            valid: Variant::ALL.map(Variant::name).join(", "),
        });
    }
    let mut rows = Vec::new();
    for &v in variants {
        let mut cfg = base.clone();
        cfg.model = v.apply(&base.model);
        cfg.train.out_dir = base.train.out_dir.join(v.name());
        let mut trainer = Trainer::new(cfg)?;
        trainer.run()?;
        let report = evaluate(&trainer.net, &trainer.samples, None)?;
        rows.push(AblationRow {
            variant: v,
            params: count_parameters(&trainer.cfg.model)?,
            psnr: report.mean_psnr,
            ssim: report.mean_ssim,
        });
    }
    let mut table = format!("{:<8}{:>12}{:>12}{:>10}\n", "Model", "#Params(M)", "PSNR(dB)", "SSIM");
    let mut csv = format!("# config_hash: {}\nmodel,params,psnr,ssim\n", base.hash());
    for r in &rows {
        writeln!(table, "{:<8}{:>12.4}{:>12.2}{:>10.4}", r.variant.name(), r.params as f64 / 1e6, r.psnr, r.ssim).unwrap();
        writeln!(csv, "{},{},{},{}", r.variant.name(), r.params, r.psnr, r.ssim).unwrap();
    }
    let dir = &base.train.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("ablation.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok((rows, table))
}

pub fn cmd_ablate(variants: &str, config: &Path) -> Result<(Vec<AblationRow>, String)> {
    let list = parse_variants(variants)?;
    run_ablation(&RunConfig::load(config)?, &list)
}

pub fn cmd_analyze(ckpt: &Path, image: &Path, reference: &Path, outdir: &Path) -> Result<AnalysisSummary> {
    let ck = Checkpoint::load(ckpt)?;
    let net = ck.restore_model()?;
    analyze(&net, &ck.config.hash(), &read_png(image)?, &read_png(reference)?, outdir)
}

/// Run a parsed command, printing its report to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let s = cmd_train(&config, resume.as_deref())?;
            println!(
                "trained {} epochs ({} iterations); best PSNR {:.2} dB; metrics {}; checkpoint {}",
                s.epochs_completed,
                s.iterations,
                s.best_psnr,
                s.metrics_path.display(),
                s.last_checkpoint.display()
            );
        }
        Command::Eval { ckpt, data, out, dump } => {
            let r = cmd_eval(&ckpt, &data, out.as_deref(), dump.as_deref())?;
            for (id, p, s) in &r.per_image {
                println!("{id}\t{p:.3}\t{s:.4}");
            }
            println!("mean\t{:.3}\t{:.4}", r.mean_psnr, r.mean_ssim);
        }
        Command::Infer { ckpt, input, out } => {
            cmd_infer(&ckpt, &input, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Ablate { variants, config } => {
            let (_, table) = cmd_ablate(&variants, &config)?;
            print!("{table}");
        }
        Command::Analyze {
            ckpt,
            image,
            reference,
            outdir,
        } => {
            let s = cmd_analyze(&ckpt, &image, &reference, &outdir)?;
            println!(
                "amplitude disparity {:.6}, phase disparity {:.6}; artifacts in {}",
                s.amplitude_energy,
                s.phase_energy,
                outdir.display()
            );
        }
    }
    Ok(())
}
