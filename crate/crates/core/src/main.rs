use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use top_reid::checkpoint;
use top_reid::config::{DatasetConfig, Precision, RunConfig};
use top_reid::data::{load_dataset, synth_dataset, Dataset, SpectralTriple, Spectrum};
use top_reid::eval::{evaluate, export_embeddings, Distance};
use top_reid::model::{MissingFill, Model};
use top_reid::tensor::{grad_check, ParamStore, Scalar};
use top_reid::train;

#[derive(Parser)]
#[command(name = "top-reid", about = "Multi-spectral re-identification: train, evaluate, export")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint output path
        #[arg(short = 'o', long, default_value = "model.ckpt")]
        out: PathBuf,
        /// JSON-lines metrics log (one object per step)
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (mAP / CMC), optionally with missing spectra
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(short = 'k', long)]
        checkpoint: PathBuf,
        /// Missing spectra, comma-separated (R/RGB, N/NIR, T/TIR)
        #[arg(short = 'm', long)]
        missing: Option<String>,
        /// Substitute missing spectra by reconstruction or zeros
        #[arg(long, default_value = "reconstruct")]
        fill: String,
        /// Ranking distance
        #[arg(long, default_value = "cosine")]
        metric: String,
    },
    /// Export per-sample ranking features as CSV
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(short = 'k', long)]
        checkpoint: PathBuf,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
    /// Finite-difference gradient verification at 64-bit
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn load_run_dataset(cfg: &RunConfig) -> Result<Dataset, String> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            num_ids,
            cameras,
            samples_per_id_cam,
        } => Ok(synth_dataset(
            *num_ids,
            *cameras,
            *samples_per_id_cam,
            cfg.encoder.height,
            cfg.encoder.width,
            cfg.seed,
        )),
        DatasetConfig::Disk { root } => {
            load_dataset(std::path::Path::new(root)).map_err(|e| e.to_string())
        }
    }
}

fn parse_missing(arg: Option<&str>) -> Result<Vec<Spectrum>, String> {
    let Some(arg) = arg else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for part in arg.split(',') {
        let s = Spectrum::parse(part).ok_or_else(|| format!("unknown spectrum `{part}`"))?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

fn cmd_train<F: Scalar>(
    cfg: &RunConfig,
    out: &PathBuf,
    log: Option<&PathBuf>,
) -> Result<(), String> {
    let dataset = load_run_dataset(cfg)?;
    let mut store: ParamStore<F> = ParamStore::new();
    let model = Model::new(&mut store, cfg, dataset.num_classes());
    let mut log_file = match log {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| format!("{}: {e}", p.display()))?),
        None => None,
    };
    let reports = train::train(
        cfg,
        &dataset,
        &model,
        &mut store,
        log_file.as_mut().map(|f| f as &mut dyn std::io::Write),
        None,
    )
    .map_err(|e| e.to_string())?;
    checkpoint::save(out, &store, &cfg.to_toml(), reports.len() as u64)
        .map_err(|e| e.to_string())?;
    if let Some(last) = reports.last() {
        eprintln!(
            "trained {} steps, final total loss {:.4}; checkpoint: {}",
            reports.len(),
            last.total,
            out.display()
        );
    }
    Ok(())
}

fn load_model<F: Scalar>(
    cfg: &RunConfig,
    ckpt_path: &PathBuf,
    dataset: &Dataset,
) -> Result<(ParamStore<F>, Model), String> {
    let mut store: ParamStore<F> = ParamStore::new();
    let model = Model::new(&mut store, cfg, dataset.num_classes());
    let ckpt = checkpoint::load::<F>(ckpt_path).map_err(|e| e.to_string())?;
    checkpoint::install(&mut store, &ckpt).map_err(|e| e.to_string())?;
    Ok((store, model))
}

fn cmd_eval<F: Scalar>(
    cfg: &RunConfig,
    ckpt: &PathBuf,
    missing: Option<&str>,
    fill: &str,
    metric: &str,
) -> Result<(), String> {
    let dataset = load_run_dataset(cfg)?;
    let (store, model) = load_model::<F>(cfg, ckpt, &dataset)?;
    let missing = parse_missing(missing)?;
    let fill = match fill {
        "reconstruct" => MissingFill::Reconstruct,
        "zero" => MissingFill::Zero,
        other => return Err(format!("unknown fill mode `{other}`")),
    };
    let metric = match metric {
        "cosine" => Distance::Cosine,
        "euclidean" => Distance::Euclidean,
        other => return Err(format!("unknown metric `{other}`")),
    };
    let report = evaluate(&model, &store, &dataset, &missing, fill, metric)
        .map_err(|e| e.to_string())?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?
    );
    Ok(())
}

fn cmd_export<F: Scalar>(cfg: &RunConfig, ckpt: &PathBuf, out: &PathBuf) -> Result<(), String> {
    let dataset = load_run_dataset(cfg)?;
    let (store, model) = load_model::<F>(cfg, ckpt, &dataset)?;
    let mut file = std::fs::File::create(out).map_err(|e| format!("{}: {e}", out.display()))?;
    export_embeddings(&model, &store, &dataset, &mut file).map_err(|e| e.to_string())?;
    eprintln!("wrote {} rows to {}", dataset.triples.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<(), String> {
    const TOLERANCE: f64 = 1e-3;
    let dataset = load_run_dataset(cfg)?;
    let mut store: ParamStore<f64> = ParamStore::new();
    let model = Model::new(&mut store, cfg, dataset.num_classes());
    let batch_size = cfg.sampler.batch_size().min(dataset.triples.len());
    let batch: Vec<SpectralTriple> = top_reid::data::sample_batch(&dataset, &cfg.sampler, cfg.seed, 0)
        .map_err(|e| e.to_string())?
        .into_iter()
        .take(batch_size)
        .map(|i| dataset.triples[i].clone())
        .collect();
    let report = grad_check(
        &mut store,
        |tape, bind| {
            let refs: Vec<&SpectralTriple> = batch.iter().collect();
            let (total, _) = model
                .forward_batch_losses(tape, bind, &refs, &dataset, None)
                .expect("forward pass");
            total
        },
        1e-5,
        32,
        cfg.seed,
    );
    println!(
        "gradcheck: max relative error {:.3e} (worst parameter `{}`, {} coordinates)",
        report.max_rel_error, report.worst_param, report.coords_checked
    );
    if report.max_rel_error < TOLERANCE {
        Ok(())
    } else {
        Err(format!(
            "gradient check failed: {:.3e} >= {TOLERANCE:e}",
            report.max_rel_error
        ))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Export { common, .. }
        | Command::Gradcheck { common } => common,
    };
    let cfg = match RunConfig::from_file(&common.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let result = match &cli.command {
        Command::Train { out, log, .. } => match cfg.precision {
            Precision::F32 => cmd_train::<f32>(&cfg, out, log.as_ref()),
            Precision::F64 => cmd_train::<f64>(&cfg, out, log.as_ref()),
        },
        Command::Eval {
            checkpoint,
            missing,
            fill,
            metric,
            ..
        } => match cfg.precision {
            Precision::F32 => cmd_eval::<f32>(&cfg, checkpoint, missing.as_deref(), fill, metric),
            Precision::F64 => cmd_eval::<f64>(&cfg, checkpoint, missing.as_deref(), fill, metric),
        },
        Command::Export { checkpoint, out, .. } => match cfg.precision {
            Precision::F32 => cmd_export::<f32>(&cfg, checkpoint, out),
            Precision::F64 => cmd_export::<f64>(&cfg, checkpoint, out),
        },
        Command::Gradcheck { .. } => cmd_gradcheck(&cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
