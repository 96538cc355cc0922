//! `cfil` — dataset generation, training, evaluation, and gradient
//! self-checks for the cross-pair feature interaction network.
//!
//! Every command is deterministic given its flags and seed. The seed
//! resolves as: `--seed` flag, then the `CFIL_SEED` environment variable,
//! then a `seed=` line in the `--config` file, then 42. Other settings
//! resolve flag > config file > built-in default. The effective
//! configuration is echoed line by line before the command runs.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/validation, 3 IO,
//! 4 incompatibility.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfil_core::data::{self, SyntheticFamilyModel};
use cfil_core::metrics;
use cfil_core::network::{BackboneConfig, ModelConfig, WidthScale};
use cfil_core::selfcheck;
use cfil_core::train::{evaluate, write_train_log, TrainConfig, Trainer};
use cfil_core::weighted::SignMode;
use cfil_core::CfilError;

const DEFAULT_SEED: u64 = 42;
const SEED_ENV: &str = "CFIL_SEED";

#[derive(Parser)]
#[command(name = "cfil", version, about = "Cross-pair feature interaction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic kinship-pair dataset (manifest + CFT1 images).
    GenData(GenDataArgs),
    /// Train on all folds except --fold; writes checkpoint and epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out fold; writes report.csv,
    /// roc.csv and roc.svg.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites and gate on a tolerance.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Random seed (falls back to CFIL_SEED, then the config file, then 42).
    #[arg(long)]
    seed: Option<u64>,
    /// Optional key=value config file supplying defaults for omitted flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of families (>= 5; at least 2 per fold to build negatives).
    #[arg(long)]
    families: Option<usize>,
    /// Kin strength rho in [0, 1].
    #[arg(long)]
    rho: Option<f64>,
    /// Pixel noise scale sigma.
    #[arg(long)]
    sigma: Option<f64>,
    /// Output directory for manifest.csv and images/.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (manifest.csv, or a directory containing one).
    #[arg(long)]
    data: PathBuf,
    /// Held-out fold in 1..=5 (training uses the other four).
    #[arg(long)]
    fold: Option<u8>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Width multiplier, e.g. "1" or "1/4".
    #[arg(long, value_name = "RATIO")]
    width_scale: Option<String>,
    /// Distance-kernel sign mode: as-algorithm | eq8-negated-first-term.
    #[arg(long)]
    sign_mode: Option<String>,
    /// Output directory for checkpoint.cfnt and train_log.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset manifest (manifest.csv, or a directory containing one).
    #[arg(long)]
    data: PathBuf,
    /// Fold to evaluate (the checkpoint's held-out fold).
    #[arg(long)]
    fold: Option<u8>,
    /// Checkpoint produced by `cfil train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for report.csv, roc.csv and roc.svg.
    #[arg(long)]
    out: PathBuf,
    /// Score the training folds instead of the held-out fold.
    #[arg(long)]
    on_train: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Width multiplier for the end-to-end network suite.
    #[arg(long, value_name = "RATIO")]
    width_scale: Option<String>,
    /// Random inputs per op in the per-op suite.
    #[arg(long)]
    trials: Option<usize>,
    /// Maximum allowed relative error.
    #[arg(long)]
    tolerance: Option<f64>,
    #[command(flatten)]
    common: CommonArgs,
}

/// Parsed key=value config file ('#' starts a comment line).
struct ConfigFile {
    entries: Vec<(String, String)>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self, CfilError> {
        let mut entries = Vec::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| CfilError::io(path, e))?;
            for (idx, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| CfilError::Parse {
                    line: idx + 1,
                    message: format!("expected key=value, got '{line}'"),
                })?;
                entries.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        Ok(ConfigFile { entries })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CfilError> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                CfilError::Config(format!("config file key '{key}' has bad value '{raw}'"))
            }),
        }
    }
}

/// flag > config file > default.
fn resolve<T: std::str::FromStr + Clone>(
    flag: Option<T>,
    file: &ConfigFile,
    key: &str,
    default: T,
) -> Result<T, CfilError> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(file.parsed::<T>(key)?.unwrap_or(default))
}

/// Seed precedence: flag > CFIL_SEED > config file > default.
fn resolve_seed(flag: Option<u64>, file: &ConfigFile) -> Result<u64, CfilError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(raw) = std::env::var(SEED_ENV) {
        return raw
            .parse()
            .map_err(|_| CfilError::Config(format!("{SEED_ENV}='{raw}' is not an integer")));
    }
    Ok(file.parsed::<u64>("seed")?.unwrap_or(DEFAULT_SEED))
}

fn echo_config(command: &str, fields: &[(&str, String)]) {
    for (k, v) in fields {
        println!("config: {command}.{k}={v}");
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.csv")
    } else {
        data.to_path_buf()
    }
}

fn exit_code_for(err: &CfilError) -> u8 {
    match err {
        CfilError::Io { .. } | CfilError::Parse { .. } | CfilError::Malformed(_) => 3,
        CfilError::Incompatible(_) => 4,
        CfilError::Config(_)
        | CfilError::Input(_)
        | CfilError::Contract(_)
        | CfilError::Dimension { .. }
        | CfilError::Capacity(_) => 2,
        CfilError::Numeric(_) | CfilError::Aggregation(_) => 1,
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<u8, CfilError> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let seed = resolve_seed(args.common.seed, &file)?;
    let families = resolve(args.families, &file, "families", 50)?;
    let rho = resolve(args.rho, &file, "rho", 0.9)?;
    let sigma = resolve(args.sigma, &file, "sigma", 0.05)?;
    let latent_dim = resolve(None, &file, "latent-dim", 8)?;
    echo_config(
        "gen-data",
        &[
            ("families", families.to_string()),
            ("rho", rho.to_string()),
            ("sigma", sigma.to_string()),
            ("latent-dim", latent_dim.to_string()),
            ("out", args.out.display().to_string()),
            ("seed", seed.to_string()),
        ],
    );
    let model = SyntheticFamilyModel {
        family_count: families,
        latent_dim,
        kin_strength: rho,
        noise_sigma: sigma,
    };
    let dataset = data::generate_dataset(&model, seed)?;
    let manifest = args.out.join("manifest.csv");
    data::save_manifest(&dataset, &manifest)?;
    let positives = dataset.pairs.iter().filter(|p| p.label.is_positive()).count();
    println!(
        "wrote {} ({} positive + {} negative pairs)",
        manifest.display(),
        positives,
        dataset.pairs.len() - positives
    );
    Ok(0)
}

fn cmd_train(args: TrainArgs) -> Result<u8, CfilError> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let seed = resolve_seed(args.common.seed, &file)?;
    let fold = resolve(args.fold, &file, "fold", 1)?;
    let epochs = resolve(args.epochs, &file, "epochs", 20)?;
    let batch = resolve(args.batch, &file, "batch", 64)?;
    let width_scale_raw = resolve(args.width_scale, &file, "width-scale", "1".to_string())?;
    let sign_mode_raw = resolve(args.sign_mode, &file, "sign-mode", "as-algorithm".to_string())?;
    let width_scale = WidthScale::parse(&width_scale_raw)?;
    let sign_mode = SignMode::parse(&sign_mode_raw)?;
    echo_config(
        "train",
        &[
            ("data", args.data.display().to_string()),
            ("fold", fold.to_string()),
            ("epochs", epochs.to_string()),
            ("batch", batch.to_string()),
            ("width-scale", width_scale.to_string()),
            ("sign-mode", sign_mode.to_string()),
            ("out", args.out.display().to_string()),
            ("seed", seed.to_string()),
        ],
    );

    let dataset = data::load_manifest(manifest_path(&args.data))?;
    let model = ModelConfig {
        width_scale,
        sign_mode,
        backbone: BackboneConfig::default(),
        input_side: 64,
        seed,
    };
    let mut config = TrainConfig::new(model);
    config.batch_size = batch;
    config.epochs = epochs;

    let mut trainer = Trainer::new(config)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CfilError::io(&args.out, e))?;
    trainer.run_epochs(&dataset, fold, epochs)?;
    for row in &trainer.log {
        println!(
            "epoch {} lr {} mean_loss {} train_acc {}",
            row.epoch, row.lr, row.mean_loss, row.train_acc
        );
    }
    let ckpt = args.out.join("checkpoint.cfnt");
    trainer.save_checkpoint(&ckpt)?;
    write_train_log(&trainer.log, args.out.join("train_log.csv"))?;
    println!("wrote {}", ckpt.display());
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<u8, CfilError> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let seed = resolve_seed(args.common.seed, &file)?;
    let fold = resolve(args.fold, &file, "fold", 1)?;
    echo_config(
        "eval",
        &[
            ("data", args.data.display().to_string()),
            ("fold", fold.to_string()),
            ("checkpoint", args.checkpoint.display().to_string()),
            ("out", args.out.display().to_string()),
            ("on-train", args.on_train.to_string()),
            ("seed", seed.to_string()),
        ],
    );
    let dataset = data::load_manifest(manifest_path(&args.data))?;
    let trainer = Trainer::load_checkpoint(&args.checkpoint)?;
    let report = evaluate(&trainer.model, &dataset, fold, args.on_train, 0)?;
    metrics::export(&report, &args.out)?;
    println!(
        "fold {} mva {} wa {} auc {}",
        report.fold,
        report
            .mva()
            .map(|v| v.to_string())
            .unwrap_or_else(|| "undefined".into()),
        report
            .wa()
            .map(|v| v.to_string())
            .unwrap_or_else(|| "undefined".into()),
        report.auc
    );
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<u8, CfilError> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let seed = resolve_seed(args.common.seed, &file)?;
    let trials = resolve(args.trials, &file, "trials", 100)?;
    let tolerance = resolve(args.tolerance, &file, "tolerance", 1e-4)?;
    let width_scale_raw = resolve(args.width_scale, &file, "width-scale", "1/8".to_string())?;
    let width_scale = WidthScale::parse(&width_scale_raw)?;
    echo_config(
        "gradcheck",
        &[
            ("width-scale", width_scale.to_string()),
            ("trials", trials.to_string()),
            ("tolerance", tolerance.to_string()),
            ("seed", seed.to_string()),
        ],
    );
    let reports = selfcheck::run_all(width_scale, trials, seed)?;
    let mut ok = true;
    let mut worst: Option<&selfcheck::SuiteReport> = None;
    for rep in &reports {
        let pass = rep.max_rel_err < tolerance;
        ok &= pass;
        println!(
            "gradcheck {}: max rel err {:.3e} over {} checks ({}) {}",
            rep.name,
            rep.max_rel_err,
            rep.checks,
            rep.worst_case,
            if pass { "ok" } else { "FAIL" }
        );
        if worst.map(|w| rep.max_rel_err > w.max_rel_err).unwrap_or(true) {
            worst = Some(rep);
        }
    }
    if ok {
        Ok(0)
    } else {
        let w = worst.expect("at least one suite");
        println!(
            "gradcheck failed: worst op '{}' in suite '{}' at {:.3e} (tolerance {:e})",
            w.worst_case, w.name, w.max_rel_err, tolerance
        );
        Ok(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
