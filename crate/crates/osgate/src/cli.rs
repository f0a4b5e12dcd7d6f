//! Command-line front end: each subcommand reads its inputs from files and
//! writes its outputs under `--out`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use osgate_core::calibration::TemperatureSearch;
use osgate_core::density::FitConfig;
use osgate_core::metrics::{ConfidenceSource, EvalSettings, EvaluationReport};
use osgate_core::scoring::ScoreKind;
use osgate_core::synthgen::{generate_split, SynthSpec};
use osgate_core::{Mode, QuantilePolicy, Split};

use crate::artifacts::{self, CalibrationFile, ModelsFile, CALIBRATION_FILE, MODELS_FILE};
use crate::container::{read_dataset, summarize, write_dataset};
use crate::error::{Error, Result};
use crate::json;
use crate::pipeline::{self, dataset_fingerprint, CalibrateOptions};
use crate::report;

pub const SPEC_FILE: &str = "spec.json";

#[derive(Debug, Parser)]
#[command(name = "osgate", version, about = "Open-set gating for object detector outputs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic open-set benchmark (four split containers).
    Synth(SynthArgs),
    /// Fit per-class density models on the training split.
    Fit(FitArgs),
    /// Learn temperatures and joint thresholds on the validation split.
    Calibrate(CalibrateArgs),
    /// Evaluate every (mode, score) pair on the test splits.
    Evaluate(EvaluateArgs),
    /// Fit, calibrate and evaluate in one go.
    Run(RunArgs),
    /// Print record counts and a checksum of a container.
    Inspect {
        path: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON file with a synthetic dataset spec; flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub val_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub ood: Option<usize>,
    #[arg(long)]
    pub background: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub corruption: Option<f64>,
    #[arg(long)]
    pub logit_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FitFlags {
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub k: u8,
    #[arg(long, default_value_t = 1e-6)]
    pub jitter: f64,
    #[arg(long, default_value_t = 200)]
    pub em_max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub em_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl FitFlags {
    fn config(&self) -> FitConfig {
        FitConfig {
            k: self.k as usize,
            jitter: self.jitter,
            em_max_iters: self.em_max_iters,
            em_tol: self.em_tol,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CalibrationFlags {
    #[arg(long, default_value_t = osgate_core::DEFAULT_PRUNE_THRESHOLD)]
    pub prune_threshold: f64,
    #[arg(long, default_value_t = 0.05)]
    pub soft_quantile: f64,
    #[arg(long, default_value_t = 0.95)]
    pub gmm_quantile: f64,
    /// Drop class priors from the GMM posterior.
    #[arg(long)]
    pub no_gmm_priors: bool,
}

impl CalibrationFlags {
    fn options(&self, match_floor: f64) -> CalibrateOptions {
        CalibrateOptions {
            policy: QuantilePolicy {
                soft_quantile: self.soft_quantile,
                gmm_quantile: self.gmm_quantile,
            },
            prune_threshold: self.prune_threshold,
            match_floor,
            gmm_priors: !self.no_gmm_priors,
            search: TemperatureSearch::default(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalFlags {
    /// Comma-separated modes: raw, pruned, temp, pruned-temp.
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<Mode>>,
    /// Comma-separated scores; defaults to the seven table scores.
    #[arg(long, value_delimiter = ',')]
    pub scores: Option<Vec<ScoreKind>>,
    /// Ranking confidence for mAP: softmax or detector.
    #[arg(long, default_value = "softmax", value_parser = parse_confidence)]
    pub confidence: ConfidenceSource,
}

fn parse_confidence(s: &str) -> std::result::Result<ConfidenceSource, String> {
    match s {
        "softmax" => Ok(ConfidenceSource::SoftmaxConf),
        "detector" => Ok(ConfidenceSource::DetectorScore),
        other => Err(format!("unknown confidence source '{other}' (softmax|detector)")),
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[command(flatten)]
    pub fit: FitFlags,
    #[arg(long, default_value_t = osgate_core::assignment::DEFAULT_MATCH_FLOOR)]
    pub match_floor: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub val: PathBuf,
    /// models.json written by `fit`.
    #[arg(long)]
    pub models: PathBuf,
    /// Training container, only used to warn when validation repeats it.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[command(flatten)]
    pub calibration: CalibrationFlags,
    #[arg(long, default_value_t = osgate_core::assignment::DEFAULT_MATCH_FLOOR)]
    pub match_floor: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub closed_test: PathBuf,
    #[arg(long)]
    pub open_test: PathBuf,
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub calibration: PathBuf,
    #[command(flatten)]
    pub eval: EvalFlags,
    /// Defaults to the floor recorded at calibration.
    #[arg(long)]
    pub match_floor: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub closed_test: PathBuf,
    #[arg(long)]
    pub open_test: PathBuf,
    #[command(flatten)]
    pub fit: FitFlags,
    #[command(flatten)]
    pub calibration: CalibrationFlags,
    #[command(flatten)]
    pub eval: EvalFlags,
    #[arg(long, default_value_t = osgate_core::assignment::DEFAULT_MATCH_FLOOR)]
    pub match_floor: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn check_floor(match_floor: f64) -> Result<()> {
    if match_floor > 0.0 && match_floor <= 1.0 {
        Ok(())
    } else {
        Err(Error::Usage(format!("--match-floor {match_floor} outside (0, 1]")))
    }
}

fn load(path: &Path) -> Result<osgate_core::Dataset> {
    let d = read_dataset(path)?;
    info!(
        "{}: {} split, {} detections, {} ground truth",
        path.display(),
        d.manifest.split,
        d.detections.len(),
        d.ground_truth.len()
    );
    Ok(d)
}

fn train_error(path: &Path, e: osgate_core::Error) -> Error {
    match e {
        e @ osgate_core::Error::Fit { .. } if e.to_string().contains("matched embeddings") => Error::Validation {
            path: path.to_owned(),
            source: e,
        },
        e => Error::Core(e),
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<Vec<PathBuf>> {
    let mut spec: SynthSpec = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(
            if let Some(v) = args.$flag {
                spec.$field = v;
            }
        )*};
    }
    set!(classes => num_id_classes, train_per_class => train_per_class, val_per_class => val_per_class,
        test_per_class => test_per_class, ood => ood_count, background => background_count, dim => embedding_dim,
        separation => separation, corruption => corruption, logit_scale => logit_scale, seed => seed);
    spec.validate().map_err(|e| Error::Usage(e.to_string()))?;

    // generate everything before the first write
    let datasets = Split::ALL
        .iter()
        .map(|&s| generate_split(&spec, s))
        .collect::<osgate_core::Result<Vec<_>>>()?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    json::write_canonical(&args.out.join(SPEC_FILE), &spec)?;
    let mut dirs = Vec::new();
    for d in &datasets {
        let dir = args.out.join(d.manifest.split.as_str());
        write_dataset(d, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn cmd_fit(args: &FitArgs) -> Result<ModelsFile> {
    check_floor(args.match_floor)?;
    let train = load(&args.train)?;
    let file = fit_stage(&train, &args.train, &args.fit, args.match_floor)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    artifacts::save_models(&file, &args.out.join(MODELS_FILE))?;
    Ok(file)
}

fn fit_stage(train: &osgate_core::Dataset, path: &Path, flags: &FitFlags, match_floor: f64) -> Result<ModelsFile> {
    let config = flags.config();
    config.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let models = pipeline::fit(train, &config, match_floor).map_err(|e| train_error(path, e))?;
    let file = ModelsFile::new(&models, config, match_floor, dataset_fingerprint(train));
    for s in &file.summary {
        println!(
            "class {}: {} samples, K {} -> {}, {} EM iterations, converged {}, collapse events {}",
            s.class_id,
            s.sample_count,
            s.requested_k,
            s.fitted_k,
            s.em_iterations,
            s.converged,
            s.collapse_events.len()
        );
    }
    Ok(file)
}

fn calibrate_stage(
    val: &osgate_core::Dataset,
    models_file: &ModelsFile,
    train_fingerprint: Option<&str>,
    flags: &CalibrationFlags,
    match_floor: f64,
) -> Result<CalibrationFile> {
    let models = models_file.models()?;
    let options = flags.options(match_floor);
    for q in [options.policy.soft_quantile, options.policy.gmm_quantile] {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Usage(format!("quantile {q} outside (0, 1)")));
        }
    }
    if !(0.0..=1.0).contains(&options.prune_threshold) {
        return Err(Error::Usage(format!("--prune-threshold {} outside [0, 1]", options.prune_threshold)));
    }
    let mut file = pipeline::calibrate(val, &models, &options)?;
    let val_fp = dataset_fingerprint(val);
    let train_fp = train_fingerprint.unwrap_or(&models_file.train_fingerprint);
    if val_fp == train_fp {
        warn!("validation split is identical to the training split; calibration reuses training data");
        file.leakage_warning = true;
    }
    file.models_fingerprint = models_fingerprint(models_file)?;
    println!("T_model = {:.6}: NLL {:.6} at T=1 -> {:.6}", file.t_model.temperature, file.t_model.nll_at_one, file.t_model.nll);
    println!("T_gmm   = {:.6}: NLL {:.6} at T=1 -> {:.6}", file.t_gmm.temperature, file.t_gmm.nll_at_one, file.t_gmm.nll);
    Ok(file)
}

fn models_fingerprint(file: &ModelsFile) -> Result<String> {
    use sha2::{Digest, Sha256};
    let text = json::to_canonical_string(file).map_err(|e| Error::Usage(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<CalibrationFile> {
    check_floor(args.match_floor)?;
    let (models_file, _) = artifacts::load_models(&args.models)?;
    let val = load(&args.val)?;
    let train_fp = match &args.train {
        Some(p) => Some(dataset_fingerprint(&load(p)?)),
        None => None,
    };
    let file = calibrate_stage(&val, &models_file, train_fp.as_deref(), &args.calibration, args.match_floor)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    artifacts::save_calibration(&file, &args.out.join(CALIBRATION_FILE))?;
    Ok(file)
}

fn evaluate_stage(
    closed: &osgate_core::Dataset,
    open: &osgate_core::Dataset,
    models_file: &ModelsFile,
    calibration: &CalibrationFile,
    flags: &EvalFlags,
    match_floor: f64,
) -> Result<Vec<EvaluationReport>> {
    check_floor(match_floor)?;
    if calibration.models_fingerprint != models_fingerprint(models_file)? {
        warn!("calibration was produced for a different models file");
    }
    let models = models_file.models()?;
    let modes = flags.modes.clone().unwrap_or_else(|| Mode::ALL.to_vec());
    let scores = flags.scores.clone().unwrap_or_else(|| ScoreKind::TABLE.to_vec());
    let settings = EvalSettings {
        match_floor,
        confidence: flags.confidence,
    };
    let reports = pipeline::evaluate(closed, open, &models, calibration, &modes, &scores, &settings)?;
    for r in &reports {
        for (metric, reason) in &r.absent {
            warn!("{} / {}: {metric} absent ({reason})", r.mode, r.score);
        }
    }
    print!("{}", report::to_csv(&reports)?);
    Ok(reports)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Vec<EvaluationReport>> {
    let (models_file, _) = artifacts::load_models(&args.models)?;
    let calibration = artifacts::load_calibration(&args.calibration)?;
    let closed = load(&args.closed_test)?;
    let open = load(&args.open_test)?;
    let floor = args.match_floor.unwrap_or(calibration.match_floor);
    let reports = evaluate_stage(&closed, &open, &models_file, &calibration, &args.eval, floor)?;
    report::write_reports(&reports, &args.out)?;
    Ok(reports)
}

pub fn cmd_run(args: &RunArgs) -> Result<Vec<EvaluationReport>> {
    check_floor(args.match_floor)?;
    let train = load(&args.train)?;
    let val = load(&args.val)?;
    let closed = load(&args.closed_test)?;
    let open = load(&args.open_test)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let models_file = fit_stage(&train, &args.train, &args.fit, args.match_floor)?;
    artifacts::save_models(&models_file, &args.out.join(MODELS_FILE))?;
    let calibration = calibrate_stage(&val, &models_file, None, &args.calibration, args.match_floor)?;
    artifacts::save_calibration(&calibration, &args.out.join(CALIBRATION_FILE))?;
    let reports = evaluate_stage(&closed, &open, &models_file, &calibration, &args.eval, args.match_floor)?;
    report::write_reports(&reports, &args.out)?;
    Ok(reports)
}

/// Applies `OSGATE_THREADS` to the global rayon pool.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("OSGATE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Usage(format!("OSGATE_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Error::Usage("OSGATE_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(e.to_string()))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => {
            for d in cmd_synth(&a)? {
                println!("{}", d.display());
            }
        }
        Command::Fit(a) => {
            cmd_fit(&a)?;
        }
        Command::Calibrate(a) => {
            cmd_calibrate(&a)?;
        }
        Command::Evaluate(a) => {
            cmd_evaluate(&a)?;
        }
        Command::Run(a) => {
            cmd_run(&a)?;
        }
        Command::Inspect { path } => {
            let s = summarize(&path)?;
            print!("{}", json::to_canonical_string(&s).map_err(|e| Error::Usage(e.to_string()))?);
        }
    }
    Ok(())
}
