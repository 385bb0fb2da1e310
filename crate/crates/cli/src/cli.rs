//! Command-line surface. `main` only parses and maps errors to exit codes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use depth_dissect_core::bins::{BinningKind, BinningScheme, DEFAULT_BINS};
use depth_dissect_core::dissect::{build_report, random_baseline, SelectivityReport};
use depth_dissect_core::eval::{
    ablation_curve, correct_responses, error_unit_attribution, fgsm_attack, AblationOrder,
    MetricsAccumulator,
};
use depth_dissect_core::net::{Activation, NetConfig, Network};
use depth_dissect_core::scene::{Sample, SceneConfig};
use depth_dissect_core::train::{assign_bins, effective_bins, fit_with, TrainConfig, TrainMode};

use crate::artifacts::*;
use crate::checkpoint::{self, CheckpointMeta};
use crate::dataset::{generate_dataset, load_dataset, manifest_path};
use crate::error::{write_json, Error, Result};
use crate::export;
use crate::parallel;
use crate::record::{output_dir, RunRecord};
use crate::report::render_report;

#[derive(Debug, Parser)]
#[command(
    name = "depth-dissect",
    version,
    about = "Depth selectivity of units in monocular depth networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic RGB-D dataset.
    GenData(GenData),
    /// Train a depth network.
    Train(Train),
    /// Per-unit depth selectivity of trained layers.
    Dissect(Dissect),
    /// Depth accuracy metrics.
    Eval(Eval),
    /// Accuracy as units are zeroed in order of selectivity.
    Ablate(Ablate),
    /// Replace a layer's responses by their per-depth averages.
    Correct(Correct),
    /// FGSM attack and attribution of the resulting errors to units.
    Attack(Attack),
    /// Monte Carlo estimate of the selectivity of random responses.
    BaselineMc(BaselineMc),
    /// HTML/SVG summary of a run directory.
    Report(Report),
}

#[derive(Debug, Args, serde::Serialize)]
pub struct Common {
    /// Output directory (default: $DEPTH_DISSECT_OUT/<command> or runs/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct Binning {
    /// Number of depth bins (default: the model's training scheme, else 64).
    #[arg(long)]
    pub bins: Option<usize>,
    /// Bin spacing: sid or uniform (default: the model's training scheme, else sid).
    #[arg(long)]
    pub binning: Option<BinningKind>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct GenData {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 1.0)]
    pub d_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pub d_max: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct Train {
    /// Training manifest (file or directory).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "assign")]
    pub mode: TrainMode,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value = "sid")]
    pub binning: BinningKind,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Layers that receive the selectivity term.
    #[arg(long, value_delimiter = ',', default_value = "mff,d")]
    pub layers: Vec<String>,
    /// Activation of the hidden layers: elu or relu.
    #[arg(long, default_value = "elu", value_parser = parse_activation)]
    pub activation: Activation,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct Dissect {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Layers to dissect (default: the model's interpretable layers).
    #[arg(long, value_delimiter = ',')]
    pub layer: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub binning: Binning,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct Eval {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct Ablate {
    #[arg(long)]
    pub model: PathBuf,
    /// Samples on which accuracy is measured.
    #[arg(long)]
    pub data: PathBuf,
    /// Samples used to rank units by selectivity (default: --data).
    #[arg(long)]
    pub rank_data: Option<PathBuf>,
    #[arg(long, default_value = "d")]
    pub layer: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub binning: Binning,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct Correct {
    #[arg(long)]
    pub model: PathBuf,
    /// Samples the average responses are collected from (normally the training split).
    #[arg(long)]
    pub train_data: PathBuf,
    /// Samples on which accuracy is measured.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "d")]
    pub layer: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub binning: Binning,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct Attack {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    #[arg(long, default_value = "d")]
    pub layer: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub binning: Binning,
    /// Predicted-depth bins with the most errors that are traced to units.
    #[arg(long, default_value_t = 3)]
    pub top_bins: usize,
    /// Attack at most this many samples.
    #[arg(long, default_value_t = 20)]
    pub limit: usize,
    /// Seed for the random control units.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct BaselineMc {
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    /// Responses are drawn from U[0, b).
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct Report {
    /// Directory whose artifacts are summarized (searched recursively).
    #[arg(long)]
    pub run: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    match s {
        "elu" => Ok(Activation::Elu),
        "relu" => Ok(Activation::Relu),
        _ => Err(format!("unknown activation {s:?} (expected elu or relu)")),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Dissect(_) => "dissect",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Correct(_) => "correct",
            Command::Attack(_) => "attack",
            Command::BaselineMc(_) => "baseline-mc",
            Command::Report(_) => "report",
        }
    }

    fn out(&self) -> Option<&Path> {
        let c = match self {
            Command::GenData(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Dissect(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Ablate(a) => &a.common,
            Command::Correct(a) => &a.common,
            Command::Attack(a) => &a.common,
            Command::BaselineMc(a) => &a.common,
            Command::Report(a) => &a.common,
        };
        c.out.as_deref()
    }

    fn snapshot(&self) -> serde_json::Value {
        let v = match self {
            Command::GenData(a) => serde_json::to_value(a),
            Command::Train(a) => serde_json::to_value(a),
            Command::Dissect(a) => serde_json::to_value(a),
            Command::Eval(a) => serde_json::to_value(a),
            Command::Ablate(a) => serde_json::to_value(a),
            Command::Correct(a) => serde_json::to_value(a),
            Command::Attack(a) => serde_json::to_value(a),
            Command::BaselineMc(a) => serde_json::to_value(a),
            Command::Report(a) => serde_json::to_value(a),
        };
        v.expect("plain option structs serialize")
    }
}

/// Run a parsed command, writing its outputs and `run.json`. Returns the output directory.
pub fn run(cli: Cli) -> Result<PathBuf> {
    let started = Instant::now();
    let out = output_dir(cli.command.out(), cli.command.name());
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut record = RunRecord::new(cli.command.name(), cli.command.snapshot());
    let outputs = match &cli.command {
        Command::GenData(a) => gen_data(a, &out)?,
        Command::Train(a) => train(a, &out, &mut record)?,
        Command::Dissect(a) => dissect(a, &out, &mut record)?,
        Command::Eval(a) => eval(a, &out, &mut record)?,
        Command::Ablate(a) => ablate(a, &out, &mut record)?,
        Command::Correct(a) => correct(a, &out, &mut record)?,
        Command::Attack(a) => attack(a, &out, &mut record)?,
        Command::BaselineMc(a) => baseline_mc(a, &out)?,
        Command::Report(a) => {
            record.input(&a.run)?;
            render_report(&a.run, &out)?
        }
    };
    record.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
    record.wall_time_s = started.elapsed().as_secs_f64();
    record.write(&out)?;
    Ok(out)
}

fn load_data(path: &Path, record: &mut RunRecord) -> Result<(String, Vec<Sample>)> {
    let manifest = manifest_path(path);
    record.input(&manifest)?;
    let (m, samples) = load_dataset(&manifest)?;
    Ok((m.split, samples))
}

fn load_model(path: &Path, record: &mut RunRecord) -> Result<(Network<f32>, CheckpointMeta)> {
    record.input(path)?;
    checkpoint::load(path)
}

/// Flags override the scheme stored with the model; the model's depth range always applies.
fn scheme_for(net: &Network<f32>, meta: &CheckpointMeta, flags: &Binning) -> Result<BinningScheme> {
    let stored = meta.scheme.as_ref();
    let bins = flags
        .bins
        .or(stored.map(|s| s.n_bins()))
        .unwrap_or(DEFAULT_BINS);
    let kind = flags
        .binning
        .or(stored.map(|s| s.kind))
        .unwrap_or(BinningKind::Sid);
    let c = net.config();
    Ok(BinningScheme::new(kind, c.d_min, c.d_max, bins)?)
}

/// The model's own assignment for `layer` when it was trained with this many bins.
fn assignments_for(
    meta: &CheckpointMeta,
    layer: &str,
    scheme: &BinningScheme,
) -> Option<Vec<usize>> {
    meta.assignments
        .get(layer)
        .filter(|row| row.effective_bins == scheme.n_bins())
        .map(|row| row.bins.clone())
}

fn gen_data(a: &GenData, out: &Path) -> Result<Vec<PathBuf>> {
    let config = SceneConfig {
        height: a.height,
        width: a.width,
        d_min: a.d_min,
        d_max: a.d_max,
        noise_sigma: a.noise,
        ..SceneConfig::default()
    };
    let m = generate_dataset(a.seed, a.n, &config, &a.split, out)?;
    eprintln!("wrote {} {} samples to {}", m.n, m.split, out.display());
    Ok(vec![out.join(crate::dataset::MANIFEST)])
}

fn train(a: &Train, out: &Path, record: &mut RunRecord) -> Result<Vec<PathBuf>> {
    let manifest = manifest_path(&a.data);
    record.input(&manifest)?;
    let (m, samples) = load_dataset(&manifest)?;
    let net_config = NetConfig {
        height: m.h,
        width: m.w,
        d_min: m.d_min,
        d_max: m.d_max,
        activation: a.activation,
        interpretable_layers: a.layers.clone(),
        ..NetConfig::default()
    };
    let config = TrainConfig {
        mode: a.mode,
        lambda: a.lambda,
        layers: a.layers.clone(),
        n_bins: a.bins,
        binning: a.binning,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
    };
    config.validate()?;
    let mut net = Network::build(net_config, a.seed)?;
    let outcome = fit_with(&mut net, &samples, &config, |log| {
        eprintln!(
            "epoch {:>3}  base {:.4}  lambda term {:+.4}  train DS {:.4}",
            log.epoch, log.base_loss, log.lambda_term, log.train_mean_ds
        );
    })?;
    let meta = CheckpointMeta {
        train: Some(config),
        init_seed: a.seed,
        scheme: Some(BinningScheme::new(a.binning, m.d_min, m.d_max, a.bins)?),
        assignments: outcome.assignments,
        log: outcome.log,
    };
    let ckpt = out.join(CHECKPOINT);
    checkpoint::save(&ckpt, &net, &meta)?;
    let log = out.join(TRAIN_LOG);
    export::training_log_csv(&log, &meta.log)?;
    Ok(vec![ckpt, log])
}

fn dissect(a: &Dissect, out: &Path, record: &mut RunRecord) -> Result<Vec<PathBuf>> {
    let (net, meta) = load_model(&a.model, record)?;
    let (split, samples) = load_data(&a.data, record)?;
    let scheme = scheme_for(&net, &meta, &a.binning)?;
    let layers = if a.layer.is_empty() {
        net.config().interpretable_layers.clone()
    } else {
        a.layer.clone()
    };
    let mut written = Vec::new();
    for layer in &layers {
        let table = parallel::dissect(&net, &samples, layer, &scheme, a.threads)?;
        let report = build_report(
            &table,
            assignments_for(&meta, layer, &scheme).as_deref(),
            &split,
        )?;
        println!(
            "{layer}: mean DS {:.4} over {} units ({split})",
            report.mean_ds,
            report.units.len()
        );
        let json = out.join(selectivity_name(layer));
        write_json(&json, &report)?;
        let csv = out.join(format!("selectivity_{layer}.csv"));
        export::selectivity_csv(&csv, &report)?;
        let resp = out.join(format!("responses_{layer}.csv"));
        export::responses_csv(&resp, &table)?;
        let svg = out.join(format!("profiles_{layer}.svg"));
        std::fs::write(&svg, export::profiles_svg(&report, 16)).map_err(|e| Error::io(&svg, e))?;
        written.extend([json, csv, resp, svg]);
    }
    Ok(written)
}

fn eval(a: &Eval, out: &Path, record: &mut RunRecord) -> Result<Vec<PathBuf>> {
    let (net, _) = load_model(&a.model, record)?;
    let (_, samples) = load_data(&a.data, record)?;
    let metrics = parallel::evaluate(&net, &samples, a.threads)?;
    println!(
        "delta1 {:.4}  delta2 {:.4}  delta3 {:.4}  rms {:.4}  rel {:.4}  log10 {:.4}",
        metrics.delta1, metrics.delta2, metrics.delta3, metrics.rms, metrics.rel, metrics.log10
    );
    let path = out.join(METRICS);
    write_json(
        &path,
        &EvalArtifact {
            model: a.model.display().to_string(),
            data: a.data.display().to_string(),
            metrics,
        },
    )?;
    Ok(vec![path])
}

fn rank(
    net: &Network<f32>,
    meta: &CheckpointMeta,
    samples: &[Sample],
    layer: &str,
    scheme: &BinningScheme,
    split: &str,
    threads: usize,
) -> Result<SelectivityReport> {
    let table = parallel::dissect(net, samples, layer, scheme, threads)?;
    Ok(build_report(
        &table,
        assignments_for(meta, layer, scheme).as_deref(),
        split,
    )?)
}

fn ablate(a: &Ablate, out: &Path, record: &mut RunRecord) -> Result<Vec<PathBuf>> {
    let (net, meta) = load_model(&a.model, record)?;
    let (split, samples) = load_data(&a.data, record)?;
    let scheme = scheme_for(&net, &meta, &a.binning)?;
    let report = match &a.rank_data {
        Some(p) => {
            let (rank_split, rank_samples) = load_data(p, record)?;
            rank(
                &net,
                &meta,
                &rank_samples,
                &a.layer,
                &scheme,
                &rank_split,
                a.threads,
            )?
        }
        None => rank(&net, &meta, &samples, &a.layer, &scheme, &split, a.threads)?,
    };
    let curves = vec![
        ablation_curve(&net, &samples, &a.layer, &report, AblationOrder::Descending)?,
        ablation_curve(&net, &samples, &a.layer, &report, AblationOrder::Ascending)?,
    ];
    let below = curves[0]
        .steps
        .iter()
        .zip(&curves[1].steps)
        .filter(|(d, s)| d.delta1 <= s.delta1)
        .count();
    println!(
        "{}: area descending {:.3}, ascending {:.3}; descending at or below ascending at {below}/{} steps",
        a.layer,
        curves[0].area(),
        curves[1].area(),
        curves[0].steps.len()
    );
    let json = out.join(ablation_name(&a.layer));
    write_json(&json, &curves)?;
    let csv = out.join(format!("ablation_{}.csv", a.layer));
    export::ablation_csv(&csv, &curves)?;
    let svg = out.join(format!("ablation_{}.svg", a.layer));
    std::fs::write(&svg, export::ablation_svg(&curves)).map_err(|e| Error::io(&svg, e))?;
    Ok(vec![json, csv, svg])
}

fn correct(a: &Correct, out: &Path, record: &mut RunRecord) -> Result<Vec<PathBuf>> {
    let (net, meta) = load_model(&a.model, record)?;
    let (_, train) = load_data(&a.train_data, record)?;
    let (_, samples) = load_data(&a.data, record)?;
    let scheme = scheme_for(&net, &meta, &a.binning)?;
    let table = parallel::dissect(&net, &train, &a.layer, &scheme, a.threads)?;
    let result = correct_responses(&net, &samples, &a.layer, &table, &scheme)?;
    println!(
        "{}: delta1 {:.4} -> {:.4}, rms {:.4} -> {:.4}",
        a.layer, result.before.delta1, result.after.delta1, result.before.rms, result.after.rms
    );
    let path = out.join(correction_name(&a.layer));
    write_json(
        &path,
        &CorrectionArtifact {
            layer: a.layer.clone(),
            model: a.model.display().to_string(),
            table_data: a.train_data.display().to_string(),
            data: a.data.display().to_string(),
            result,
        },
    )?;
    Ok(vec![path])
}

fn attack(a: &Attack, out: &Path, record: &mut RunRecord) -> Result<Vec<PathBuf>> {
    let (net, meta) = load_model(&a.model, record)?;
    let (_, samples) = load_data(&a.data, record)?;
    let base = scheme_for(&net, &meta, &a.binning)?;
    let units = net.units(&a.layer)?;
    // Attribution works in the layer's effective bin space.
    let scheme = BinningScheme::new(
        base.kind,
        base.d_min(),
        base.d_max(),
        effective_bins(units, base.n_bins()),
    )?;
    let assignments = assignments_for(&meta, &a.layer, &scheme)
        .unwrap_or_else(|| assign_bins(units, scheme.n_bins()));
    let (mut clean, mut adv) = (MetricsAccumulator::default(), MetricsAccumulator::default());
    let mut max_perturbation = 0.0f64;
    let mut reports = Vec::new();
    for (i, s) in samples.iter().take(a.limit).enumerate() {
        let x = fgsm_attack(&net, &s.image, &s.depth, &s.valid, a.epsilon)?;
        for (p, q) in x.data().iter().zip(s.image.data()) {
            max_perturbation = max_perturbation.max((p - q).abs() as f64);
        }
        let (pred, _) = net.forward(&s.image, &[])?;
        clean.add(&pred, &s.depth, &s.valid)?;
        let (pred_adv, _) = net.forward(&x, &[])?;
        adv.add(&pred_adv, &s.depth, &s.valid)?;
        reports.push(error_unit_attribution(
            &net,
            &x,
            &s.depth,
            &s.valid,
            &a.layer,
            &assignments,
            &scheme,
            a.top_bins,
            a.seed.wrapping_add(i as u64),
        )?);
    }
    if reports.is_empty() {
        return Err(Error::Invalid("no samples to attack".into()));
    }
    let (mean_iou, mean_control_iou) = AttackArtifact::summarize(&reports);
    let artifact = AttackArtifact {
        epsilon: a.epsilon,
        layer: a.layer.clone(),
        samples: reports.len(),
        clean: clean.finish()?,
        adversarial: adv.finish()?,
        max_perturbation,
        mean_iou,
        mean_control_iou,
        reports,
    };
    println!(
        "delta1 {:.4} -> {:.4} at epsilon {}; attribution IoU {} vs control {}",
        artifact.clean.delta1,
        artifact.adversarial.delta1,
        a.epsilon,
        mean_iou.map_or("n/a".into(), |v| format!("{v:.4}")),
        mean_control_iou.map_or("n/a".into(), |v| format!("{v:.4}")),
    );
    let path = out.join(ATTACK);
    write_json(&path, &artifact)?;
    Ok(vec![path])
}

fn baseline_mc(a: &BaselineMc, out: &Path) -> Result<Vec<PathBuf>> {
    let estimate = random_baseline(a.bins, a.trials, a.b, a.seed)?;
    println!("{estimate:.6}");
    let path = out.join(BASELINE);
    write_json(
        &path,
        &BaselineArtifact {
            bins: a.bins,
            trials: a.trials,
            b: a.b,
            seed: a.seed,
            estimate,
        },
    )?;
    Ok(vec![path])
}
