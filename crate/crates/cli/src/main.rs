use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use foresight::aio_hmm::EmConfig;
use foresight::anticipation::{commitment, open_stream, predict_trajectory, AnticipationResult, Context, STICK_STEPS};
use foresight::dataio::{self, Checkpoint, CheckpointKind};
use foresight::metrics::{cross_validate, default_grid, evaluate, threshold_sweep, Report, Sessions};
use foresight::pipeline::{fit_hmm, fit_predictor, fit_rnn, HmmSettings, Method, RnnSettings, Settings};
use foresight::sample::{filter_to, EventSet, SequenceSample, Setting};
use foresight::synth::{generate, ScenarioConfig};
use foresight::training::{gradcheck_fixture, gradient_check, TrainConfig};

/// Relative input paths that do not exist are looked up here.
const DATA_DIR_VAR: &str = "FORESIGHT_DATA_DIR";

#[derive(Parser)]
#[command(name = "foresight", version, about = "Maneuver anticipation with sensory-fusion RNNs and AIO-HMMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic driving dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset at one threshold.
    Eval(EvalArgs),
    /// Run a checkpoint over step records and report commitments.
    Anticipate(AnticipateArgs),
    /// Score a checkpoint over a grid of thresholds.
    Sweep(SweepArgs),
    /// k-fold cross-validation for one or more methods.
    Xval(XvalArgs),
    /// Compare analytic and finite-difference gradients on a random model.
    Gradcheck(GradcheckArgs),
    /// Re-render a saved report.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Overrides the seed in --config.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON generator configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Enable the default per-modality nuisance levels.
    #[arg(long)]
    nuisance: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Hyperparameters shared by `train` and `xval`.
#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Time scale of the exponential loss weights.
    #[arg(long, default_value_t = 1.0)]
    loss_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    augment_factor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// HMM state counts to choose from by held-out likelihood.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 3, 4, 6])]
    states: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    em_iters: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_method, default_value = "frnn-el")]
    arch: Method,
    #[arg(long, value_parser = parse_setting, default_value = "all")]
    setting: Setting,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch loss (RNN) or loglik trace (HMM) as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Clone, Copy)]
struct ContextArgs {
    /// Predict from only the last N steps instead of the full prefix.
    #[arg(long)]
    window: Option<usize>,
}

impl ContextArgs {
    fn context(self) -> Context {
        self.window.map_or(Context::FullPrefix, Context::Window)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricsKind {
    Session,
    Macro,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Text,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pth: f64,
    #[arg(long, value_enum, default_value_t = MetricsKind::Both)]
    metrics: MetricsKind,
    #[command(flatten)]
    context: ContextArgs,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the confusion matrix as CSV.
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Args)]
struct AnticipateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pth: f64,
    /// Step records (one JSON object with "x" and "z" per line); stdin if absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Emit each step as soon as it is read.
    #[arg(long)]
    stream: bool,
    #[command(flatten)]
    context: ContextArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated thresholds; defaults to 0.20 to 0.95 in steps of 0.05.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[command(flatten)]
    context: ContextArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct XvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "frnn-el")]
    arch: Vec<Method>,
    /// Comma-separated settings, each evaluated for every method.
    #[arg(long, value_delimiter = ',', value_parser = parse_setting, default_value = "all")]
    setting: Vec<Setting>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[command(flatten)]
    context: ContextArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_method, default_value = "frnn-el")]
    arch: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 6)]
    hidden: usize,
    #[arg(long, default_value_t = 6)]
    len: usize,
    #[arg(long, default_value_t = 5)]
    events: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: foresight::Error| e.to_string())
}

fn parse_setting(s: &str) -> Result<Setting, String> {
    s.parse().map_err(|e: foresight::Error| e.to_string())
}

fn input_path(p: &Path) -> PathBuf {
    if p.is_relative() && !p.exists() {
        if let Some(dir) = std::env::var_os(DATA_DIR_VAR) {
            return Path::new(&dir).join(p);
        }
    }
    p.to_path_buf()
}

fn load_data(p: &Path) -> Result<Vec<SequenceSample>> {
    let path = input_path(p);
    let data = dataio::load_dataset(&path).with_context(|| format!("reading dataset {}", path.display()))?;
    info!("loaded {} sequences from {}", data.len(), path.display());
    Ok(data)
}

fn load_model(p: &Path) -> Result<Checkpoint> {
    let path = input_path(p);
    let ckpt = Checkpoint::load(&path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    info!("loaded {} checkpoint ({})", ckpt.kind().name(), ckpt.method());
    Ok(ckpt)
}

/// Drops samples whose label the checkpoint cannot predict.
fn restrict(data: Vec<SequenceSample>, ckpt: &Checkpoint) -> Vec<SequenceSample> {
    let kept = filter_to(&data, ckpt.predictor().events());
    if kept.len() < data.len() {
        info!("scoring {} of {} sequences inside the model's event set", kept.len(), data.len());
    }
    kept
}

fn log_config(what: &str, value: &impl serde::Serialize) -> Result<()> {
    info!("{what}: {}", serde_json::to_string(value)?);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_report(report: &Report, out: Option<&Path>) -> Result<()> {
    if let Some(path) = out {
        write_text(path, &serde_json::to_string_pretty(report)?)?;
        info!("wrote report to {}", path.display());
    }
    print!("{}", report.to_text());
    Ok(())
}

fn settings_for(m: &ModelArgs, method: Method, setting: Setting) -> Result<Settings> {
    Ok(if method.is_rnn() {
        let train = TrainConfig {
            learning_rate: m.lr,
            epochs: m.epochs,
            time_scale: m.loss_scale,
            augmentation_factor: m.augment_factor,
            seed: m.seed,
            ..TrainConfig::default()
        };
        train.validate()?;
        Settings::Rnn(RnnSettings::new(method, setting, m.hidden, train)?)
    } else {
        let em = EmConfig {
            max_iter: m.em_iters,
            seed: m.seed,
            ..EmConfig::default()
        };
        let mut s = HmmSettings::new(method, setting, em)?;
        if m.states.is_empty() {
            bail!("--states needs at least one value");
        }
        s.state_grid = m.states.clone();
        Settings::Hmm(s)
    })
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(input_path(p)).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing generator config {}", p.display()))?
        }
        None if a.nuisance => ScenarioConfig::with_nuisance(0),
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    log_config("generator config", &json!({ "n": a.n, "config": cfg }))?;
    let data = generate(&cfg, a.n)?;
    dataio::save_dataset(&data, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    info!("wrote {} sequences to {}", data.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let kind = CheckpointKind::for_method(a.arch);
    if a.out.exists() {
        let existing = dataio::peek_kind(&a.out)
            .with_context(|| format!("{} exists and is not a checkpoint; refusing to overwrite", a.out.display()))?;
        if existing != kind {
            bail!(
                "{} holds a {} checkpoint; refusing to overwrite it with a {} model",
                a.out.display(),
                existing.name(),
                kind.name()
            );
        }
    }
    let data = load_data(&a.data)?;
    let settings = settings_for(&a.model, a.arch, a.setting)?;
    log_config("train config", &settings)?;
    let (ckpt, trace) = match settings {
        Settings::Rnn(s) => {
            let (predictor, report) = fit_rnn(&data, &s)?;
            info!(
                "final epoch loss {:.6} after {:.1} s",
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                report.wall_time_secs
            );
            (Checkpoint::Rnn { settings: s, predictor }, report.loss_csv())
        }
        Settings::Hmm(s) => {
            let (predictor, report, resolved) = fit_hmm(&data, &s)?;
            let trace = report.trace_csv(&predictor.hmms.events);
            (Checkpoint::Hmm { settings: resolved, predictor }, trace)
        }
    };
    ckpt.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    info!("wrote checkpoint to {}", a.out.display());
    if let Some(p) = &a.trace {
        write_text(p, &trace)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let data = restrict(load_data(&a.data)?, &ckpt);
    let context = a.context.context();
    log_config("eval config", &json!({ "p_th": a.pth, "context": context }))?;
    let sessions = Sessions::from_samples(ckpt.predictor(), &data, context)?;
    let mut report = evaluate(&sessions, a.pth)?;
    if let Some(p) = &a.confusion {
        write_text(p, &report.confusion.to_csv())?;
    }
    match a.metrics {
        MetricsKind::Both => {}
        MetricsKind::Session => {
            report.macro_precision = None;
            report.macro_recall = None;
        }
        MetricsKind::Macro => {
            report.precision = None;
            report.recall = None;
            report.f1 = None;
        }
    }
    write_report(&Report::Eval(report), a.out.as_deref())
}

fn anticipate(a: AnticipateArgs) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let predictor = ckpt.predictor();
    let events = predictor.events();
    let straight = events.straight();
    let context = a.context.context();
    log_config("anticipate config", &json!({ "p_th": a.pth, "context": context, "stream": a.stream }))?;
    if !(a.pth > 0.0 && a.pth <= 1.0) {
        bail!("--pth must lie in (0, 1], got {}", a.pth);
    }
    let reader: Box<dyn BufRead> = match &a.input {
        Some(p) => Box::new(io::BufReader::new(fs::File::open(input_path(p))?)),
        None => Box::new(io::stdin().lock()),
    };
    let out = io::stdout();
    let mut out = BufWriter::new(out.lock());
    let probs = |y: &[f64]| -> serde_json::Map<String, serde_json::Value> {
        events.events().iter().zip(y).map(|(m, p)| (m.name().to_string(), json!(p))).collect()
    };

    if a.stream {
        // Commitments stick for the five-second window, as during evaluation.
        let mut stream = open_stream(predictor, context)?;
        let mut hold_until = 0;
        let mut t = 0;
        for (line, text) in reader.lines().enumerate() {
            let text = text?;
            if text.trim().is_empty() {
                continue;
            }
            let (x, z) = dataio::parse_step(line + 1, &text)?;
            t += 1;
            let y = stream.push(&x, &z)?;
            let commit = if t > hold_until { commitment(&y, straight, a.pth) } else { None };
            if commit.is_some() {
                hold_until = t + STICK_STEPS;
            }
            let rec = json!({ "t": t, "probs": probs(&y), "commit": commit.map(|k| events.get(k).name()) });
            writeln!(out, "{rec}")?;
            out.flush()?;
        }
        return Ok(());
    }

    let steps = dataio::read_steps(reader)?;
    if steps.is_empty() {
        bail!("no step records on input");
    }
    let (xs, zs): (Vec<_>, Vec<_>) = steps.into_iter().unzip();
    let traj = predict_trajectory(predictor, &xs, &zs, context)?;
    let result = AnticipationResult::from_trajectory(traj, straight, a.pth)?;
    for (t, y) in result.trajectory.y.iter().enumerate() {
        let commit = (result.t_pred == Some(t + 1)).then(|| events.get(result.maneuver).name());
        writeln!(out, "{}", json!({ "t": t + 1, "probs": probs(y), "commit": commit }))?;
    }
    let summary = json!({
        "maneuver": events.get(result.maneuver).name(),
        "t_pred": result.t_pred,
        "steps_before": result.steps_before,
        "seconds_before": result.seconds_before(),
    });
    writeln!(out, "{summary}")?;
    out.flush()?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let data = restrict(load_data(&a.data)?, &ckpt);
    let grid = a.grid.unwrap_or_else(default_grid);
    let context = a.context.context();
    log_config("sweep config", &json!({ "grid": grid, "context": context }))?;
    let sessions = Sessions::from_samples(ckpt.predictor(), &data, context)?;
    let sweep = threshold_sweep(&sessions, &grid)?;
    info!("best threshold {:.2}", sweep.best().p_th);
    write_report(&Report::Sweep(sweep), a.out.as_deref())
}

fn xval(a: XvalArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let grid = a.grid.clone().unwrap_or_else(default_grid);
    let context = a.context.context();
    let mut reports = Vec::new();
    for &setting in &a.setting {
        for &method in &a.arch {
            let settings = settings_for(&a.model, method, setting)?;
            let label = format!("{}/{}", setting_name(setting), method);
            log_config(&format!("{label} config"), &json!({ "folds": a.folds, "grid": grid, "context": context, "settings": settings }))?;
            let subset = filter_to(&data, &EventSet::for_setting(setting));
            let report = cross_validate(&label, &subset, a.folds, a.model.seed, &grid, context, &mut |_, train| {
                fit_predictor(train, &settings)
            })?;
            reports.push(report);
        }
    }
    write_report(&Report::Xval { reports }, a.out.as_deref())
}

fn setting_name(s: Setting) -> &'static str {
    match s {
        Setting::Lane => "lane",
        Setting::Turn => "turn",
        Setting::All => "all",
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let (Some(arch), Some(loss_mode)) = (a.arch.arch(), a.arch.loss_mode()) else {
        bail!("gradcheck applies to RNN methods, not {}", a.arch);
    };
    log_config(
        "gradcheck config",
        &json!({ "arch": a.arch, "seed": a.seed, "tol": a.tol, "eps": a.eps, "hidden": a.hidden, "len": a.len, "events": a.events }),
    )?;
    let (model, ex) = gradcheck_fixture(arch, a.hidden, a.len, a.events, a.seed)?;
    let cfg = TrainConfig {
        loss_mode,
        ..TrainConfig::default()
    };
    let report = gradient_check(&model, &ex, &cfg, a.eps, a.tol)?;
    for b in &report.blocks {
        println!("{:<12} {:.3e}", b.name, b.max_rel_err);
    }
    println!("max relative error {:.3e} (tolerance {:.1e})", report.max_rel_err, report.tolerance);
    if !report.passed {
        bail!("gradient check failed: {:.3e} > {:.1e}", report.max_rel_err, report.tolerance);
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let path = input_path(&a.input);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: Report = serde_json::from_str(&text).with_context(|| format!("parsing report {}", path.display()))?;
    let rendered = match a.format {
        Format::Csv => report.to_csv(),
        Format::Text => report.to_text(),
    };
    match &a.out {
        Some(p) => write_text(p, &rendered),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Anticipate(a) => anticipate(a),
        Command::Sweep(a) => sweep(a),
        Command::Xval(a) => xval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report(a),
    }
}
