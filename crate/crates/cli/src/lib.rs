//! The `dq` command line: dataset generation, training, calibration,
//! quantization, evaluation and experiment runs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dq_core::calib::{CalibrationPlan, Objective};
use dq_core::data::{generate_synthetic_dataset, load_dataset_dir, save_dataset_dir, DatasetSpec};
use dq_core::distill::{
    ptq_quantize_model, qat_finetune, to_fp16, write_loss_csv, Combine, DistilledModel, LossRecord, Normalization,
    Scheme, TeacherConfig, TrainConfig,
};
use dq_core::eval::{evaluate, EvalOptions, EvalReport, Evaluation};
use dq_core::harness::{
    build_teacher, calibrate, qat_config, run_experiment, train_model, CalibConfig, CalibKind, Experiment,
    HarnessConfig,
};
use dq_core::model_file::{deserialize_model, serialize_model};
use dq_core::report::emit_report;

/// Exit code for usage errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running a command.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "dq", version, about = "Distillation-based anomaly detection with INT-8 quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic texture dataset tree.
    GenData(GenData),
    /// Pretrain the teacher and distill the student(s).
    Train(Train),
    /// Calibrate a float model and write a calibration plan.
    Calibrate(Calibrate),
    /// Post-training quantization (int8 with a plan, or fp16).
    Quantize(Quantize),
    /// Quantization-aware fine-tuning from a calibration plan.
    Qat(Qat),
    /// Evaluate a model on a dataset's test split.
    Eval(Eval),
    /// Run a comparison experiment end to end.
    Bench(Bench),
    /// Merge evaluation reports into JSON and CSV summaries.
    Report(Report),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Stfpm,
    Rd,
    Us,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        let name = match s {
            SchemeArg::Stfpm => "stfpm",
            SchemeArg::Rd => "rd",
            SchemeArg::Us => "us",
        };
        Scheme::parse(name).expect("known scheme")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Oneclass,
    Multiclass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    Fp32,
    Fp16,
    Int8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CalibArg {
    Train,
    RandomNormal,
}

impl From<CalibArg> for CalibKind {
    fn from(c: CalibArg) -> Self {
        match c {
            CalibArg::Train => CalibKind::Train,
            CalibArg::RandomNormal => CalibKind::RandomNormal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ObjectiveArg {
    Entropy,
    L2,
    Minmax,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Entropy => Objective::Entropy,
            ObjectiveArg::L2 => Objective::L2,
            ObjectiveArg::Minmax => Objective::MinMax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CombineArg {
    Sum,
    Prod,
}

impl From<CombineArg> for Combine {
    fn from(c: CombineArg) -> Self {
        match c {
            CombineArg::Sum => Combine::Sum,
            CombineArg::Prod => Combine::Prod,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExperimentArg {
    OneVsMulti,
    CalibSource,
    Objectives,
    QatVsPtq,
    Precision,
}

impl From<ExperimentArg> for Experiment {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::OneVsMulti => Experiment::OneVsMulti,
            ExperimentArg::CalibSource => Experiment::CalibSource,
            ExperimentArg::Objectives => Experiment::Objectives,
            ExperimentArg::QatVsPtq => Experiment::QatVsPtq,
            ExperimentArg::Precision => Experiment::Precision,
        }
    }
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Training images per class; the test split gets as many normal and as many defective.
    #[arg(long, default_value_t = 16)]
    imgs_per_class: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SchemeArg::Stfpm)]
    scheme: SchemeArg,
    #[arg(long, value_enum, default_value_t = Mode::Multiclass)]
    mode: Mode,
    /// Class to train on in one-class mode.
    #[arg(long)]
    class: Option<String>,
    /// Student epochs; defaults to the scheme's recipe.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    teacher_epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CalibArgs {
    #[arg(long = "calib", value_enum, default_value_t = CalibArg::Train)]
    kind: CalibArg,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Entropy)]
    objective: ObjectiveArg,
    #[arg(long, default_value_t = 4)]
    calib_batches: usize,
    #[arg(long, default_value_t = 8)]
    bits: u8,
}

impl CalibArgs {
    fn config(&self, seed: u64) -> CalibConfig {
        CalibConfig {
            kind: self.kind.into(),
            objective: self.objective.into(),
            n_batches: self.calib_batches,
            bits: self.bits,
            seed,
            ..CalibConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct Calibrate {
    #[arg(long)]
    model: PathBuf,
    /// Training images; required for `--calib train`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    calib: CalibArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Quantize {
    #[arg(long)]
    model: PathBuf,
    /// Calibration plan JSON written by `dq calibrate`.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Int8)]
    precision: PrecisionArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Qat {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = CombineArg::Sum)]
    combine: CombineArg,
    /// Runs per timing repeat; 0 skips timing.
    #[arg(long, default_value_t = 10)]
    timing_runs: usize,
    /// Report label; defaults to the model file stem.
    #[arg(long)]
    label: Option<String>,
    /// Directory for per-image heatmaps and the CSV summary.
    #[arg(long)]
    heatmaps: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Bench {
    /// Dataset tree; a synthetic dataset is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    experiment: ExperimentArg,
    #[arg(long, value_enum, default_value_t = SchemeArg::Stfpm)]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    imgs_per_class: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    teacher_epochs: Option<usize>,
    #[arg(long, default_value_t = 2)]
    qat_epochs: usize,
    #[command(flatten)]
    calib: CalibArgs,
    #[arg(long, default_value_t = 10)]
    timing_runs: usize,
    /// Also write per-image heatmaps.
    #[arg(long)]
    heatmaps: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Report {
    /// EvalReport JSON files (single reports or arrays).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// A command-line mistake detected after parsing; exits with [`EXIT_USAGE`].
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Quantize(a) => quantize(a),
        Command::Qat(a) => qat(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Report(a) => report(a),
    }
}

fn load_data(path: &Path) -> Result<DatasetSpec> {
    load_dataset_dir(path, Normalization::default()).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<DistilledModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    deserialize_model(&bytes).with_context(|| format!("loading model {}", path.display()))
}

fn load_plan(path: &Path) -> Result<CalibrationPlan> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    CalibrationPlan::from_json(&text).with_context(|| format!("parsing plan {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn save_model(model: &DistilledModel, path: &Path) -> Result<()> {
    let bytes = serialize_model(model)?;
    write_file(path, &bytes)?;
    info!("wrote {} ({} bytes)", path.display(), bytes.len());
    Ok(())
}

fn save_losses(log: &[LossRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_loss_csv(log, &mut buf)?;
    write_file(path, &buf)
}

/// `m.dqkd` -> `m.loss.csv`.
fn loss_path(model_out: &Path) -> PathBuf {
    model_out.with_extension("loss.csv")
}

fn train_config(scheme: Scheme, image_size: usize, seed: u64, epochs: Option<usize>) -> TrainConfig {
    let mut cfg = match scheme {
        Scheme::Stfpm => TrainConfig::stfpm(image_size, seed),
        Scheme::Rd => TrainConfig::rd(image_size, seed),
        Scheme::Us { .. } => TrainConfig::us(image_size, seed),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg
}

fn teacher_config(seed: u64, epochs: Option<usize>) -> TeacherConfig {
    let mut cfg = TeacherConfig {
        seed,
        ..TeacherConfig::default()
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg
}

fn gen_data(a: GenData) -> Result<()> {
    info!("gen-data: {a:?}");
    if a.classes == 0 {
        return Err(usage("--classes must be at least 1"));
    }
    if a.image_size < 16 {
        return Err(usage("--image-size must be at least 16"));
    }
    let d = generate_synthetic_dataset(a.classes, a.imgs_per_class, a.image_size, a.seed);
    save_dataset_dir(&d, &a.out)?;
    info!("wrote {} classes to {}", d.classes.len(), a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    info!("train: {a:?}");
    let data = load_data(&a.data)?;
    let scheme: Scheme = a.scheme.into();
    let subset = match (a.mode, &a.class) {
        (Mode::Multiclass, None) => data.clone(),
        (Mode::Multiclass, Some(_)) => return Err(usage("--class is only valid with --mode oneclass")),
        (Mode::Oneclass, None) => return Err(usage("--mode oneclass needs --class")),
        (Mode::Oneclass, Some(c)) => data.only_class(data.class_index(c)?),
    };
    let teacher_cfg = teacher_config(a.seed, a.teacher_epochs);
    let cfg = train_config(scheme, data.image_size.0, a.seed, a.epochs);
    info!("teacher config: {teacher_cfg:?}");
    info!("student config: {cfg:?}");
    let teacher = build_teacher(&data, &teacher_cfg)?;
    let out = train_model(&teacher, scheme, &subset, &cfg)?;
    save_model(&out.model, &a.out)?;
    save_losses(&out.log, &loss_path(&a.out))
}

fn calibrate_cmd(a: Calibrate) -> Result<()> {
    info!("calibrate: {a:?}");
    let model = load_model(&a.model)?;
    let cfg = a.calib.config(a.seed);
    info!("calibration config: {cfg:?}");
    let images = match (cfg.kind, &a.data) {
        (CalibKind::Train, None) => return Err(usage("--calib train needs --data")),
        (CalibKind::Train, Some(d)) => load_data(d)?.all_train_tensors(),
        (CalibKind::RandomNormal, _) => Vec::new(),
    };
    let plan = calibrate(&model, &cfg, &images)?;
    write_file(&a.out, plan.to_json()?.as_bytes())?;
    info!("wrote {} plan entries to {}", plan.entries.len(), a.out.display());
    Ok(())
}

fn quantize(a: Quantize) -> Result<()> {
    info!("quantize: {a:?}");
    match (a.precision, &a.plan) {
        (PrecisionArg::Int8, None) => {
            return Err(usage("quantize: int8 needs a calibration plan (--plan PLAN.json from `dq calibrate`)"))
        }
        (PrecisionArg::Fp32, _) => return Err(usage("quantize: fp32 is the unquantized model")),
        _ => {}
    }
    let model = load_model(&a.model)?;
    let q = match &a.plan {
        Some(p) if a.precision == PrecisionArg::Int8 => ptq_quantize_model(&model, &load_plan(p)?)?,
        _ => to_fp16(&model)?,
    };
    save_model(&q, &a.out)
}

fn qat(a: Qat) -> Result<()> {
    info!("qat: {a:?}");
    let model = load_model(&a.model)?;
    let plan = load_plan(&a.plan)?;
    let data = load_data(&a.data)?;
    let cfg = qat_config(&train_config(model.scheme, data.image_size.0, a.seed, None), a.epochs);
    info!("fine-tuning config: {cfg:?}");
    let (q, log) = qat_finetune(&model, &plan, &data.all_train_tensors(), &cfg)?;
    save_model(&q, &a.out)?;
    save_losses(&log, &loss_path(&a.out))
}

fn eval(a: Eval) -> Result<()> {
    info!("eval: {a:?}");
    let model = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let label = a
        .label
        .clone()
        .unwrap_or_else(|| a.model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let opts = EvalOptions {
        timing_runs: a.timing_runs,
        combine: a.combine.into(),
        keep_maps: a.heatmaps.is_some(),
    };
    let e = evaluate(&model, &data, &label, &opts)?;
    write_file(&a.out, serde_json::to_string_pretty(&e.report)?.as_bytes())?;
    info!(
        "{}: mean pixel AUROC {:?}, image AUROC {:?}",
        label, e.report.mean_pixel_auroc, e.report.mean_image_auroc
    );
    if let Some(dir) = &a.heatmaps {
        emit_report(std::slice::from_ref(&e), dir)?;
    }
    Ok(())
}

fn bench(a: Bench) -> Result<()> {
    info!("bench: {a:?}");
    let data = match &a.data {
        Some(d) => load_data(d)?,
        None => generate_synthetic_dataset(a.classes, a.imgs_per_class, a.image_size, a.seed),
    };
    let scheme: Scheme = a.scheme.into();
    let cfg = HarnessConfig {
        scheme,
        teacher: teacher_config(a.seed, a.teacher_epochs),
        train: train_config(scheme, data.image_size.0, a.seed, a.epochs),
        calib: a.calib.config(a.seed),
        qat_epochs: a.qat_epochs,
        timing_runs: a.timing_runs,
        keep_maps: a.heatmaps,
    };
    info!("harness config: {cfg:?}");
    let out = run_experiment(a.experiment.into(), &data, &cfg)?;
    emit_report(&out.evaluations, &a.out)?;
    for (i, c) in out.comparisons.iter().enumerate() {
        let mut buf = Vec::new();
        c.write_csv(&mut buf)?;
        write_file(&a.out.join(format!("comparison_{i}.csv")), &buf)?;
    }
    write_file(
        &a.out.join("comparisons.json"),
        serde_json::to_string_pretty(&out.comparisons)?.as_bytes(),
    )?;
    for (label, log) in &out.losses {
        save_losses(log, &a.out.join(format!("loss_{}.csv", label.replace('/', "-"))))?;
    }
    for e in &out.evaluations {
        let r = &e.report;
        info!(
            "{} {} {:?}/{:?}: pixel AUROC {:?}",
            r.label, r.variant, r.calibration, r.objective, r.mean_pixel_auroc
        );
    }
    Ok(())
}

fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let reports = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|r| vec![r])
    };
    reports.with_context(|| format!("{} is not an EvalReport", path.display()))
}

fn report(a: Report) -> Result<()> {
    info!("report: {a:?}");
    let mut evaluations = Vec::new();
    for p in &a.inputs {
        evaluations.extend(read_reports(p)?.into_iter().map(|report| Evaluation {
            report,
            heatmaps: Vec::new(),
        }));
    }
    let files = emit_report(&evaluations, &a.out)?;
    info!("wrote {} files to {}", files.len(), a.out.display());
    Ok(())
}
