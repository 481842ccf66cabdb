//! Pipeline steps shared by the CLI and the experiment runs: teacher
//! pretraining, student training, calibration, quantized variants and the
//! paired comparison experiments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::{calibrate_model, CalibrationPlan, CalibrationSource, Objective};
use crate::data::DatasetSpec;
use crate::distill::{
    pretrain_teacher, ptq_quantize_model, qat_finetune, teacher_def, to_fp16, train_student, DistilledModel,
    LabeledImage, LossRecord, Scheme, TeacherConfig, TrainConfig, TrainOutcome,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ClassResult, EvalOptions, EvalReport, Evaluation};
use crate::model::Network;
use crate::tensor::Tensor;

/// Calibration data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibKind {
    Train,
    RandomNormal,
}

impl FromStr for CalibKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(CalibKind::Train),
            "random-normal" => Ok(CalibKind::RandomNormal),
            _ => Err(Error::InvalidArgument(format!("unknown calibration source {s:?}"))),
        }
    }
}

impl fmt::Display for CalibKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibKind::Train => "train",
            CalibKind::RandomNormal => "random-normal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub kind: CalibKind,
    pub objective: Objective,
    pub n_batches: usize,
    pub batch_size: usize,
    pub bits: u8,
    /// Moments of random-normal data, in standardized input units.
    pub normal_mean: f32,
    pub normal_std: f32,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            kind: CalibKind::Train,
            objective: Objective::Entropy,
            n_batches: 4,
            batch_size: 4,
            bits: 8,
            normal_mean: 0.0,
            normal_std: 1.0,
            seed: 0,
        }
    }
}

/// Representation of the student(s) in an evaluated variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp16,
    Int8,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(Precision::Fp32),
            "fp16" => Ok(Precision::Fp16),
            "int8" => Ok(Precision::Int8),
            _ => Err(Error::InvalidArgument(format!("unknown precision {s:?}"))),
        }
    }
}

/// Standardized training images of every class, each labelled with its
/// class index.
pub fn labeled_images(dataset: &DatasetSpec) -> Vec<LabeledImage> {
    (0..dataset.classes.len())
        .flat_map(|c| {
            dataset
                .train_tensors(c)
                .into_iter()
                .map(move |image| LabeledImage { image, class: c })
        })
        .collect()
}

/// Pretrains the teacher on every class of `dataset`.
pub fn build_teacher(dataset: &DatasetSpec, cfg: &TeacherConfig) -> Result<Network> {
    pretrain_teacher(teacher_def(1), &labeled_images(dataset), dataset.classes.len(), cfg)
}

/// Distills students on every training image of `dataset`. Classes are
/// mixed by the per-epoch shuffle.
pub fn train_model(teacher: &Network, scheme: Scheme, dataset: &DatasetSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let images = dataset.all_train_tensors();
    if images.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    train_student(teacher, scheme, &images, cfg, dataset.norm)
}

/// Calibration batches for `model` drawn from `images` or from a seeded
/// normal distribution of the model's input shape.
pub fn calibration_source(cfg: &CalibConfig, model: &DistilledModel, images: &[Tensor]) -> CalibrationSource {
    match cfg.kind {
        CalibKind::Train => CalibrationSource::Dataset {
            images: images.to_vec(),
            n_batches: cfg.n_batches,
            batch_size: cfg.batch_size,
        },
        CalibKind::RandomNormal => {
            let [c, h, w] = model.input_shape;
            CalibrationSource::RandomNormal {
                mean: cfg.normal_mean,
                std: cfg.normal_std,
                n_batches: cfg.n_batches,
                batch_shape: [cfg.batch_size, c, h, w],
                seed: cfg.seed,
            }
        }
    }
}

/// Calibrates the float students of `model`.
pub fn calibrate(model: &DistilledModel, cfg: &CalibConfig, train_images: &[Tensor]) -> Result<CalibrationPlan> {
    calibrate_model(model, &calibration_source(cfg, model, train_images), cfg.objective, cfg.bits)
}

/// Fine-tuning schedule derived from the training schedule: same optimizer
/// and batch size, a tenth of the learning rate.
pub fn qat_config(train: &TrainConfig, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: train.learning_rate * 0.1,
        ..train.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub scheme: Scheme,
    pub teacher: TeacherConfig,
    pub train: TrainConfig,
    pub calib: CalibConfig,
    pub qat_epochs: usize,
    pub timing_runs: usize,
    pub keep_maps: bool,
}

impl HarnessConfig {
    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            timing_runs: self.timing_runs,
            keep_maps: self.keep_maps,
            ..EvalOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// Per-class models against one unified model.
    OneVsMulti,
    /// Training-data against random-normal calibration.
    CalibSource,
    /// Entropy against L2 calibration.
    Objectives,
    /// Fine-tuned against post-training quantization.
    QatVsPtq,
    /// fp32, fp16 and int8 students.
    Precision,
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-vs-multi" => Ok(Experiment::OneVsMulti),
            "calib-source" => Ok(Experiment::CalibSource),
            "objectives" => Ok(Experiment::Objectives),
            "qat-vs-ptq" => Ok(Experiment::QatVsPtq),
            "precision" => Ok(Experiment::Precision),
            _ => Err(Error::InvalidArgument(format!(
                "unknown experiment {s:?} (one-vs-multi, calib-source, objectives, qat-vs-ptq, precision)"
            ))),
        }
    }
}

/// One class of a paired comparison between variants `a` and `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub class: String,
    pub a_pixel_auroc: Option<f64>,
    pub b_pixel_auroc: Option<f64>,
    pub a_image_auroc: Option<f64>,
    pub b_image_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub rows: Vec<PairedRow>,
}

impl Comparison {
    /// Pairs per-class results by class name.
    pub fn new(a: &str, a_classes: &[ClassResult], b: &str, b_classes: &[ClassResult]) -> Result<Self> {
        let rows = a_classes
            .iter()
            .map(|ca| {
                let cb = b_classes
                    .iter()
                    .find(|c| c.class == ca.class)
                    .ok_or_else(|| Error::InvalidArgument(format!("class {} missing from {b}", ca.class)))?;
                Ok(PairedRow {
                    class: ca.class.clone(),
                    a_pixel_auroc: ca.pixel_auroc,
                    b_pixel_auroc: cb.pixel_auroc,
                    a_image_auroc: ca.image_auroc,
                    b_image_auroc: cb.image_auroc,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            a: a.to_string(),
            b: b.to_string(),
            rows,
        })
    }

    pub fn of_reports(a: &EvalReport, b: &EvalReport) -> Result<Self> {
        Self::new(&key(a), &a.classes, &key(b), &b.classes)
    }

    /// CSV with one row per class.
    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        let header = [
            "class".to_string(),
            format!("{}_pixel_auroc", self.a),
            format!("{}_pixel_auroc", self.b),
            format!("{}_image_auroc", self.a),
            format!("{}_image_auroc", self.b),
        ];
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        out.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            out.write_record([
                r.class.clone(),
                cell(r.a_pixel_auroc),
                cell(r.b_pixel_auroc),
                cell(r.a_image_auroc),
                cell(r.b_image_auroc),
            ])
            .map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io("csv", e))
    }
}

fn key(r: &EvalReport) -> String {
    let mut parts = vec![r.variant.clone()];
    parts.extend(r.calibration.clone());
    parts.extend(r.objective.clone());
    if !r.label.is_empty() {
        parts.insert(0, r.label.clone());
    }
    parts.join("/")
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub evaluations: Vec<Evaluation>,
    pub comparisons: Vec<Comparison>,
    /// Training loss of every model trained by the run, by label.
    pub losses: Vec<(String, Vec<LossRecord>)>,
}

fn quantized(
    model: &DistilledModel,
    plan: &CalibrationPlan,
    qat: Option<(&[Tensor], &TrainConfig)>,
) -> Result<DistilledModel> {
    match qat {
        None => ptq_quantize_model(model, plan),
        Some((images, cfg)) => Ok(qat_finetune(model, plan, images, cfg)?.0),
    }
}

/// Runs `exp` end to end on `dataset`: pretrains the teacher, distills the
/// student(s), builds the variants and evaluates each on the test split.
pub fn run_experiment(exp: Experiment, dataset: &DatasetSpec, cfg: &HarnessConfig) -> Result<ExperimentOutput> {
    let teacher = build_teacher(dataset, &cfg.teacher)?;
    run_experiment_with_teacher(exp, dataset, cfg, &teacher)
}

/// [`run_experiment`] with an already trained teacher.
pub fn run_experiment_with_teacher(
    exp: Experiment,
    dataset: &DatasetSpec,
    cfg: &HarnessConfig,
    teacher: &Network,
) -> Result<ExperimentOutput> {
    let opts = cfg.eval_options();
    let mut evaluations = Vec::new();
    let mut comparisons = Vec::new();
    let mut losses = Vec::new();
    if exp == Experiment::OneVsMulti {
        let mut one_class = Vec::new();
        for c in 0..dataset.classes.len() {
            let sub = dataset.only_class(c);
            let label = format!("oneclass/{}", sub.classes[0].name);
            let out = train_model(teacher, cfg.scheme, &sub, &cfg.train)?;
            let e = evaluate(&out.model, &sub, &label, &opts)?;
            one_class.extend(e.report.classes.iter().cloned());
            losses.push((label, out.log));
            evaluations.push(e);
        }
        let out = train_model(teacher, cfg.scheme, dataset, &cfg.train)?;
        let multi = evaluate(&out.model, dataset, "multiclass", &opts)?;
        losses.push(("multiclass".into(), out.log));
        comparisons.push(Comparison::new("oneclass", &one_class, "multiclass", &multi.report.classes)?);
        evaluations.push(multi);
        return Ok(ExperimentOutput {
            evaluations,
            comparisons,
            losses,
        });
    }

    let out = train_model(teacher, cfg.scheme, dataset, &cfg.train)?;
    let model = out.model;
    losses.push(("multiclass".into(), out.log));
    let images = dataset.all_train_tensors();
    let label = "multiclass";
    let plan_for = |kind: CalibKind, objective: Objective| {
        calibrate(
            &model,
            &CalibConfig {
                kind,
                objective,
                ..cfg.calib
            },
            &images,
        )
    };
    let fp32 = || evaluate(&model, dataset, label, &opts);
    let qat_cfg = qat_config(&cfg.train, cfg.qat_epochs);
    match exp {
        Experiment::OneVsMulti => unreachable!("handled above"),
        Experiment::CalibSource | Experiment::Objectives => {
            let pairs = if exp == Experiment::CalibSource {
                [
                    (CalibKind::Train, cfg.calib.objective),
                    (CalibKind::RandomNormal, cfg.calib.objective),
                ]
            } else {
                [(cfg.calib.kind, Objective::Entropy), (cfg.calib.kind, Objective::L2)]
            };
            evaluations.push(fp32()?);
            for (kind, objective) in pairs {
                let plan = plan_for(kind, objective)?;
                let q = quantized(&model, &plan, None)?;
                evaluations.push(evaluate(&q, dataset, label, &opts)?);
            }
            let n = evaluations.len();
            comparisons.push(Comparison::of_reports(&evaluations[n - 2].report, &evaluations[n - 1].report)?);
        }
        Experiment::QatVsPtq => {
            evaluations.push(fp32()?);
            let plan = plan_for(cfg.calib.kind, cfg.calib.objective)?;
            let ptq = quantized(&model, &plan, None)?;
            evaluations.push(evaluate(&ptq, dataset, label, &opts)?);
            let (qat, log) = qat_finetune(&model, &plan, &images, &qat_cfg)?;
            losses.push(("qat".into(), log));
            evaluations.push(evaluate(&qat, dataset, label, &opts)?);
            comparisons.push(Comparison::of_reports(&evaluations[1].report, &evaluations[2].report)?);
        }
        Experiment::Precision => {
            evaluations.push(fp32()?);
            evaluations.push(evaluate(&to_fp16(&model)?, dataset, label, &opts)?);
            let plan = plan_for(cfg.calib.kind, cfg.calib.objective)?;
            let q = quantized(&model, &plan, None)?;
            evaluations.push(evaluate(&q, dataset, label, &opts)?);
            comparisons.push(Comparison::of_reports(&evaluations[0].report, &evaluations[2].report)?);
        }
    }
    Ok(ExperimentOutput {
        evaluations,
        comparisons,
        losses,
    })
}
