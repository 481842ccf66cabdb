//! Variant evaluation: per-class pixel and image AUROC, latency and
//! serialized model size.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{image_tensor, DatasetSpec, TestImage};
use crate::distill::{image_score, AnomalyMap, Combine, DistilledModel};
use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::model_file;

/// Warm-up runs before timing.
pub const WARMUP_RUNS: usize = 3;
/// Timing repeats; the reported latency is the median of their means.
pub const TIMING_REPEATS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: String,
    /// `None` when the class has no anomalous (or no normal) pixel.
    pub pixel_auroc: Option<f64>,
    /// `None` when the class lacks anomalous or normal test images.
    pub image_auroc: Option<f64>,
    pub n_test: usize,
}

/// Serialized byte counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSize {
    pub total_bytes: u64,
    pub teacher_bytes: u64,
    pub student_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Free-form experiment label, e.g. `multiclass` or `oneclass/class02`.
    pub label: String,
    pub scheme: String,
    /// `fp32`, `fp16`, `ptq-int8` or `qat-int8`.
    pub variant: String,
    /// `train` or `random-normal` for quantized variants.
    pub calibration: Option<String>,
    /// `entropy`, `l2` or `minmax` for quantized variants.
    pub objective: Option<String>,
    pub combine: Combine,
    pub classes: Vec<ClassResult>,
    /// Mean over classes with a defined pixel AUROC.
    pub mean_pixel_auroc: Option<f64>,
    /// Mean over classes with a defined image AUROC.
    pub mean_image_auroc: Option<f64>,
    /// Milliseconds per image; zero when timing was skipped.
    pub avg_inference_ms: f64,
    pub size: ModelSize,
}

impl EvalReport {
    /// Copy with the wall-clock field cleared, for reproducibility checks.
    pub fn without_timing(&self) -> EvalReport {
        EvalReport {
            avg_inference_ms: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Timed runs per repeat; zero skips timing.
    pub timing_runs: usize,
    pub combine: Combine,
    /// Keep every test image's anomaly map in the result.
    pub keep_maps: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            timing_runs: 10,
            combine: Combine::Sum,
            keep_maps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub class: String,
    /// `<defect>/<name>` of the test image.
    pub image: String,
    pub map: AnomalyMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub heatmaps: Vec<Heatmap>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::AurocUndefined) => Ok(None),
        Err(e) => Err(e),
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("DQ_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Scores every test image with `score` and pools the results per class.
/// Test images are visited in `(defect, name)` order, so results do not
/// depend on scheduling.
pub fn class_results<F>(dataset: &DatasetSpec, score: F) -> Result<(Vec<ClassResult>, Vec<Vec<AnomalyMap>>)>
where
    F: Fn(&TestImage) -> Result<AnomalyMap> + Sync,
{
    use rayon::prelude::*;
    let pool = thread_pool()?;
    let mut results = Vec::new();
    let mut all_maps = Vec::new();
    for class in &dataset.classes {
        let mut tests: Vec<&TestImage> = class.test.iter().collect();
        tests.sort_by(|a, b| (&a.defect, &a.name).cmp(&(&b.defect, &b.name)));
        let maps: Vec<AnomalyMap> = pool.install(|| tests.par_iter().map(|t| score(t)).collect::<Result<_>>())?;
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (t, m) in tests.iter().zip(&maps) {
            if m.scores.len() != t.mask.len() {
                return Err(Error::Shape(format!(
                    "{}/{}: map has {} pixels, mask {}",
                    class.name,
                    t.name,
                    m.scores.len(),
                    t.mask.len()
                )));
            }
            scores.extend_from_slice(m.scores.data());
            labels.extend_from_slice(&t.mask);
        }
        let pixel = defined(auroc(&scores, &labels))?;
        if pixel.is_none() {
            log::warn!("class {}: pixel AUROC undefined, excluded from the mean", class.name);
        }
        let img_scores: Vec<f32> = maps.iter().map(image_score).collect();
        let img_labels: Vec<u8> = tests.iter().map(|t| u8::from(t.is_anomalous())).collect();
        let image = defined(auroc(&img_scores, &img_labels))?;
        if image.is_none() {
            log::warn!("class {}: image AUROC undefined, excluded from the mean", class.name);
        }
        results.push(ClassResult {
            class: class.name.clone(),
            pixel_auroc: pixel,
            image_auroc: image,
            n_test: tests.len(),
        });
        all_maps.push(maps);
    }
    Ok((results, all_maps))
}

/// Serialized size with the teacher/student breakdown.
pub fn model_size(model: &DistilledModel) -> Result<ModelSize> {
    let bytes = model_file::serialize_model(model)?;
    model_file::model_size(&bytes)
}

fn time_inference(model: &DistilledModel, dataset: &DatasetSpec, runs: usize, combine: Combine) -> Result<f64> {
    if runs == 0 {
        return Ok(0.0);
    }
    let images: Vec<_> = dataset
        .classes
        .iter()
        .flat_map(|c| c.test.iter())
        .map(|t| image_tensor(&t.image, model.norm))
        .collect();
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut k = 0;
    let mut next = || {
        let img = &images[k % images.len()];
        k += 1;
        img
    };
    for _ in 0..WARMUP_RUNS {
        model.anomaly_map(next(), combine)?;
    }
    let mut means = Vec::with_capacity(TIMING_REPEATS);
    for _ in 0..TIMING_REPEATS {
        let start = Instant::now();
        for _ in 0..runs {
            std::hint::black_box(model.anomaly_map(next(), combine)?);
        }
        means.push(start.elapsed().as_secs_f64() * 1e3 / runs as f64);
    }
    means.sort_by(f64::total_cmp);
    Ok(means[means.len() / 2])
}

/// Evaluates `model` on every test image of `dataset`.
pub fn evaluate(model: &DistilledModel, dataset: &DatasetSpec, label: &str, opts: &EvalOptions) -> Result<Evaluation> {
    let (h, w) = dataset.image_size;
    if model.image_size() != (h, w) || model.input_shape[0] != 1 {
        return Err(Error::Shape(format!(
            "model expects {:?}, dataset images are 1x{h}x{w}",
            model.input_shape
        )));
    }
    let (classes, maps) = class_results(dataset, |t| model.anomaly_map(&image_tensor(&t.image, model.norm), opts.combine))?;
    let plan = model.quant_state.plan();
    let report = EvalReport {
        label: label.to_string(),
        scheme: model.scheme.name().to_string(),
        variant: model.quant_state.tag().to_string(),
        calibration: plan.map(|p| p.source.clone()),
        objective: plan.and_then(|p| p.objective()).map(|o| o.as_str().to_string()),
        combine: opts.combine,
        mean_pixel_auroc: mean(classes.iter().map(|c| c.pixel_auroc)),
        mean_image_auroc: mean(classes.iter().map(|c| c.image_auroc)),
        classes,
        avg_inference_ms: time_inference(model, dataset, opts.timing_runs, opts.combine)?,
        size: model_size(model)?,
    };
    let heatmaps = if opts.keep_maps {
        let mut v = Vec::new();
        for (class, class_maps) in dataset.classes.iter().zip(maps) {
            let mut tests: Vec<&TestImage> = class.test.iter().collect();
            tests.sort_by(|a, b| (&a.defect, &a.name).cmp(&(&b.defect, &b.name)));
            for (t, map) in tests.into_iter().zip(class_maps) {
                v.push(Heatmap {
                    class: class.name.clone(),
                    image: format!("{}/{}", t.defect, t.name),
                    map,
                });
            }
        }
        v
    } else {
        Vec::new()
    };
    Ok(Evaluation { report, heatmaps })
}

/// Evaluates with sum combination and `n_timing_runs` timed runs.
pub fn evaluate_variant(model: &DistilledModel, dataset: &DatasetSpec, n_timing_runs: usize) -> Result<EvalReport> {
    let opts = EvalOptions {
        timing_runs: n_timing_runs,
        ..EvalOptions::default()
    };
    Ok(evaluate(model, dataset, "", &opts)?.report)
}
