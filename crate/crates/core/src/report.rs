//! Report files: a JSON array of evaluation reports, a CSV pivot with one
//! row per variant and per-image anomaly heatmaps.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::Serialize;

use crate::data::write_pgm;
use crate::distill::AnomalyMap;
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Evaluation};

pub const JSON_FILE: &str = "reports.json";
pub const CSV_FILE: &str = "summary.csv";
pub const HEATMAP_DIR: &str = "heatmaps";

/// One CSV row. AUROC cells carry four decimals; undefined values are empty.
#[derive(Debug, Serialize)]
struct Row<'a> {
    label: &'a str,
    scheme: &'a str,
    variant: &'a str,
    calibration: &'a str,
    objective: &'a str,
    avg_inference_ms: String,
    mean_pixel_auroc: String,
    mean_image_auroc: String,
    teacher_bytes: u64,
    student_bytes: u64,
    total_bytes: u64,
}

/// CSV header, in column order.
pub const CSV_HEADER: [&str; 11] = [
    "label",
    "scheme",
    "variant",
    "calibration",
    "objective",
    "avg_inference_ms",
    "mean_pixel_auroc",
    "mean_image_auroc",
    "teacher_bytes",
    "student_bytes",
    "total_bytes",
];

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Writes the CSV pivot of `reports`.
pub fn write_csv(reports: &[EvalReport], w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in reports {
        out.serialize(Row {
            label: &r.label,
            scheme: &r.scheme,
            variant: &r.variant,
            calibration: r.calibration.as_deref().unwrap_or(""),
            objective: r.objective.as_deref().unwrap_or(""),
            avg_inference_ms: format!("{:.4}", r.avg_inference_ms),
            mean_pixel_auroc: cell(r.mean_pixel_auroc),
            mean_image_auroc: cell(r.mean_image_auroc),
            teacher_bytes: r.size.teacher_bytes,
            student_bytes: r.size.student_bytes,
            total_bytes: r.size.total_bytes,
        })
        .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    out.flush().map_err(|e| Error::io("csv", e))
}

/// 8-bit rendering of a map, min-max scaled; constant maps render black.
pub fn heatmap_image(map: &AnomalyMap) -> Result<GrayImage> {
    let (h, w) = map.scores.hw()?;
    let (lo, hi) = (map.scores.min(), map.scores.max());
    let px = map
        .scores
        .data()
        .iter()
        .map(|&v| {
            if hi > lo {
                (f64::from(v - lo) / f64::from(hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, px).expect("map dimensions"))
}

/// Directory name identifying a report's variant.
pub fn report_key(r: &EvalReport) -> String {
    [
        Some(r.label.as_str()),
        Some(r.scheme.as_str()),
        Some(r.variant.as_str()),
        r.calibration.as_deref(),
        r.objective.as_deref(),
    ]
    .into_iter()
    .flatten()
    .filter(|s| !s.is_empty())
    .collect::<Vec<_>>()
    .join("_")
    .replace(['/', '\\'], "-")
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `reports.json`, `summary.csv` and `heatmaps/<key>/<class>/<defect>/<name>.pgm`
/// under `out`. Returns the paths written.
pub fn emit_report(evaluations: &[Evaluation], out: &Path) -> Result<Vec<PathBuf>> {
    if evaluations.is_empty() {
        return Err(Error::InvalidArgument("no reports to emit".into()));
    }
    create_dir(out)?;
    let reports: Vec<EvalReport> = evaluations.iter().map(|e| e.report.clone()).collect();
    let json = out.join(JSON_FILE);
    fs::write(&json, serde_json::to_string_pretty(&reports)?).map_err(|e| Error::io(&json, e))?;
    let csv_path = out.join(CSV_FILE);
    let f = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(&reports, f)?;
    let mut written = vec![json, csv_path];
    for e in evaluations {
        let base = out.join(HEATMAP_DIR).join(report_key(&e.report));
        for h in &e.heatmaps {
            let p = base.join(&h.class).join(format!("{}.pgm", h.image));
            create_dir(p.parent().expect("has parent"))?;
            write_pgm(&p, &heatmap_image(&h.map)?)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::Combine;
    use crate::eval::{ClassResult, Heatmap, ModelSize};
    use crate::tensor::Tensor;

    fn report(p: Option<f64>) -> EvalReport {
        EvalReport {
            label: "multiclass".into(),
            scheme: "stfpm".into(),
            variant: "fp32".into(),
            calibration: None,
            objective: None,
            combine: Combine::Sum,
            classes: vec![ClassResult {
                class: "class00".into(),
                pixel_auroc: p,
                image_auroc: Some(0.75),
                n_test: 4,
            }],
            mean_pixel_auroc: p,
            mean_image_auroc: Some(0.75),
            avg_inference_ms: 1.25,
            size: ModelSize {
                total_bytes: 30,
                teacher_bytes: 10,
                student_bytes: 20,
            },
        }
    }

    #[test]
    fn single_report_gives_one_row() {
        let mut buf = Vec::new();
        write_csv(&[report(Some(0.912345678))], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert!(lines[1].contains(",0.9123,0.7500,10,20,30"), "{}", lines[1]);
    }

    #[test]
    fn csv_matches_json_to_four_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let evals: Vec<Evaluation> = [Some(0.83456), None, Some(0.5)]
            .into_iter()
            .map(|p| Evaluation {
                report: report(p),
                heatmaps: Vec::new(),
            })
            .collect();
        emit_report(&evals, dir.path()).unwrap();
        let json: Vec<EvalReport> =
            serde_json::from_str(&fs::read_to_string(dir.path().join(JSON_FILE)).unwrap()).unwrap();
        let mut rd = csv::Reader::from_path(dir.path().join(CSV_FILE)).unwrap();
        let col = CSV_HEADER.iter().position(|&c| c == "mean_pixel_auroc").unwrap();
        for (rec, r) in rd.records().zip(&json) {
            let rec = rec.unwrap();
            match r.mean_pixel_auroc {
                Some(v) => assert!((rec[col].parse::<f64>().unwrap() - v).abs() <= 5e-5),
                None => assert_eq!(&rec[col], ""),
            }
        }
    }

    #[test]
    fn zero_map_is_black_and_scaling_spans_range() {
        let zero = AnomalyMap::new(Tensor::zeros(&[4, 5])).unwrap();
        let img = heatmap_image(&zero).unwrap();
        assert_eq!(img.dimensions(), (5, 4));
        assert!(img.as_raw().iter().all(|&p| p == 0));
        let ramp = AnomalyMap::new(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(heatmap_image(&ramp).unwrap().as_raw(), &[0, 128, 255]);
    }

    #[test]
    fn heatmaps_are_written_as_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let e = Evaluation {
            report: report(Some(0.5)),
            heatmaps: vec![Heatmap {
                class: "class00".into(),
                image: "patch/003".into(),
                map: AnomalyMap::new(Tensor::zeros(&[4, 4])).unwrap(),
            }],
        };
        let files = emit_report(&[e], dir.path()).unwrap();
        let p = dir.path().join("heatmaps/multiclass_stfpm_fp32/class00/patch/003.pgm");
        assert!(files.contains(&p));
        assert!(fs::read(&p).unwrap().starts_with(b"P5"));
    }

    #[test]
    fn empty_and_unwritable_fail() {
        assert!(emit_report(&[], Path::new("/tmp")).is_err());
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let e = Evaluation {
            report: report(None),
            heatmaps: Vec::new(),
        };
        assert!(emit_report(&[e], &blocker.join("sub")).is_err());
    }
}
