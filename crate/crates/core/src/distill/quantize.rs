//! Post-training quantization, half precision and quantization-aware
//! fine-tuning of the student(s). The teacher is never touched.

use super::config::TrainConfig;
use super::model::{DistilledModel, QuantState, StudentNet};
use super::train::{build_samples, optimize, LossRecord};
use crate::calib::plan::CalibrationPlan;
use crate::error::{Error, Result};
use crate::model::{ModelDef, Network};
use crate::qnet::{NetQuant, QuantizedNetwork};
use crate::quant::to_half_precision;
use crate::tensor::Tensor;

fn float_students(model: &DistilledModel) -> Result<Vec<&Network>> {
    if model.quant_state != QuantState::Fp32 {
        return Err(Error::InvalidArgument(format!(
            "expected an fp32 model, got {}",
            model.quant_state.tag()
        )));
    }
    model
        .students
        .iter()
        .map(|s| s.as_float().ok_or_else(|| Error::InvalidArgument("student is not float".into())))
        .collect()
}

fn quantize_students(nets: &[&Network], quants: Vec<NetQuant>) -> Result<Vec<StudentNet>> {
    nets.iter()
        .zip(quants)
        .map(|(n, q)| QuantizedNetwork::from_float(n, q).map(StudentNet::Quantized))
        .collect()
}

fn net_quants(plan: &CalibrationPlan, nets: &[&Network]) -> Result<Vec<NetQuant>> {
    let defs: Vec<&ModelDef> = nets.iter().map(|n| &n.def).collect();
    plan.check_covers(&defs)?;
    nets.iter().enumerate().map(|(k, n)| plan.net_quant(k, &n.def)).collect()
}

/// Stores student weights as integers with the plan's parameters; inference
/// then runs the integer path at every planned site.
pub fn ptq_quantize_model(model: &DistilledModel, plan: &CalibrationPlan) -> Result<DistilledModel> {
    let nets = float_students(model)?;
    let quants = net_quants(plan, &nets)?;
    let students = quantize_students(&nets, quants)?;
    model.with_students(students, QuantState::Ptq(plan.clone()))
}

/// Rounds student weights to binary16; activations are rounded per layer
/// at inference.
pub fn to_fp16(model: &DistilledModel) -> Result<DistilledModel> {
    let nets = float_students(model)?;
    let students = nets
        .iter()
        .map(|n| {
            let params = n.params.iter().map(to_half_precision).collect::<Result<Vec<Tensor>>>()?;
            Ok(StudentNet::Float(Network::new(n.def.clone(), params)?))
        })
        .collect::<Result<Vec<_>>>()?;
    model.with_students(students, QuantState::Fp16)
}

/// Fine-tunes the students through fake quantization with the plan's
/// parameters held fixed, then quantizes like [`ptq_quantize_model`]. With
/// zero epochs it is exactly [`ptq_quantize_model`].
pub fn qat_finetune(
    model: &DistilledModel,
    plan: &CalibrationPlan,
    images: &[Tensor],
    cfg: &TrainConfig,
) -> Result<(DistilledModel, Vec<LossRecord>)> {
    if cfg.epochs == 0 {
        return Ok((ptq_quantize_model(model, plan)?, Vec::new()));
    }
    cfg.validate()?;
    let nets = float_students(model)?;
    let quants = net_quants(plan, &nets)?;
    let samples = build_samples(model, images)?;
    let mut tuned: Vec<Network> = nets.iter().map(|n| (*n).clone()).collect();
    let log = optimize(&mut tuned, &samples, cfg, model.scheme.loss(), Some(&quants))?;
    let refs: Vec<&Network> = tuned.iter().collect();
    let students = quantize_students(&refs, quants)?;
    Ok((model.with_students(students, QuantState::Qat(plan.clone()))?, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{calibrate_model, CalibrationSource, Objective};
    use crate::distill::{student_def, teacher_def, Combine, Normalization, Scheme};

    fn setup() -> (DistilledModel, CalibrationPlan, Vec<Tensor>) {
        let t = Network::init(teacher_def(1), 1);
        let s = Network::init(student_def(Scheme::Stfpm, &t.def), 2);
        let m = DistilledModel::new(
            t,
            vec![StudentNet::Float(s)],
            Scheme::Stfpm,
            QuantState::Fp32,
            Normalization::default(),
            [1, 16, 16],
        )
        .unwrap();
        let imgs: Vec<Tensor> = (0..4)
            .map(|k| {
                Tensor::new(vec![1, 16, 16], (0..256).map(|i| ((i * (k + 3)) as f32 * 0.05).sin() * 1.8).collect())
                    .unwrap()
            })
            .collect();
        let src = CalibrationSource::Dataset {
            images: imgs.clone(),
            n_batches: 2,
            batch_size: 2,
        };
        let plan = calibrate_model(&m, &src, Objective::Entropy, 8).unwrap();
        (m, plan, imgs)
    }

    #[test]
    fn ptq_keeps_teacher_and_tracks_float_map() {
        let (m, _, imgs) = setup();
        // Min-max ranges leave only rounding error.
        let src = CalibrationSource::Dataset {
            images: imgs.clone(),
            n_batches: 2,
            batch_size: 2,
        };
        let plan = calibrate_model(&m, &src, Objective::MinMax, 8).unwrap();
        let q = ptq_quantize_model(&m, &plan).unwrap();
        assert_eq!(q.teacher(), m.teacher());
        let a = m.anomaly_map(&imgs[0], Combine::Sum).unwrap();
        let b = q.anomaly_map(&imgs[0], Combine::Sum).unwrap();
        let diff = a
            .scores
            .data()
            .iter()
            .zip(b.scores.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 0.03 * a.scores.max(), "{diff} vs map max {}", a.scores.max());
    }

    #[test]
    fn qat_zero_epochs_is_ptq() {
        let (m, plan, imgs) = setup();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::stfpm(16, 0)
        };
        let (q, log) = qat_finetune(&m, &plan, &imgs, &cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(q, ptq_quantize_model(&m, &plan).unwrap());
    }

    #[test]
    fn qat_runs_and_keeps_teacher() {
        let (m, plan, imgs) = setup();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            learning_rate: 0.01,
            ..TrainConfig::stfpm(16, 0)
        };
        let (q, log) = qat_finetune(&m, &plan, &imgs, &cfg).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(q.teacher(), m.teacher());
        assert!(matches!(q.quant_state, QuantState::Qat(_)));
    }

    #[test]
    fn plan_mismatch_lists_missing() {
        let (m, mut plan, _) = setup();
        plan.entries.retain(|e| e.site_id != "s0/act2");
        let err = ptq_quantize_model(&m, &plan).unwrap_err().to_string();
        assert!(err.contains("s0/act2"), "{err}");
    }

    #[test]
    fn fp16_is_half_grid() {
        let (m, _, imgs) = setup();
        let h = to_fp16(&m).unwrap();
        let s = h.students[0].as_float().unwrap();
        assert!(s.params.iter().all(|p| p.data().iter().all(|&v| half::f16::from_f32(v).to_f32() == v)));
        h.anomaly_map(&imgs[0], Combine::Sum).unwrap();
    }
}
