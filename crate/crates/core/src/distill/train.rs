//! Teacher pretraining, student distillation and the shared optimization
//! loop (also used by quantization-aware fine-tuning).

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Optimizer, OptimizerState, TrainConfig};
use super::losses::{self, LossSpec, UsStats};
use super::model::{student_def, DistilledModel, Normalization, QuantState, Scheme, StudentNet};
use crate::autograd::{self, loss_gradients_quant, Gradients, Sample};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::qnet::NetQuant;
use crate::tensor::Tensor;

/// One optimizer step's mean loss (averaged over the students).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub fn write_loss_csv(log: &[LossRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,step,loss")?;
    for r in log {
        writeln!(w, "{},{},{}", r.epoch, r.step, r.loss)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DistilledModel,
    pub log: Vec<LossRecord>,
}

/// Image labelled with its class index, for teacher pretraining.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Tensor,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// Zero keeps the random initialization.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        // Longer pretraining makes the toy features too invariant to score anomalies.
        Self {
            epochs: 2,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

/// Rotates a square `C x N x N` image by `k` quarter turns.
pub fn rotate90(x: &Tensor, k: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if h != w {
        return Err(Error::Shape(format!("rotation needs a square image, got {h}x{w}")));
    }
    let n = h;
    let mut cur = x.clone();
    for _ in 0..k % 4 {
        let src = cur.data();
        let mut out = vec![0.0; c * n * n];
        for ch in 0..c {
            for y in 0..n {
                for xx in 0..n {
                    out[ch * n * n + xx * n + (n - 1 - y)] = src[ch * n * n + y * n + xx];
                }
            }
        }
        cur = Tensor::new(vec![c, n, n], out)?;
    }
    Ok(cur)
}

/// Trains the teacher backbone as a classifier over (class, rotation)
/// labels through a global-average-pool and linear head, then drops the
/// head. With `epochs == 0` the seeded initialization is returned.
pub fn pretrain_teacher(
    def: crate::model::ModelDef,
    data: &[LabeledImage],
    n_classes: usize,
    cfg: &TeacherConfig,
) -> Result<Network> {
    let mut net = Network::init(def.clone(), cfg.seed);
    if cfg.epochs == 0 || data.is_empty() {
        return Ok(net);
    }
    let deepest = *def.tap_points.last().expect("taps");
    let body_def = def.with_taps(vec![deepest])?;
    net.def = body_def;
    let (c, h, w) = data[0].image.chw()?;
    let feat = net.def.layer_shapes([c, h, w])?[deepest][0];
    let n_out = n_classes * 4;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7eac_4e12);
    let head_w = {
        let s = (1.0 / feat as f32).sqrt();
        let normal = rand_distr::Normal::new(0.0f32, s).expect("std");
        let v = (0..n_out * feat).map(|_| rand_distr::Distribution::sample(&normal, &mut rng)).collect();
        Tensor::new(vec![n_out, feat], v)?
    };
    let mut params: Vec<Tensor> = net.params.clone();
    params.push(head_w);
    params.push(Tensor::zeros(&[n_out]));
    let tcfg = TrainConfig {
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        weight_decay: 1e-5,
        optimizer: Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
        },
        image_size: h,
        seed: cfg.seed,
    };
    let mut opt = OptimizerState::new(&tcfg, &params);
    let np = net.params.len();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            net.params.clone_from_slice(&params[..np]);
            let mut grads = Gradients::zeros_like(&params);
            let mut loss = 0.0;
            for &i in chunk {
                let rot = rand::Rng::random_range(&mut rng, 0..4usize);
                let x = rotate90(&data[i].image, rot)?;
                let label = data[i].class * 4 + rot;
                let trace = autograd::traced_forward(&net, &x, None)?;
                let fmap = &trace.taps.maps[0];
                let (fc, fh, fw) = fmap.chw()?;
                let hw = (fh * fw) as f32;
                let f: Vec<f32> = (0..fc).map(|ch| fmap.data()[ch * fh * fw..(ch + 1) * fh * fw].iter().sum::<f32>() / hw).collect();
                let (hw_w, hw_b) = (&params[np], &params[np + 1]);
                let logits: Vec<f64> = (0..n_out)
                    .map(|o| {
                        f64::from(hw_b.data()[o])
                            + (0..fc).map(|j| f64::from(hw_w.data()[o * fc + j]) * f64::from(f[j])).sum::<f64>()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                let p: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
                loss += -(p[label].max(1e-300)).ln();
                let scale = 1.0 / chunk.len() as f64;
                let dl: Vec<f64> = (0..n_out).map(|o| (p[o] - f64::from(u8::from(o == label))) * scale).collect();
                let mut df = vec![0.0f64; fc];
                for o in 0..n_out {
                    grads.tensors[np + 1].data_mut()[o] += dl[o] as f32;
                    for j in 0..fc {
                        grads.tensors[np].data_mut()[o * fc + j] += (dl[o] * f64::from(f[j])) as f32;
                        df[j] += dl[o] * f64::from(hw_w.data()[o * fc + j]);
                    }
                }
                let mut tap = Tensor::zeros(&[fc, fh, fw]);
                for ch in 0..fc {
                    let g = (df[ch] / f64::from(hw)) as f32;
                    tap.data_mut()[ch * fh * fw..(ch + 1) * fh * fw].fill(g);
                }
                let g = autograd::backward(&net, &trace, &[tap]);
                for (a, b) in grads.tensors.iter_mut().zip(&g.tensors) {
                    a.add_assign(b);
                }
            }
            let loss = loss / chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            opt.apply(&mut params, &grads);
            step += 1;
        }
        log::debug!("teacher epoch {_epoch} done");
    }
    params.truncate(np);
    Network::new(def, params)
}

/// Distillation samples (student input and target) for every image.
pub fn build_samples(model: &DistilledModel, images: &[Tensor]) -> Result<Vec<Sample>> {
    images
        .iter()
        .map(|img| {
            let t = model.teacher_features(img)?;
            Ok(Sample {
                input: model.student_input(img, &t),
                target: model.student_target(&t),
            })
        })
        .collect()
}

/// Mini-batch optimization of all students over shuffled samples. Each
/// step feeds the same batch to every student.
pub(crate) fn optimize(
    students: &mut [Network],
    samples: &[Sample],
    cfg: &TrainConfig,
    spec: LossSpec,
    qat: Option<&[NetQuant]>,
) -> Result<Vec<LossRecord>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training images".into()));
    }
    let mut opts: Vec<OptimizerState> = students.iter().map(|s| OptimizerState::new(cfg, &s.params)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let mut total = 0.0;
            for (k, net) in students.iter_mut().enumerate() {
                let quant = qat.map(|q| &q[k]);
                let out = loss_gradients_quant(net, spec, &batch, quant).map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::Diverged { step, loss: f64::NAN },
                    e => e,
                })?;
                if !out.loss.is_finite() {
                    return Err(Error::Diverged { step, loss: out.loss });
                }
                opts[k].apply(&mut net.params, &out.grads);
                total += out.loss;
            }
            log.push(LossRecord {
                epoch,
                step,
                loss: total / students.len() as f64,
            });
            step += 1;
        }
    }
    Ok(log)
}

/// Distills fresh students from a frozen teacher.
///
/// Under the US scheme every eighth image is held out of training and used
/// to fit the score standardization statistics.
pub fn train_student(
    teacher: &Network,
    scheme: Scheme,
    images: &[Tensor],
    cfg: &TrainConfig,
    norm: Normalization,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = images.first().ok_or_else(|| Error::InvalidArgument("no training images".into()))?;
    let (c, h, w) = first.chw()?;
    let sdef = student_def(scheme, &teacher.def);
    let students = (0..scheme.n_students())
        .map(|k| StudentNet::Float(Network::init(sdef.clone(), cfg.seed.wrapping_add(1 + k as u64))))
        .collect();
    let mut model = DistilledModel::new(teacher.clone(), students, scheme, QuantState::Fp32, norm, [c, h, w])?;
    let (train, held): (Vec<Tensor>, Vec<Tensor>) = match scheme {
        Scheme::Us { .. } if images.len() >= 2 => {
            let (a, b): (Vec<_>, Vec<_>) = images.iter().enumerate().partition(|(i, _)| i % 8 != 7 || images.len() < 8);
            let held: Vec<Tensor> = if b.is_empty() {
                vec![images[images.len() - 1].clone()]
            } else {
                b.into_iter().map(|(_, t)| t.clone()).collect()
            };
            (a.into_iter().map(|(_, t)| t.clone()).collect(), held)
        }
        _ => (images.to_vec(), Vec::new()),
    };
    let log = fit_students(&mut model, &train, cfg)?;
    if let Scheme::Us { .. } = scheme {
        model.us_stats = Some(us_statistics(&model, &held)?);
    }
    Ok(TrainOutcome { model, log })
}

/// Continues training the model's float students on `images`.
pub fn fit_students(model: &mut DistilledModel, images: &[Tensor], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let samples = build_samples(model, images)?;
    let mut nets: Vec<Network> = model
        .students
        .iter()
        .map(|s| {
            s.as_float()
                .cloned()
                .ok_or_else(|| Error::InvalidArgument("training needs float students".into()))
        })
        .collect::<Result<_>>()?;
    let log = optimize(&mut nets, &samples, cfg, model.scheme.loss(), None)?;
    model.students = nets.into_iter().map(StudentNet::Float).collect();
    Ok(log)
}

/// Mean and standard deviation of raw US error and variance pooled over
/// every pixel of `images`.
pub fn us_statistics(model: &DistilledModel, images: &[Tensor]) -> Result<UsStats> {
    let (mut es, mut vs) = (Vec::new(), Vec::new());
    for img in images {
        let t = model.teacher_features(img)?;
        let target = model.student_target(&t);
        let embs: Vec<Tensor> = model
            .student_features(img, &t)?
            .into_iter()
            .map(|mut p| p.maps.remove(0))
            .collect();
        let (e, v) = losses::us_raw_maps(&target.maps[0], &embs)?;
        es.extend(e.data().iter().map(|&x| f64::from(x)));
        vs.extend(v.data().iter().map(|&x| f64::from(x)));
    }
    let ms = |v: &[f64]| {
        if v.is_empty() {
            return (0.0, 1.0);
        }
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        (m, if s > 0.0 { s } else { 1.0 })
    };
    let (e_mean, e_std) = ms(&es);
    let (v_mean, v_std) = ms(&vs);
    Ok(UsStats {
        e_mean,
        e_std,
        v_mean,
        v_std,
    })
}
