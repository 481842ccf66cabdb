//! Reverse-mode gradients for the fixed layer vocabulary.
//!
//! A traced forward pass records what each layer's backward needs; the
//! backward pass then walks the layers in reverse, injecting the loss
//! gradient at every tap. With a [`NetQuant`] attached, weights and
//! activations are fake-quantized on the way forward and the backward pass
//! applies the straight-through rule (identity inside the clamp range, zero
//! outside).

use crate::distill::losses::{self, LossSpec};
use crate::error::{Error, Result};
use crate::model::{FeaturePyramid, Layer, ModelDef, Network};
use crate::qnet::NetQuant;
use crate::quant::{fake_quantize_ste, QuantParams};
use crate::tensor::{self, Tensor};

/// One gradient tensor per parameter tensor, shape-matched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self {
            tensors: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    fn accumulate(&mut self, other: &Gradients, weight: f32) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += weight * y;
            }
        }
    }
}

/// A student input and the teacher features it should reproduce.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub target: FeaturePyramid,
}

enum Cache {
    Conv {
        input: Tensor,
        weight: Tensor,
        weight_mask: Option<Vec<bool>>,
        stride: usize,
        pad: usize,
    },
    Relu {
        input: Tensor,
    },
    MaxPool {
        shape: [usize; 3],
        argmax: Vec<usize>,
    },
    Upsample {
        h: usize,
        w: usize,
    },
}

pub(crate) struct Trace {
    caches: Vec<Cache>,
    /// Straight-through mask of the fake quantization applied after each layer.
    site_masks: Vec<Option<Vec<bool>>>,
    pub(crate) taps: FeaturePyramid,
}

fn fq_site(x: Tensor, qp: &QuantParams) -> (Tensor, Vec<bool>) {
    fake_quantize_ste(&x, qp)
}

/// Forward pass that records everything the backward pass needs.
pub(crate) fn traced_forward(net: &Network, input: &Tensor, quant: Option<&NetQuant>) -> Result<Trace> {
    let def = &net.def;
    let (c, h, w) = input.chw()?;
    def.layer_shapes([c, h, w])?;
    let slots = def.param_slots();
    let site_after = site_layers(def, quant);

    let mut cur_qp = quant.map(|q| q.input);
    let mut cur = match quant {
        Some(q) => fq_site(input.clone(), &q.input).0,
        None => input.clone(),
    };
    let mut caches = Vec::with_capacity(def.layers.len());
    let mut site_masks = Vec::with_capacity(def.layers.len());
    let mut maps = Vec::new();
    let mut taps = def.tap_points.iter().peekable();

    for (index, layer) in def.layers.iter().enumerate() {
        let out = match *layer {
            Layer::Conv(cs) => {
                let (wi, bi) = slots[index].expect("conv slot");
                let (weight, weight_mask, bias) = match quant {
                    Some(q) => {
                        let cq = q.conv_for_layer(index)?;
                        let (wq, mask) = fake_quantize_ste(&net.params[wi], &cq.weight);
                        let bias = bi.map(|b| {
                            let s = cur_qp.expect("input qparams").scale * cq.weight.scale;
                            net.params[b].map(|v| ((f64::from(v) / s).round_ties_even() * s) as f32)
                        });
                        (wq, Some(mask), bias)
                    }
                    None => (net.params[wi].clone(), None, bi.map(|b| net.params[b].clone())),
                };
                let out = tensor::conv2d(&cur, &weight, bias.as_ref(), cs.stride, cs.pad).map_err(|e| {
                    Error::Layer {
                        index,
                        kind: "conv",
                        reason: e.to_string(),
                    }
                })?;
                caches.push(Cache::Conv {
                    input: std::mem::replace(&mut cur, Tensor::zeros(&[1])),
                    weight,
                    weight_mask,
                    stride: cs.stride,
                    pad: cs.pad,
                });
                out
            }
            Layer::Relu => {
                let out = tensor::relu(&cur);
                caches.push(Cache::Relu {
                    input: std::mem::replace(&mut cur, Tensor::zeros(&[1])),
                });
                out
            }
            Layer::MaxPool { k, stride } => {
                let (ch, hh, ww) = cur.chw()?;
                let (out, argmax) = tensor::maxpool2d(&cur, k, stride)?;
                caches.push(Cache::MaxPool {
                    shape: [ch, hh, ww],
                    argmax,
                });
                out
            }
            Layer::Upsample { factor } => {
                let (_, hh, ww) = cur.chw()?;
                caches.push(Cache::Upsample { h: hh, w: ww });
                tensor::upsample_channels(&cur, hh * factor, ww * factor)?
            }
        };

        // Activation sites after a conv (or its fused ReLU); upsampled values
        // are re-snapped to the grid they came from.
        let mut mask = None;
        cur = out;
        if let Some(q) = quant {
            if let Some(conv_layer) = site_after[index] {
                let qp = q.conv_for_layer(conv_layer)?.activation;
                let (v, m) = fq_site(cur, &qp);
                cur = v;
                mask = Some(m);
                cur_qp = Some(qp);
            } else if matches!(layer, Layer::Upsample { .. }) {
                let qp = cur_qp.expect("quantized value before upsample");
                let (v, m) = fq_site(cur, &qp);
                cur = v;
                mask = Some(m);
            }
        }
        site_masks.push(mask);

        if taps.peek() == Some(&&index) {
            maps.push(cur.clone());
            taps.next();
        }
    }
    Ok(Trace {
        caches,
        site_masks,
        taps: FeaturePyramid { maps },
    })
}

/// For each layer index, the conv layer whose activation site sits after it.
pub(crate) fn site_layers(def: &ModelDef, quant: Option<&NetQuant>) -> Vec<Option<usize>> {
    let mut v = vec![None; def.layers.len()];
    if quant.is_some() {
        for ci in def.conv_layers() {
            v[def.activation_site_layer(ci)] = Some(ci);
        }
    }
    v
}

/// Propagates tap gradients back to the parameters.
pub(crate) fn backward(net: &Network, trace: &Trace, tap_grads: &[Tensor]) -> Gradients {
    let def = &net.def;
    let slots = def.param_slots();
    let mut grads = Gradients::zeros_like(&net.params);
    let mut g: Option<Tensor> = None;
    let last_tap = *def.tap_points.last().expect("at least one tap");

    for index in (0..=last_tap).rev() {
        if let Some(t) = def.tap_points.iter().position(|&p| p == index) {
            match g.as_mut() {
                Some(g) => g.add_assign(&tap_grads[t]),
                None => g = Some(tap_grads[t].clone()),
            }
        }
        let Some(mut go) = g.take() else { continue };
        if let Some(mask) = &trace.site_masks[index] {
            for (v, &m) in go.data_mut().iter_mut().zip(mask) {
                if !m {
                    *v = 0.0;
                }
            }
        }
        let gin = match &trace.caches[index] {
            Cache::Conv {
                input,
                weight,
                weight_mask,
                stride,
                pad,
            } => {
                let (wi, bi) = slots[index].expect("conv slot");
                let (gx, mut gw, gb) = tensor::conv2d_backward(input, weight, &go, *stride, *pad, index > 0);
                if let Some(mask) = weight_mask {
                    for (v, &m) in gw.data_mut().iter_mut().zip(mask) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                }
                grads.tensors[wi].add_assign(&gw);
                if let Some(b) = bi {
                    grads.tensors[b].add_assign(&gb);
                }
                gx
            }
            Cache::Relu { input } => {
                for (v, &x) in go.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *v = 0.0;
                    }
                }
                Some(go)
            }
            Cache::MaxPool { shape, argmax } => {
                let mut gx = Tensor::zeros(shape);
                for (&src, &v) in argmax.iter().zip(go.data()) {
                    gx.data_mut()[src] += v;
                }
                Some(gx)
            }
            Cache::Upsample { h, w } => Some(tensor::upsample_channels_backward(&go, *h, *w)),
        };
        g = gin;
    }
    grads
}

/// Output of one gradient evaluation over a batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Gradients,
}

/// Mean batch loss and its exact gradients with respect to every parameter.
pub fn loss_gradients(net: &Network, spec: LossSpec, batch: &[Sample]) -> Result<(f64, Gradients)> {
    let out = loss_gradients_quant(net, spec, batch, None)?;
    Ok((out.loss, out.grads))
}

/// [`loss_gradients`] with optional fake quantization (straight-through).
pub fn loss_gradients_quant(
    net: &Network,
    spec: LossSpec,
    batch: &[Sample],
    quant: Option<&NetQuant>,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = Gradients::zeros_like(&net.params);
    let mut loss_sum = 0.0f64;
    let weight = 1.0 / batch.len() as f32;
    for (i, sample) in batch.iter().enumerate() {
        let trace = traced_forward(net, &sample.input, quant)?;
        let (loss, tap_grads) = losses::loss_and_grad(spec, &sample.target, &trace.taps)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { batch: i });
        }
        let g = backward(net, &trace, &tap_grads);
        if g.tensors.iter().any(|t| t.first_non_finite().is_some()) {
            return Err(Error::NonFiniteLoss { batch: i });
        }
        total.accumulate(&g, weight);
        loss_sum += loss;
    }
    Ok(StepOutput {
        loss: loss_sum / batch.len() as f64,
        grads: total,
    })
}

/// Forward pass through fake quantization, without recording a trace.
pub fn forward_fake_quant(net: &Network, input: &Tensor, quant: &NetQuant) -> Result<FeaturePyramid> {
    Ok(traced_forward(net, input, Some(quant))?.taps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{conv, Network};

    fn net() -> Network {
        let def = ModelDef::new(
            vec![
                conv(1, 3, 3, 1, 1),
                Layer::Relu,
                Layer::MaxPool { k: 2, stride: 2 },
                conv(3, 4, 3, 1, 1),
                Layer::Relu,
                Layer::Upsample { factor: 2 },
                conv(4, 2, 1, 1, 0),
            ],
            vec![4, 6],
        )
        .unwrap();
        Network::init(def, 5)
    }

    fn input(seed: u32) -> Tensor {
        Tensor::new(
            vec![1, 6, 6],
            (0..36).map(|i| ((i as f32 + seed as f32) * 0.77).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_student_has_zero_loss_and_grad() {
        let n = net();
        let batch: Vec<Sample> = (0..2)
            .map(|s| {
                let x = input(s);
                Sample {
                    target: n.forward(&x).unwrap(),
                    input: x,
                }
            })
            .collect();
        let (loss, g) = loss_gradients(&n, LossSpec::Stfpm, &batch).unwrap();
        assert!(loss.abs() < 1e-12, "{loss}");
        assert!(g.tensors.iter().all(|t| t.data().iter().all(|v| v.abs() < 1e-6)));
    }

    #[test]
    fn batch_loss_is_mean() {
        let teacher = net();
        let student = Network::init(teacher.def.clone(), 77);
        let samples: Vec<Sample> = (0..2)
            .map(|s| {
                let x = input(s);
                Sample {
                    target: teacher.forward(&x).unwrap(),
                    input: x,
                }
            })
            .collect();
        for spec in [LossSpec::Stfpm, LossSpec::RdCosine, LossSpec::UsRegression] {
            let (both, _) = loss_gradients(&student, spec, &samples).unwrap();
            let (a, _) = loss_gradients(&student, spec, &samples[..1]).unwrap();
            let (b, _) = loss_gradients(&student, spec, &samples[1..]).unwrap();
            assert!((both - (a + b) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn traced_float_forward_matches_forward() {
        let n = net();
        let x = input(3);
        let t = traced_forward(&n, &x, None).unwrap();
        assert_eq!(t.taps, n.forward(&x).unwrap());
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(loss_gradients(&net(), LossSpec::Stfpm, &[]).is_err());
    }
}
