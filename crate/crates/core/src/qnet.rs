//! Quantized student networks: per-site quantization parameters and the
//! integer inference path.

use crate::error::{Error, Result};
use crate::model::{FeaturePyramid, Layer, ModelDef, Network};
use crate::quant::{self, IntTensor, QuantParams};
use crate::tensor::{self, Tensor};

/// Quantization parameters of one conv layer: its weights and the
/// activation site that follows it (after a fused ReLU when present).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvQuant {
    pub layer: usize,
    pub weight: QuantParams,
    pub activation: QuantParams,
}

/// Quantization parameters for a whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetQuant {
    pub input: QuantParams,
    /// One entry per conv layer, in layer order.
    pub convs: Vec<ConvQuant>,
}

impl NetQuant {
    pub fn conv_for_layer(&self, layer: usize) -> Result<&ConvQuant> {
        self.convs
            .iter()
            .find(|c| c.layer == layer)
            .ok_or_else(|| Error::PlanMismatch(format!("no quantization parameters for conv layer {layer}")))
    }

    /// Checks that every conv layer of `def` has exactly one entry.
    pub fn check_covers(&self, def: &ModelDef) -> Result<()> {
        let convs = def.conv_layers();
        let have: Vec<usize> = self.convs.iter().map(|c| c.layer).collect();
        if have != convs {
            return Err(Error::PlanMismatch(format!(
                "conv layers {convs:?} but quantization entries for {have:?}"
            )));
        }
        Ok(())
    }
}

/// A network whose conv weights are stored as integers. Biases stay in
/// float and are quantized at scale `s_x * s_w` when the network runs.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNetwork {
    pub def: ModelDef,
    /// Quantized weights, one per conv layer in layer order.
    pub weights: Vec<IntTensor>,
    /// Float biases, one per conv layer in layer order.
    pub biases: Vec<Option<Tensor>>,
    pub quant: NetQuant,
}

impl QuantizedNetwork {
    /// Quantizes the weights of `net` with the given parameters.
    pub fn from_float(net: &Network, quant: NetQuant) -> Result<Self> {
        quant.check_covers(&net.def)?;
        let slots = net.def.param_slots();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for cq in &quant.convs {
            let (wi, bi) = slots[cq.layer].expect("conv slot");
            weights.push(quant::quantize(&net.params[wi], &cq.weight));
            biases.push(bi.map(|b| net.params[b].clone()));
        }
        let q = Self {
            def: net.def.clone(),
            weights,
            biases,
            quant,
        };
        q.check()?;
        Ok(q)
    }

    pub fn new(def: ModelDef, weights: Vec<IntTensor>, biases: Vec<Option<Tensor>>, quant: NetQuant) -> Result<Self> {
        quant.check_covers(&def)?;
        let q = Self {
            def,
            weights,
            biases,
            quant,
        };
        q.check()?;
        Ok(q)
    }

    fn check(&self) -> Result<()> {
        let shapes = self.def.param_shapes();
        let slots = self.def.param_slots();
        if self.weights.len() != self.quant.convs.len() || self.biases.len() != self.quant.convs.len() {
            return Err(Error::Shape("one weight and bias entry per conv layer expected".into()));
        }
        for ((cq, w), b) in self.quant.convs.iter().zip(&self.weights).zip(&self.biases) {
            let (wi, bi) = slots[cq.layer].expect("conv slot");
            if w.shape() != shapes[wi].as_slice() {
                return Err(Error::Shape(format!("weights of layer {} have shape {:?}", cq.layer, w.shape())));
            }
            if w.qparams() != &cq.weight {
                return Err(Error::PlanMismatch(format!("weights of layer {} carry other qparams", cq.layer)));
            }
            match (bi, b) {
                (Some(i), Some(b)) if b.shape() == shapes[i].as_slice() => {}
                (None, None) => {}
                _ => return Err(Error::Shape(format!("bias of layer {} does not match", cq.layer))),
            }
        }
        Ok(())
    }

    /// Float network with the dequantized weights (what fake quantization
    /// sees during training).
    pub fn dequantized(&self) -> Network {
        let mut params = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            params.push(quant::dequantize(w));
            if let Some(b) = b {
                params.push(b.clone());
            }
        }
        Network::new(self.def.clone(), params).expect("shapes checked at construction")
    }

    /// Integer inference. Tap outputs are dequantized.
    pub fn forward(&self, input: &Tensor) -> Result<FeaturePyramid> {
        let (c, h, w) = input.chw()?;
        self.def.layer_shapes([c, h, w])?;
        let mut cur = quant::quantize(input, &self.quant.input);
        let mut maps = Vec::with_capacity(self.def.tap_points.len());
        let mut taps = self.def.tap_points.iter().peekable();
        let mut conv_i = 0;
        for (index, layer) in self.def.layers.iter().enumerate() {
            let wrap = |e: Error| Error::Layer {
                index,
                kind: layer.kind(),
                reason: e.to_string(),
            };
            cur = match *layer {
                Layer::Conv(cs) => {
                    let cq = &self.quant.convs[conv_i];
                    let w = &self.weights[conv_i];
                    let bias = match &self.biases[conv_i] {
                        Some(b) => Some(quant::quantize_bias(b.data(), cur.qparams().scale, cq.weight.scale).map_err(wrap)?),
                        None => None,
                    };
                    conv_i += 1;
                    quant::quantized_conv2d(&cur, w, bias.as_deref(), &cq.activation, cs.stride, cs.pad).map_err(wrap)?
                }
                Layer::Relu => cur.relu(),
                Layer::MaxPool { k, stride } => cur.maxpool(k, stride).map_err(wrap)?,
                Layer::Upsample { factor } => {
                    let qp = *cur.qparams();
                    let x = quant::dequantize(&cur);
                    let (_, hh, ww) = x.chw().map_err(wrap)?;
                    let up = tensor::upsample_channels(&x, hh * factor, ww * factor).map_err(wrap)?;
                    quant::quantize(&up, &qp)
                }
            };
            if taps.peek() == Some(&&index) {
                maps.push(quant::dequantize(&cur));
                taps.next();
            }
        }
        Ok(FeaturePyramid { maps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::forward_fake_quant;
    use crate::model::conv;
    use crate::quant::{compute_qparams, QuantMode};

    fn setup() -> (Network, NetQuant) {
        let def = ModelDef::new(
            vec![
                conv(1, 4, 3, 1, 1),
                Layer::Relu,
                conv(4, 4, 3, 2, 1),
                Layer::Relu,
                Layer::Upsample { factor: 2 },
                conv(4, 2, 1, 1, 0),
            ],
            vec![3, 5],
        )
        .unwrap();
        let mut net = Network::init(def, 11);
        for (i, v) in net.params[1].data_mut().iter_mut().enumerate() {
            *v = 0.05 * i as f32;
        }
        let act = |hi: f64| compute_qparams(0.0, hi, 8, QuantMode::AffineUnsigned).unwrap();
        let wq = |t: &Tensor| {
            let m = t.data().iter().fold(0.0f32, |a, v| a.max(v.abs())) as f64;
            compute_qparams(-m, m, 8, QuantMode::SymmetricSigned).unwrap()
        };
        let quant = NetQuant {
            input: compute_qparams(-2.0, 2.0, 8, QuantMode::AffineUnsigned).unwrap(),
            convs: vec![
                ConvQuant {
                    layer: 0,
                    weight: wq(&net.params[0]),
                    activation: act(3.0),
                },
                ConvQuant {
                    layer: 2,
                    weight: wq(&net.params[2]),
                    activation: act(4.0),
                },
                ConvQuant {
                    layer: 5,
                    weight: wq(&net.params[4]),
                    activation: compute_qparams(-3.0, 3.0, 8, QuantMode::AffineUnsigned).unwrap(),
                },
            ],
        };
        (net, quant)
    }

    #[test]
    fn integer_path_tracks_fake_quant() {
        let (net, quant) = setup();
        let qn = QuantizedNetwork::from_float(&net, quant.clone()).unwrap();
        let x = Tensor::new(vec![1, 8, 8], (0..64).map(|i| ((i as f32) * 0.37).sin() * 1.5).collect()).unwrap();
        let int = qn.forward(&x).unwrap();
        let fake = forward_fake_quant(&qn.dequantized(), &x, &quant).unwrap();
        for (a, b) in int.maps.iter().zip(&fake.maps) {
            let s = 4.0 / 255.0;
            for (u, v) in a.data().iter().zip(b.data()) {
                // f32 vs integer accumulation may flip an occasional rounding.
                assert!((u - v).abs() <= 2.0 * s as f32 + 1e-6, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn missing_conv_entry_is_reported() {
        let (net, mut quant) = setup();
        quant.convs.pop();
        assert!(matches!(QuantizedNetwork::from_float(&net, quant), Err(Error::PlanMismatch(_))));
    }
}
