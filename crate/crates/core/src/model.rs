//! Layer-graph description of the small convnets used as teachers and
//! students, plus their parameters and the float forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, conv_out_dim, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub has_bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Conv(ConvSpec),
    Relu,
    MaxPool { k: usize, stride: usize },
    Upsample { factor: usize },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Upsample { .. } => "upsample",
        }
    }
}

pub fn conv(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Layer {
    Layer::Conv(ConvSpec {
        k,
        stride,
        pad,
        in_ch,
        out_ch,
        has_bias: true,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDef {
    pub layers: Vec<Layer>,
    /// Indices of layers whose outputs form the feature pyramid.
    pub tap_points: Vec<usize>,
}

impl ModelDef {
    pub fn new(layers: Vec<Layer>, tap_points: Vec<usize>) -> Result<Self> {
        let def = Self { layers, tap_points };
        def.check_structure()?;
        Ok(def)
    }

    fn check_structure(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("model has no layers".into()));
        }
        if self.tap_points.is_empty() {
            return Err(Error::InvalidArgument("model has no tap points".into()));
        }
        if !self.tap_points.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(format!(
                "tap points {:?} are not strictly increasing",
                self.tap_points
            )));
        }
        if let Some(&t) = self.tap_points.iter().find(|&&t| t >= self.layers.len()) {
            return Err(Error::InvalidArgument(format!(
                "tap point {t} is not a layer index (model has {} layers)",
                self.layers.len()
            )));
        }
        let mut channels: Option<usize> = None;
        for (index, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv(c) => {
                    if c.k == 0 || c.stride == 0 || c.in_ch == 0 || c.out_ch == 0 {
                        return Err(Error::Layer {
                            index,
                            kind: "conv",
                            reason: "kernel, stride and channel counts must be positive".into(),
                        });
                    }
                    if let Some(ch) = channels {
                        if ch != c.in_ch {
                            return Err(Error::Layer {
                                index,
                                kind: "conv",
                                reason: format!("expects {} input channels, previous layer yields {ch}", c.in_ch),
                            });
                        }
                    }
                    channels = Some(c.out_ch);
                }
                Layer::MaxPool { k, stride } if k == 0 || stride == 0 => {
                    return Err(Error::Layer {
                        index,
                        kind: "maxpool",
                        reason: "window and stride must be positive".into(),
                    })
                }
                Layer::Upsample { factor } if factor == 0 => {
                    return Err(Error::Layer {
                        index,
                        kind: "upsample",
                        reason: "factor must be positive".into(),
                    })
                }
                _ => {}
            }
        }
        if channels.is_none() {
            return Err(Error::InvalidArgument("model has no conv layer".into()));
        }
        Ok(())
    }

    /// Channel count the first conv layer expects.
    pub fn input_channels(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Conv(c) => Some(c.in_ch),
                _ => None,
            })
            .expect("validated model has a conv layer")
    }

    /// Output shape of every layer for a `C x H x W` input.
    pub fn layer_shapes(&self, input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let [mut c, mut h, mut w] = input;
        if c != self.input_channels() {
            return Err(Error::Shape(format!(
                "input has {c} channels, model expects {}",
                self.input_channels()
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let fail = |reason: String| Error::Layer {
                index,
                kind: layer.kind(),
                reason,
            };
            match *layer {
                Layer::Conv(cs) => {
                    if cs.in_ch != c {
                        return Err(fail(format!("expects {} channels, got {c}", cs.in_ch)));
                    }
                    match (
                        conv_out_dim(h, cs.k, cs.stride, cs.pad),
                        conv_out_dim(w, cs.k, cs.stride, cs.pad),
                    ) {
                        (Some(a), Some(b)) => {
                            h = a;
                            w = b;
                        }
                        _ => return Err(fail(format!("kernel {} does not fit {h}x{w}", cs.k))),
                    }
                    c = cs.out_ch;
                }
                Layer::Relu => {}
                Layer::MaxPool { k, stride } => {
                    match (conv_out_dim(h, k, stride, 0), conv_out_dim(w, k, stride, 0)) {
                        (Some(a), Some(b)) => {
                            h = a;
                            w = b;
                        }
                        _ => return Err(fail(format!("window {k} does not fit {h}x{w}"))),
                    }
                }
                Layer::Upsample { factor } => {
                    h *= factor;
                    w *= factor;
                }
            }
            shapes.push([c, h, w]);
        }
        Ok(shapes)
    }

    /// Indices of conv layers in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Conv(_)).then_some(i))
            .collect()
    }

    /// For each conv layer, the layer after which its activation is
    /// quantized: the following ReLU when there is one (fused), else the conv.
    pub fn activation_site_layer(&self, conv_index: usize) -> usize {
        match self.layers.get(conv_index + 1) {
            Some(Layer::Relu) => conv_index + 1,
            _ => conv_index,
        }
    }

    /// Parameter tensor shapes in storage order: for each conv, weights then
    /// bias (when present).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut v = Vec::new();
        for layer in &self.layers {
            if let Layer::Conv(c) = layer {
                v.push(vec![c.out_ch, c.in_ch, c.k, c.k]);
                if c.has_bias {
                    v.push(vec![c.out_ch]);
                }
            }
        }
        v
    }

    /// For each layer, the index of its weight tensor and optional bias in
    /// the flat parameter list.
    pub fn param_slots(&self) -> Vec<Option<(usize, Option<usize>)>> {
        let mut next = 0;
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => {
                    let w = next;
                    next += 1;
                    let b = c.has_bias.then(|| {
                        next += 1;
                        next - 1
                    });
                    Some((w, b))
                }
                _ => None,
            })
            .collect()
    }

    pub fn with_taps(&self, tap_points: Vec<usize>) -> Result<ModelDef> {
        ModelDef::new(self.layers.clone(), tap_points)
    }
}

/// Ordered per-tap feature maps, each `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub maps: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn scale(&self, k: f32) -> FeaturePyramid {
        FeaturePyramid {
            maps: self.maps.iter().map(|m| m.scale(k)).collect(),
        }
    }

    pub fn reversed(mut self) -> FeaturePyramid {
        self.maps.reverse();
        self
    }
}

/// A model definition together with its float parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub def: ModelDef,
    pub params: Vec<Tensor>,
}

impl Network {
    pub fn new(def: ModelDef, params: Vec<Tensor>) -> Result<Self> {
        let shapes = def.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Shape(format!(
                "model needs {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if s.as_slice() != p.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i} should be {s:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self { def, params })
    }

    /// He-normal weights and zero biases from a seeded generator.
    pub fn init(def: ModelDef, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &def.layers {
            if let Layer::Conv(c) = layer {
                let fan_in = (c.in_ch * c.k * c.k) as f32;
                let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("valid std");
                let n = c.out_ch * c.in_ch * c.k * c.k;
                let w: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                params.push(Tensor::new(vec![c.out_ch, c.in_ch, c.k, c.k], w).expect("shape"));
                if c.has_bias {
                    params.push(Tensor::zeros(&[c.out_ch]));
                }
            }
        }
        Self { def, params }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn forward(&self, input: &Tensor) -> Result<FeaturePyramid> {
        forward(&self.def, &self.params, input)
    }
}

/// Float forward pass returning the outputs at every tap point.
pub fn forward(def: &ModelDef, params: &[Tensor], input: &Tensor) -> Result<FeaturePyramid> {
    let (c, h, w) = input.chw()?;
    def.layer_shapes([c, h, w])?;
    let slots = def.param_slots();
    let mut cur = input.clone();
    let mut maps = Vec::with_capacity(def.tap_points.len());
    let mut taps = def.tap_points.iter().peekable();
    for (index, layer) in def.layers.iter().enumerate() {
        cur = apply_layer(index, layer, &cur, params, slots[index])?;
        if taps.peek() == Some(&&index) {
            maps.push(cur.clone());
            taps.next();
        }
    }
    Ok(FeaturePyramid { maps })
}

pub(crate) fn apply_layer(
    index: usize,
    layer: &Layer,
    x: &Tensor,
    params: &[Tensor],
    slot: Option<(usize, Option<usize>)>,
) -> Result<Tensor> {
    let wrap = |e: Error| Error::Layer {
        index,
        kind: layer.kind(),
        reason: e.to_string(),
    };
    match *layer {
        Layer::Conv(c) => {
            let (wi, bi) = slot.expect("conv has a parameter slot");
            tensor::conv2d(x, &params[wi], bi.map(|b| &params[b]), c.stride, c.pad).map_err(wrap)
        }
        Layer::Relu => Ok(tensor::relu(x)),
        Layer::MaxPool { k, stride } => tensor::maxpool2d(x, k, stride).map(|(t, _)| t).map_err(wrap),
        Layer::Upsample { factor } => {
            let (_, h, w) = x.chw().map_err(wrap)?;
            tensor::upsample_channels(x, h * factor, w * factor).map_err(wrap)
        }
    }
}
