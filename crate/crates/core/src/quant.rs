//! Affine integer quantization: parameter selection, quantize/dequantize,
//! fake quantization with a straight-through gradient mask, an integer
//! convolution with requantization, and binary16 rounding.
//!
//! A float `x` maps to `x_q = clamp(round(x / s + z), qmin, qmax)` and back
//! to `s * (x_q - z)`. Rounding is half-to-even throughout. Scales are kept
//! in `f64` so that the zero point is computed from the exact range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_dim, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// `[0, 2^b - 1]` with a free zero point; used for activations.
    AffineUnsigned,
    /// `[-(2^(b-1) - 1), 2^(b-1) - 1]` with zero point 0; used for weights.
    SymmetricSigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
    pub qmin: i32,
    pub qmax: i32,
}

impl QuantParams {
    /// Rebuilds parameters from their stored fields, checking every invariant.
    pub fn from_parts(scale: f64, zero_point: i32, bits: u8, qmin: i32, qmax: i32) -> Result<Self> {
        let qp = Self {
            scale,
            zero_point,
            bits,
            qmin,
            qmax,
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::InvalidArgument(format!("bits must be in 2..=8, got {}", self.bits)));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {}", self.scale)));
        }
        let (lo, hi) = match self.mode() {
            QuantMode::AffineUnsigned => (0, (1i32 << self.bits) - 1),
            QuantMode::SymmetricSigned => {
                let m = (1i32 << (self.bits - 1)) - 1;
                (-m, m)
            }
        };
        if (self.qmin, self.qmax) != (lo, hi) {
            return Err(Error::InvalidArgument(format!(
                "integer range [{}, {}] does not match {} bits",
                self.qmin, self.qmax, self.bits
            )));
        }
        if self.zero_point < self.qmin || self.zero_point > self.qmax {
            return Err(Error::InvalidArgument(format!(
                "zero point {} outside [{}, {}]",
                self.zero_point, self.qmin, self.qmax
            )));
        }
        if self.mode() == QuantMode::SymmetricSigned && self.zero_point != 0 {
            return Err(Error::InvalidArgument("symmetric zero point must be 0".into()));
        }
        Ok(())
    }

    pub fn mode(&self) -> QuantMode {
        if self.qmin < 0 {
            QuantMode::SymmetricSigned
        } else {
            QuantMode::AffineUnsigned
        }
    }

    /// Float interval covered by the integer grid, `[s(qmin - z), s(qmax - z)]`.
    pub fn range(&self) -> (f64, f64) {
        (
            self.scale * f64::from(self.qmin - self.zero_point),
            self.scale * f64::from(self.qmax - self.zero_point),
        )
    }

    #[inline]
    pub fn quantize_value(&self, x: f64) -> i32 {
        let q = (x / self.scale + f64::from(self.zero_point)).round_ties_even();
        q.clamp(f64::from(self.qmin), f64::from(self.qmax)) as i32
    }

    #[inline]
    pub fn dequantize_value(&self, q: i32) -> f64 {
        self.scale * f64::from(q - self.zero_point)
    }

    #[inline]
    pub fn fake_quantize_value(&self, x: f64) -> f64 {
        self.dequantize_value(self.quantize_value(x))
    }
}

/// Chooses scale and zero point for the float range `[alpha, beta]`.
///
/// Affine ranges are first widened to contain zero so that 0.0 stays exactly
/// representable; symmetric ranges are widened to `[-m, m]`.
pub fn compute_qparams(alpha: f64, beta: f64, bits: u8, mode: QuantMode) -> Result<QuantParams> {
    if !alpha.is_finite() {
        return Err(Error::NonFinite { index: 0, value: alpha });
    }
    if !beta.is_finite() {
        return Err(Error::NonFinite { index: 1, value: beta });
    }
    if alpha >= beta {
        return Err(Error::DegenerateRange { lo: alpha, hi: beta });
    }
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bits must be in 2..=8, got {bits}")));
    }
    let qp = match mode {
        QuantMode::AffineUnsigned => {
            let (qmin, qmax) = (0, (1i32 << bits) - 1);
            let lo = alpha.min(0.0);
            let hi = beta.max(0.0);
            let scale = (hi - lo) / f64::from(qmax - qmin);
            let z = (f64::from(qmin) - (lo / scale).round_ties_even())
                .clamp(f64::from(qmin), f64::from(qmax)) as i32;
            QuantParams {
                scale,
                zero_point: z,
                bits,
                qmin,
                qmax,
            }
        }
        QuantMode::SymmetricSigned => {
            let qmax = (1i32 << (bits - 1)) - 1;
            let m = alpha.abs().max(beta.abs());
            QuantParams {
                scale: m / f64::from(qmax),
                zero_point: 0,
                bits,
                qmin: -qmax,
                qmax,
            }
        }
    };
    qp.validate()?;
    Ok(qp)
}

/// Integer tensor carrying its quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    qparams: QuantParams,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>, qparams: QuantParams) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || n == 0 {
            return Err(Error::Shape(format!(
                "shape {shape:?} does not match {} elements",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&q| q < qparams.qmin || q > qparams.qmax) {
            return Err(Error::InvalidArgument(format!(
                "element {i} = {} outside [{}, {}]",
                data[i], qparams.qmin, qparams.qmax
            )));
        }
        Ok(Self { shape, data, qparams })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn qparams(&self) -> &QuantParams {
        &self.qparams
    }

    /// Applies `max(q, z)`, the integer-domain ReLU.
    pub fn relu(&self) -> IntTensor {
        let z = self.qparams.zero_point;
        IntTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&q| q.max(z)).collect(),
            qparams: self.qparams,
        }
    }

    pub(crate) fn maxpool(&self, k: usize, stride: usize) -> Result<IntTensor> {
        let (c, h, w) = match self.shape[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::Shape(format!("expected C x H x W, got {:?}", self.shape))),
        };
        let (oh, ow) = match (conv_out_dim(h, k, stride, 0), conv_out_dim(w, k, stride, 0)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Shape("maxpool window does not fit".into())),
        };
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = i32::MIN;
                    for ky in 0..k {
                        for kx in 0..k {
                            best = best.max(self.data[ch * h * w + (oy * stride + ky) * w + ox * stride + kx]);
                        }
                    }
                    out.push(best);
                }
            }
        }
        Ok(IntTensor {
            shape: vec![c, oh, ow],
            data: out,
            qparams: self.qparams,
        })
    }
}

pub fn quantize(x: &Tensor, qp: &QuantParams) -> IntTensor {
    IntTensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| qp.quantize_value(f64::from(v))).collect(),
        qparams: *qp,
    }
}

pub fn dequantize(q: &IntTensor) -> Tensor {
    let qp = q.qparams;
    Tensor::new(
        q.shape.clone(),
        q.data.iter().map(|&v| qp.dequantize_value(v) as f32).collect(),
    )
    .expect("shape checked at construction")
}

/// Quantize-then-dequantize.
pub fn fake_quantize(x: &Tensor, qp: &QuantParams) -> Tensor {
    x.map(|v| qp.fake_quantize_value(f64::from(v)) as f32)
}

/// Fake quantization plus the straight-through mask: `true` where the input
/// lies inside the representable range and the gradient passes unchanged.
pub fn fake_quantize_ste(x: &Tensor, qp: &QuantParams) -> (Tensor, Vec<bool>) {
    let (lo, hi) = qp.range();
    let mask = x
        .data()
        .iter()
        .map(|&v| {
            let v = f64::from(v);
            v >= lo && v <= hi
        })
        .collect();
    (fake_quantize(x, qp), mask)
}

/// Requantization multiplier `s_x * s_w / s_out`.
pub fn requant_multiplier(s_x: f64, s_w: f64, s_out: f64) -> f64 {
    s_x * s_w / s_out
}

/// Quantizes a float bias to int32 at scale `s_x * s_w` with zero point 0.
pub fn quantize_bias(bias: &[f32], s_x: f64, s_w: f64) -> Result<Vec<i32>> {
    let s = s_x * s_w;
    bias.iter()
        .enumerate()
        .map(|(i, &b)| {
            let q = (f64::from(b) / s).round_ties_even();
            if q.abs() > f64::from(i32::MAX) {
                Err(Error::AccumulatorOverflow { index: i })
            } else {
                Ok(q as i32)
            }
        })
        .collect()
}

/// Integer convolution: accumulates `(x_q - z_x)(w_q - z_w)` plus the int32
/// bias in a 32-bit accumulator, then requantizes to `qp_out` by the
/// multiplier `s_x s_w / s_out` (applied in double precision).
pub fn quantized_conv2d(
    x_q: &IntTensor,
    w_q: &IntTensor,
    bias_q: Option<&[i32]>,
    qp_out: &QuantParams,
    stride: usize,
    pad: usize,
) -> Result<IntTensor> {
    let (c, h, w) = match x_q.shape[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Shape(format!("input must be C x H x W, got {:?}", x_q.shape))),
    };
    let (o, wc, k) = match w_q.shape[..] {
        [o, wc, kh, kw] if kh == kw => (o, wc, kh),
        _ => return Err(Error::Shape(format!("weights must be O x C x K x K, got {:?}", w_q.shape))),
    };
    if wc != c {
        return Err(Error::Shape(format!("input has {c} channels but weights expect {wc}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let (qx, qw) = (&x_q.qparams, &w_q.qparams);
    if qx.bits != qw.bits || qx.bits != qp_out.bits {
        return Err(Error::PlanMismatch(format!(
            "bit widths differ: input {}, weights {}, output {}",
            qx.bits, qw.bits, qp_out.bits
        )));
    }
    if let Some(b) = bias_q {
        if b.len() != o {
            return Err(Error::PlanMismatch(format!("{} bias values for {o} output channels", b.len())));
        }
    }
    let (oh, ow) = match (conv_out_dim(h, k, stride, pad), conv_out_dim(w, k, stride, pad)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => return Err(Error::Shape("zero-sized output".into())),
    };
    let (zx, zw) = (qx.zero_point, qw.zero_point);
    let m = requant_multiplier(qx.scale, qw.scale, qp_out.scale);
    let zo = f64::from(qp_out.zero_point);
    let (lo, hi) = (f64::from(qp_out.qmin), f64::from(qp_out.qmax));
    let mut out = Vec::with_capacity(o * oh * ow);
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = out.len();
                let mut acc: i32 = bias_q.map_or(0, |b| b[oc]);
                for ic in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xv = x_q.data[(ic * h + iy as usize) * w + ix as usize] - zx;
                            let wv = w_q.data[((oc * c + ic) * k + ky) * k + kx] - zw;
                            acc = xv
                                .checked_mul(wv)
                                .and_then(|p| acc.checked_add(p))
                                .ok_or(Error::AccumulatorOverflow { index: idx })?;
                        }
                    }
                }
                let q = (f64::from(acc) * m + zo).round_ties_even().clamp(lo, hi);
                out.push(q as i32);
            }
        }
    }
    Ok(IntTensor {
        shape: vec![o, oh, ow],
        data: out,
        qparams: *qp_out,
    })
}

/// Rounds every element to the nearest binary16 value (ties to even) and
/// widens it back to `f32`.
pub fn to_half_precision(x: &Tensor) -> Result<Tensor> {
    let mut out = Vec::with_capacity(x.len());
    for (i, &v) in x.data().iter().enumerate() {
        let h = half::f16::from_f32(v);
        if h.is_infinite() && v.is_finite() {
            return Err(Error::HalfOverflow { index: i, value: v });
        }
        out.push(h.to_f32());
    }
    Tensor::new(x.shape().to_vec(), out)
}
