//! Dense row-major `f32` tensors and the small set of kernels the networks
//! are built from.
//!
//! Every kernel here is single-threaded and sums in a fixed order, so two
//! calls on identical inputs produce bit-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "dimensions must be positive, got {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    /// Interprets the tensor as `C x H x W`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected C x H x W, got {:?}", self.shape))),
        }
    }

    /// Interprets the tensor as `H x W`.
    pub fn hw(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::Shape(format!("expected H x W, got {:?}", self.shape))),
        }
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn scale(&self, k: f32) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn first_non_finite(&self) -> Option<(usize, f32)> {
        self.data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
            .map(|(i, &v)| (i, v))
    }
}

/// Output extent of a strided, padded window sweep.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output columns `o` for which `o * stride + k - pad` lands inside `[0, n)`.
#[inline]
fn valid_range(n: usize, out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad  and  o*stride + k < n + pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if n + pad > k {
        ((n + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// 2-D cross-correlation of a `C x H x W` input with `O x C x K x K` weights.
///
/// Each output element accumulates input channels, then kernel rows, then
/// kernel columns, starting from zero; the bias is added last.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (o, wc, kh, kw) = match weights.shape()[..] {
        [o, c, kh, kw] => (o, c, kh, kw),
        _ => {
            return Err(Error::Shape(format!(
                "weights must be O x C x K x K, got {:?}",
                weights.shape()
            )))
        }
    };
    if kh != kw {
        return Err(Error::Shape(format!("kernel must be square, got {kh}x{kw}")));
    }
    if wc != c {
        return Err(Error::Shape(format!(
            "input has {c} channels but weights expect {wc}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::Shape(format!(
                "bias must have shape [{o}], got {:?}",
                b.shape()
            )));
        }
    }
    let (oh, ow) = match (
        conv_out_dim(h, kh, stride, pad),
        conv_out_dim(w, kw, stride, pad),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "zero-sized output for {h}x{w} input, kernel {kh}, stride {stride}, pad {pad}"
            )))
        }
    };
    let k = kh;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0f32; o * oh * ow];
    let col_ranges: Vec<(usize, usize)> = (0..k).map(|kx| valid_range(w, ow, stride, kx, pad)).collect();
    for oc in 0..o {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (ylo, yhi) = valid_range(h, oh, stride, ky, pad);
                for kx in 0..k {
                    let wv = wt[((oc * c + ic) * k + ky) * k + kx];
                    let (xlo, xhi) = col_ranges[kx];
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - pad;
                        let row = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let base = kx as isize - pad as isize;
                            for ox in xlo..xhi {
                                orow[ox] += wv * row[(ox as isize + base) as usize];
                            }
                        } else {
                            for ox in xlo..xhi {
                                orow[ox] += wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bv = b.data()[oc];
            for v in plane.iter_mut() {
                *v += bv;
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to its input and weights.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (c, h, w) = input.chw().expect("conv input");
    let (o, oh, ow) = grad_out.chw().expect("conv grad");
    let k = weights.shape()[2];
    let x = input.data();
    let wt = weights.data();
    let g = grad_out.data();
    let mut gw = vec![0.0f32; wt.len()];
    let mut gx = if need_input_grad {
        Some(vec![0.0f32; x.len()])
    } else {
        None
    };
    let mut gb = vec![0.0f32; o];
    let col_ranges: Vec<(usize, usize)> = (0..k).map(|kx| valid_range(w, ow, stride, kx, pad)).collect();
    for oc in 0..o {
        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
        gb[oc] = gplane.iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
        for ic in 0..c {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (ylo, yhi) = valid_range(h, oh, stride, ky, pad);
                for kx in 0..k {
                    let widx = ((oc * c + ic) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let (xlo, xhi) = col_ranges[kx];
                    let mut acc = 0.0f64;
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let row = &xin[iy * w..(iy + 1) * w];
                        for ox in xlo..xhi {
                            acc += f64::from(grow[ox]) * f64::from(row[ox * stride + kx - pad]);
                        }
                        if let Some(gx) = gx.as_mut() {
                            let gxrow = &mut gx[ic * h * w + iy * w..ic * h * w + (iy + 1) * w];
                            for ox in xlo..xhi {
                                gxrow[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                    gw[widx] += acc as f32;
                }
            }
        }
    }
    (
        gx.map(|d| Tensor::new(vec![c, h, w], d).expect("shape")),
        Tensor::new(weights.shape().to_vec(), gw).expect("shape"),
        Tensor::new(vec![o], gb).expect("shape"),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Max pooling over `k x k` windows without padding. Returns the pooled
/// tensor and, for each output element, the flat index of the winning input
/// (first maximum in row-major window order).
pub fn maxpool2d(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = match (conv_out_dim(h, k, stride, 0), conv_out_dim(w, k, stride, 0)) {
        (Some(a), Some(b)) if k > 0 => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "maxpool k={k} stride={stride} does not fit {h}x{w}"
            )))
        }
    };
    let d = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
                        if d[i] > best {
                            best = d[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    t: f32,
}

/// Half-pixel-centre source coordinates for resampling `n_in` samples to `n_out`.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            Tap {
                i0,
                i1,
                t: (src - i0 as f64) as f32,
            }
        })
        .collect()
}

fn upsample_plane(src: &[f32], h: usize, w: usize, rows: &[Tap], cols: &[Tap], dst: &mut [f32]) {
    let ow = cols.len();
    for (oy, r) in rows.iter().enumerate() {
        for (ox, cl) in cols.iter().enumerate() {
            let a = src[r.i0 * w + cl.i0];
            let b = src[r.i0 * w + cl.i1];
            let c = src[r.i1 * w + cl.i0];
            let d = src[r.i1 * w + cl.i1];
            let top = a + (b - a) * cl.t;
            let bot = c + (d - c) * cl.t;
            dst[oy * ow + ox] = top + (bot - top) * r.t;
        }
    }
    debug_assert!(rows.iter().all(|r| r.i1 < h));
}

/// Bilinear resampling of an `H x W` map with the half-pixel-centre
/// convention (edge samples clamp).
pub fn bilinear_upsample(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = map.hw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "target size {out_h}x{out_w} has a zero dimension"
        )));
    }
    if out_h < h || out_w < w {
        return Err(Error::InvalidArgument(format!(
            "target size {out_h}x{out_w} is smaller than {h}x{w}"
        )));
    }
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let mut out = vec![0.0; out_h * out_w];
    upsample_plane(map.data(), h, w, &rows, &cols, &mut out);
    Tensor::new(vec![out_h, out_w], out)
}

/// Per-channel bilinear upsampling of a `C x H x W` tensor to `C x H' x W'`.
pub fn upsample_channels(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if out_h < h || out_w < w || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        upsample_plane(
            &x.data()[ch * h * w..(ch + 1) * h * w],
            h,
            w,
            &rows,
            &cols,
            &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w],
        );
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Adjoint of [`upsample_channels`].
pub(crate) fn upsample_channels_backward(grad_out: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, oh, ow) = grad_out.chw().expect("upsample grad");
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let g = grad_out.data();
    let mut gx = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let gp = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, r) in rows.iter().enumerate() {
            for (ox, cl) in cols.iter().enumerate() {
                let go = gp[oy * ow + ox];
                let top = go * (1.0 - r.t);
                let bot = go * r.t;
                dst[r.i0 * w + cl.i0] += top * (1.0 - cl.t);
                dst[r.i0 * w + cl.i1] += top * cl.t;
                dst[r.i1 * w + cl.i0] += bot * (1.0 - cl.t);
                dst[r.i1 * w + cl.i1] += bot * cl.t;
            }
        }
    }
    Tensor::new(vec![c, h, w], gx).expect("shape")
}

/// Divides the channel vector at every spatial position by `max(norm, eps)`.
pub fn l2_normalize_channels(fmap: &Tensor, eps: f32) -> Result<Tensor> {
    let (c, h, w) = fmap.chw()?;
    let norms = channel_norms(fmap);
    let d = fmap.data();
    let hw = h * w;
    let mut out = vec![0.0f32; d.len()];
    for p in 0..hw {
        let inv = 1.0 / norms[p].max(eps);
        for ch in 0..c {
            out[ch * hw + p] = d[ch * hw + p] * inv;
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Euclidean norm of the channel vector at each of the `H * W` positions.
pub(crate) fn channel_norms(fmap: &Tensor) -> Vec<f32> {
    let (c, h, w) = fmap.chw().expect("C x H x W");
    let hw = h * w;
    let d = fmap.data();
    let mut sq = vec![0.0f32; hw];
    for ch in 0..c {
        for p in 0..hw {
            let v = d[ch * hw + p];
            sq[p] += v * v;
        }
    }
    sq.into_iter().map(f32::sqrt).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_conv() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::new(vec![1, 2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.0, -0.25]).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, None, 1, 0), Err(Error::Shape(_))));
        let k = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(matches!(conv2d(&x, &k, None, 1, 0), Err(Error::Shape(_))));
        let k = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d(&x, &k, None, 0, 0).is_err());
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn normalize_345() {
        let x = Tensor::new(vec![2, 1, 1], vec![3.0, 4.0]).unwrap();
        let n = l2_normalize_channels(&x, 1e-12).unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-7);
        assert!((n.data()[1] - 0.8).abs() < 1e-7);
        let z = l2_normalize_channels(&Tensor::zeros(&[3, 1, 1]), 1e-12).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_constant_and_identity() {
        let c = Tensor::full(&[3, 5], 7.0);
        let u = bilinear_upsample(&c, 11, 17).unwrap();
        assert!(u.data().iter().all(|&v| v == 7.0));
        let m = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(bilinear_upsample(&m, 2, 3).unwrap(), m);
        assert!(bilinear_upsample(&m, 0, 3).is_err());
    }

    #[test]
    fn upsample_monotone_rows() {
        let m = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let u = bilinear_upsample(&m, 2, 4).unwrap();
        for row in u.data().chunks(4) {
            assert!(row.windows(2).all(|p| p[0] <= p[1]), "{row:?}");
        }
        assert_eq!(u.data()[..4], [0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn maxpool_picks_max() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, -1.0, 2.0]).unwrap();
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        // <U x, g> == <x, U^T g>
        let x = Tensor::new(vec![2, 2, 3], (0..12).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let g = Tensor::new(vec![2, 5, 7], (0..70).map(|i| (i as f32 * 0.11).cos()).collect()).unwrap();
        let ux = upsample_channels(&x, 5, 7).unwrap();
        let utg = upsample_channels_backward(&g, 2, 3);
        let lhs: f64 = ux.data().iter().zip(g.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.data().iter().zip(utg.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
