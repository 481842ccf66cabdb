//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls the routine it checks.

#![allow(dead_code)]

use std::time::Instant;

use dq_core::autograd::{loss_gradients, Sample};
use dq_core::calib::{entropy_calibrate, l2_calibrate, RunningHistogram};
use dq_core::distill::LossSpec;
use dq_core::metrics::auroc;
use dq_core::model::{conv, FeaturePyramid, Layer, ModelDef, Network};
use dq_core::quant::{
    compute_qparams, dequantize, fake_quantize, quantize_bias, quantized_conv2d, IntTensor, QuantMode, QuantParams,
};
use dq_core::tensor::{conv2d, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

const TIE_TOL: f64 = 1e-12;

/// Narrowest, then lowest, window among those scoring within tolerance of the best.
fn pick(cands: &[(usize, usize, f64)]) -> (usize, usize) {
    let best = cands.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    let limit = best + TIE_TOL * best.abs() + TIE_TOL;
    let c = cands
        .iter()
        .filter(|c| c.2 <= limit)
        .min_by_key(|c| (c.1 - c.0, c.0))
        .expect("candidates");
    (c.0, c.1)
}

fn populated(counts: &[u64]) -> (usize, usize) {
    let first = counts.iter().position(|&c| c > 0).expect("non-empty");
    let last = counts.iter().rposition(|&c| c > 0).expect("non-empty");
    (first, last)
}

/// KL(P || Q) for the window `[lo, hi)` with `levels` quantization levels,
/// computed directly from normalized distributions.
pub fn kl_window(counts: &[u64], lo: usize, hi: usize, levels: usize) -> f64 {
    let n = hi - lo;
    let below: u64 = counts[..lo].iter().sum();
    let above: u64 = counts[hi..].iter().sum();
    let mut p: Vec<f64> = counts[lo..hi].iter().map(|&c| c as f64).collect();
    p[0] += below as f64;
    p[n - 1] += above as f64;
    let mut q = vec![0.0f64; n];
    for j in 0..levels {
        let (s, e) = (j * n / levels, (j + 1) * n / levels);
        if s == e {
            continue;
        }
        let mass: f64 = counts[lo + s..lo + e].iter().map(|&c| c as f64).sum();
        let nz = (s..e).filter(|&i| p[i] > 0.0).count();
        for i in s..e {
            if p[i] > 0.0 {
                q[i] = mass / nz as f64;
            }
        }
    }
    let (ps, qs): (f64, f64) = (p.iter().sum(), q.iter().sum());
    let mut kl = 0.0;
    for i in 0..n {
        if p[i] > 0.0 {
            if q[i] == 0.0 {
                return f64::INFINITY;
            }
            let (a, b) = (p[i] / ps, q[i] / qs);
            kl += a * (a / b).ln();
        }
    }
    kl.max(0.0)
}

/// Exhaustive KL threshold search: every window of width at least `2^bits`
/// inside the populated span.
pub fn brute_entropy(counts: &[u64], bits: u8) -> (usize, usize) {
    let levels = 1usize << bits;
    let (first, last) = populated(counts);
    if counts.iter().filter(|&&c| c > 0).count() <= levels {
        return (first, last + 1);
    }
    let mut cands = Vec::new();
    for lo in first..=last {
        for hi in lo + 1..=last + 1 {
            if hi - lo >= levels {
                cands.push((lo, hi, kl_window(counts, lo, hi, levels)));
            }
        }
    }
    pick(&cands)
}

/// Count-weighted mean squared error, in squared bin widths, of quantizing
/// every bin center with the grid spanned by the window edges.
pub fn l2_window(h: &RunningHistogram, lo: usize, hi: usize, bits: u8) -> f64 {
    let qp = compute_qparams(h.edge(lo), h.edge(hi), bits, QuantMode::AffineUnsigned).expect("valid window");
    let w = h.bin_width();
    let mut err = 0.0;
    for (i, &c) in h.counts().iter().enumerate() {
        if c > 0 {
            let x = h.center(i);
            let d = (x - qp.dequantize_value(qp.quantize_value(x))) / w;
            err += c as f64 * d * d;
        }
    }
    err / h.total_count() as f64
}

pub fn brute_l2(h: &RunningHistogram, bits: u8) -> (usize, usize) {
    let (first, last) = populated(h.counts());
    let mut cands = Vec::new();
    for lo in first..=last {
        for hi in lo + 1..=last + 1 {
            cands.push((lo, hi, l2_window(h, lo, hi, bits)));
        }
    }
    pick(&cands)
}

/// Window edges clipped to the observed range, unless clipping empties it.
pub fn clipped(h: &RunningHistogram, (lo, hi): (usize, usize)) -> (f64, f64) {
    let (a, b) = (h.edge(lo), h.edge(hi));
    let (ca, cb) = (a.max(h.running_min()), b.min(h.running_max()));
    if ca < cb {
        (ca, cb)
    } else {
        (a, b)
    }
}

/// A random histogram of at most 64 bins: sparse or dense bodies, gaps and
/// occasional far tails, over a range that may or may not contain zero.
pub fn random_histogram(rng: &mut ChaCha8Rng) -> RunningHistogram {
    let bins = 2 * rng.random_range(1..=32usize);
    let mut counts = vec![0u64; bins];
    let centre = rng.random_range(0.0..bins as f64);
    let spread = rng.random_range(0.5..bins as f64);
    let fill = rng.random_range(0.2..1.0);
    for (i, c) in counts.iter_mut().enumerate() {
        if rng.random_bool(fill) {
            let d = (i as f64 - centre) / spread;
            *c = (rng.random_range(1.0..1000.0) * (-d * d).exp()).round() as u64;
        }
    }
    if rng.random_bool(0.3) {
        let i = rng.random_range(0..bins);
        counts[i] += rng.random_range(1..5);
    }
    if counts.iter().all(|&c| c == 0) {
        counts[rng.random_range(0..bins)] = rng.random_range(1..100);
    }
    let width = rng.random_range(0.01..2.0);
    let lower = match rng.random_range(0..3) {
        0 => rng.random_range(0.0..3.0),
        1 => -width * bins as f64 - rng.random_range(0.0..3.0),
        _ => -width * rng.random_range(0..=bins) as f64,
    };
    RunningHistogram::from_counts(lower, width, counts).expect("valid histogram")
}

/// 63 equal bins followed by a single light outlier bin.
pub fn outlier_histogram() -> RunningHistogram {
    let mut c = vec![100u64; 63];
    c.push(1);
    RunningHistogram::from_counts(0.0, 1.0, c).expect("valid histogram")
}

pub fn check_calibration(n: usize, seed: u64) -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(RunningHistogram, u8)> = vec![(outlier_histogram(), 2)];
    while cases.len() < n + 1 {
        let bits = [2u8, 2, 3, 3, 4, 5, 8][rng.random_range(0..7)];
        cases.push((random_histogram(&mut rng), bits));
    }
    for (k, (h, bits)) in cases.iter().enumerate() {
        let want = clipped(h, brute_entropy(h.counts(), *bits));
        let got = entropy_calibrate(h, *bits).map_err(|e| format!("case {k}: entropy failed: {e}"))?;
        if got != want {
            return Err(format!("case {k} (b={bits}): entropy {got:?} vs brute force {want:?}"));
        }
        let want = clipped(h, brute_l2(h, *bits));
        let got = l2_calibrate(h, *bits).map_err(|e| format!("case {k}: l2 failed: {e}"))?;
        if got != want {
            return Err(format!("case {k} (b={bits}): l2 {got:?} vs brute force {want:?}"));
        }
    }
    let (_, beta) = entropy_calibrate(&cases[0].0, 2).map_err(|e| e.to_string())?;
    if beta > 63.0 {
        return Err(format!("outlier bin kept: beta = {beta}"));
    }
    Ok(format!("{} histograms in {:.2?}", cases.len(), t0.elapsed()))
}

pub fn random_qparams(rng: &mut ChaCha8Rng) -> (QuantParams, f64, f64) {
    let bits = rng.random_range(2..=8u8);
    let a = rng.random_range(-50.0..50.0);
    let b = a + rng.random_range(1e-3..100.0);
    let mode = if rng.random_bool(0.5) {
        QuantMode::AffineUnsigned
    } else {
        QuantMode::SymmetricSigned
    };
    (compute_qparams(a, b, bits, mode).expect("valid range"), a, b)
}

pub fn check_round_trip(n: usize, seed: u64) -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n {
        let (qp, a, b) = random_qparams(&mut rng);
        // One ulp of slack for the representable midpoint.
        let bound = qp.scale / 2.0 * (1.0 + 1e-12);
        for i in 0..=10_000 {
            let x = a + (b - a) * f64::from(i) / 10_000.0;
            let q = qp.quantize_value(x);
            if !(qp.qmin..=qp.qmax).contains(&q) {
                return Err(format!("params {k}: code {q} out of range"));
            }
            let y = qp.dequantize_value(q);
            if (x - y).abs() > bound {
                return Err(format!("params {k} {qp:?}: |{x} - {y}| > s/2"));
            }
        }
        let grid: Vec<f32> = (0..=10_000).map(|i| (a + (b - a) * f64::from(i) / 10_000.0) as f32).collect();
        let t = Tensor::new(vec![grid.len()], grid).expect("tensor");
        let once = fake_quantize(&t, &qp);
        if fake_quantize(&once, &qp) != once {
            return Err(format!("params {k}: fake_quantize not idempotent"));
        }
    }
    Ok(format!("{n} parameter sets in {:.2?}", t0.elapsed()))
}

/// Direct `f64` cross-correlation of `C x H x W` input with `O x C x K x K` weights.
pub fn naive_conv(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    wt: &[f64],
    (o, k): (usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += x[(ic * h + iy as usize) * w + ix as usize] * wt[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = s + bias.map_or(0.0, |b| b[oc]);
            }
        }
    }
    (out, oh, ow)
}

/// Random small conv geometry: `(c, h, w, o, k, stride, pad)` with every dim ≤ 8.
fn conv_geometry(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize, usize) {
    let k = rng.random_range(1..=3usize);
    let pad = rng.random_range(0..k);
    let h = rng.random_range(k.max(1)..=8);
    let w = rng.random_range(k.max(1)..=8);
    (
        rng.random_range(1..=8),
        h,
        w,
        rng.random_range(1..=8),
        k,
        rng.random_range(1..=2),
        pad,
    )
}

pub fn check_float_conv(n: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..n {
        let (c, h, w, o, k, stride, pad) = conv_geometry(&mut rng);
        let x: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let wt: Vec<f32> = (0..o * c * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = conv2d(
            &Tensor::new(vec![c, h, w], x.clone()).unwrap(),
            &Tensor::new(vec![o, c, k, k], wt.clone()).unwrap(),
            Some(&Tensor::new(vec![o], b.clone()).unwrap()),
            stride,
            pad,
        )
        .map_err(|e| format!("case {case}: {e}"))?;
        let f = |v: &[f32]| v.iter().map(|&a| f64::from(a)).collect::<Vec<_>>();
        let (want, oh, ow) = naive_conv(&f(&x), (c, h, w), &f(&wt), (o, k), Some(&f(&b)), stride, pad);
        if got.shape() != [o, oh, ow] {
            return Err(format!("case {case}: shape {:?} vs [{o}, {oh}, {ow}]", got.shape()));
        }
        for (g, r) in got.data().iter().zip(&want) {
            let err = (f64::from(*g) - r).abs() / r.abs().max(1.0);
            worst = worst.max(err);
            if err > 1e-5 {
                return Err(format!("case {case}: {g} vs {r}"));
            }
        }
    }
    Ok(format!("{n} shapes, worst scaled error {worst:.1e}"))
}

pub fn check_int_conv(n: usize, seed: u64) -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut elements = 0usize;
    for case in 0..n {
        let (c, h, w, o, k, stride, pad) = conv_geometry(&mut rng);
        let xa = rng.random_range(-3.0..0.5);
        let qx = compute_qparams(xa, xa + rng.random_range(0.5..6.0), 8, QuantMode::AffineUnsigned).unwrap();
        let qw = compute_qparams(-1.0, rng.random_range(0.05..2.0), 8, QuantMode::SymmetricSigned).unwrap();
        let oa = rng.random_range(-20.0..0.0);
        let qo = compute_qparams(oa, oa + rng.random_range(1.0..40.0), 8, QuantMode::AffineUnsigned).unwrap();
        let xq: Vec<i32> = (0..c * h * w).map(|_| rng.random_range(0..=255)).collect();
        let wq: Vec<i32> = (0..o * c * k * k).map(|_| rng.random_range(-127..=127)).collect();
        let bias: Option<Vec<f32>> = rng
            .random_bool(0.7)
            .then(|| (0..o).map(|_| rng.random_range(-2.0..2.0)).collect());
        let bq = bias
            .as_ref()
            .map(|b| quantize_bias(b, qx.scale, qw.scale))
            .transpose()
            .map_err(|e| e.to_string())?;
        let x_t = IntTensor::new(vec![c, h, w], xq, qx).unwrap();
        let w_t = IntTensor::new(vec![o, c, k, k], wq, qw).unwrap();
        let got = quantized_conv2d(&x_t, &w_t, bq.as_deref(), &qo, stride, pad)
            .map_err(|e| format!("case {case}: {e}"))?;
        let got = dequantize(&got);

        let xd: Vec<f64> = x_t.data().iter().map(|&q| qx.dequantize_value(q)).collect();
        let wd: Vec<f64> = w_t.data().iter().map(|&q| qw.dequantize_value(q)).collect();
        let bd: Option<Vec<f64>> = bq
            .as_ref()
            .map(|b| b.iter().map(|&q| f64::from(q) * qx.scale * qw.scale).collect());
        let (sim, _, _) = naive_conv(&xd, (c, h, w), &wd, (o, k), bd.as_deref(), stride, pad);
        for (i, (g, s)) in got.data().iter().zip(&sim).enumerate() {
            let want = qo.dequantize_value(qo.quantize_value(*s)) as f32;
            if *g != want {
                return Err(format!("case {case} element {i}: integer path {g} vs simulation {want}"));
            }
        }
        elements += sim.len();
    }
    Ok(format!("{n} convolutions, {elements} outputs in {:.2?}", t0.elapsed()))
}

/// Pairwise Mann-Whitney AUROC, ties counting one half.
pub fn pairwise_auroc(scores: &[f32], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

pub fn check_auroc(n: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..n {
        let len = rng.random_range(2..=200usize);
        let mut labels: Vec<u8> = (0..len).map(|_| u8::from(rng.random_bool(0.4))).collect();
        labels[0] = 0;
        labels[1] = 1;
        let levels = [3.0f32, 20.0, 1e6][rng.random_range(0..3)];
        let scores: Vec<f32> = labels
            .iter()
            .map(|&l| ((rng.random_range(0.0..1.0f32) + 0.3 * f32::from(l)) * levels).round() / levels)
            .collect();
        let got = auroc(&scores, &labels).map_err(|e| format!("case {case}: {e}"))?;
        let want = pairwise_auroc(&scores, &labels);
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 1e-9 {
            return Err(format!("case {case}: rank {got} vs pairwise {want}"));
        }
    }
    Ok(format!("{n} instances, worst difference {worst:.1e}"))
}

/// Conv/ReLU stack evaluated in `f64`, returning the tapped maps and the
/// sign pattern of every ReLU input.
fn forward_f64(def: &ModelDef, params: &[Vec<f64>], input: &[f64], shape: [usize; 3]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut x = input.to_vec();
    let [mut c, mut h, mut w] = shape;
    let mut p = 0;
    let (mut taps, mut signs) = (Vec::new(), Vec::new());
    for (i, layer) in def.layers.iter().enumerate() {
        match layer {
            Layer::Conv(s) => {
                let bias = s.has_bias.then(|| params[p + 1].as_slice());
                let (y, oh, ow) = naive_conv(&x, (c, h, w), &params[p], (s.out_ch, s.k), bias, s.stride, s.pad);
                p += 1 + usize::from(s.has_bias);
                x = y;
                (c, h, w) = (s.out_ch, oh, ow);
            }
            Layer::Relu => {
                signs.extend(x.iter().map(|&v| v > 0.0));
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            other => panic!("toy oracle has no {}", other.kind()),
        }
        if def.tap_points.contains(&i) {
            taps.push(x.clone());
        }
    }
    (taps, signs)
}

/// Per-position loss term of `(teacher, student)` channel vectors.
fn term(spec: LossSpec, t: &[f64], s: &[f64]) -> f64 {
    let eps = f64::from(dq_core::distill::NORM_EPS);
    let nrm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
    match spec {
        LossSpec::Stfpm => {
            let (nt, ns) = (nrm(t), nrm(s));
            0.5 * t.iter().zip(s).map(|(a, b)| (a / nt - b / ns).powi(2)).sum::<f64>()
        }
        LossSpec::RdCosine => {
            let dot: f64 = t.iter().zip(s).map(|(a, b)| a * b).sum();
            1.0 - dot / (nrm(t) * nrm(s))
        }
        LossSpec::UsRegression => t.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum(),
    }
}

fn pyramid_loss(spec: LossSpec, target: &FeaturePyramid, taps: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (tm, sm) in target.maps.iter().zip(taps) {
        let (c, h, w) = tm.chw().expect("chw");
        let hw = h * w;
        let mut layer = 0.0;
        for p in 0..hw {
            let tv: Vec<f64> = (0..c).map(|ch| f64::from(tm.data()[ch * hw + p])).collect();
            let sv: Vec<f64> = (0..c).map(|ch| sm[ch * hw + p]).collect();
            layer += term(spec, &tv, &sv);
        }
        total += layer / hw as f64;
    }
    total
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

fn toy_net() -> ModelDef {
    ModelDef::new(
        vec![
            conv(1, 3, 3, 1, 1),
            Layer::Relu,
            conv(3, 4, 3, 2, 1),
            Layer::Relu,
            conv(4, 3, 3, 1, 1),
        ],
        vec![1, 3, 4],
    )
    .expect("toy net")
}

/// Toy network with non-zero biases, two inputs and random teacher maps.
fn toy_problem(seed: u64) -> (Network, Vec<Sample>) {
    let def = toy_net();
    let mut net = Network::init(def.clone(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in net.params.iter_mut().filter(|p| p.shape().len() == 1) {
        p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    let shapes = def.layer_shapes([1, 6, 6]).expect("shapes");
    let samples = (0..2)
        .map(|_| {
            let input = Tensor::new(vec![1, 6, 6], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let maps = def
                .tap_points
                .iter()
                .map(|&l| {
                    let s = shapes[l];
                    Tensor::new(s.to_vec(), (0..s.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())
                        .unwrap()
                })
                .collect();
            Sample {
                input,
                target: FeaturePyramid { maps },
            }
        })
        .collect();
    (net, samples)
}

fn oracle_loss(spec: LossSpec, def: &ModelDef, params: &[Vec<f64>], batch: &[Sample]) -> (f64, Vec<bool>) {
    let mut loss = 0.0;
    let mut signs = Vec::new();
    for s in batch {
        let x: Vec<f64> = s.input.data().iter().map(|&v| f64::from(v)).collect();
        let (taps, sg) = forward_f64(def, params, &x, [1, 6, 6]);
        loss += pyramid_loss(spec, &s.target, &taps);
        signs.extend(sg);
    }
    (loss / batch.len() as f64, signs)
}

/// Seed of the toy network, inputs and teacher maps.
pub const TOY_SEED: u64 = 1;

/// Central differences of the `f64` oracle loss against the analytic
/// gradients, for every scalar parameter. Finite differences are undefined
/// across a ReLU kink, so a sign change within `±h` is reported as an error.
pub fn check_gradients(spec: LossSpec) -> Check {
    let t0 = Instant::now();
    let (net, batch) = toy_problem(TOY_SEED);
    let params: Vec<Vec<f64>> = net.params.iter().map(|t| t.data().iter().map(|&v| f64::from(v)).collect()).collect();
    let (_, base_signs) = oracle_loss(spec, &net.def, &params, &batch);
    let (_, grads) = loss_gradients(&net, spec, &batch).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut count = 0;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let mut plus = params.clone();
            plus[pi][j] += FD_STEP;
            let mut minus = params.clone();
            minus[pi][j] -= FD_STEP;
            let (lp, sp) = oracle_loss(spec, &net.def, &plus, &batch);
            let (lm, sm) = oracle_loss(spec, &net.def, &minus, &batch);
            if sp != base_signs || sm != base_signs {
                return Err(format!("{spec:?}: param {pi}[{j}] crosses a ReLU kink within ±h"));
            }
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let analytic = f64::from(grads.tensors[pi].data()[j]);
            let denom = analytic.abs().max(numeric.abs());
            let rel = if denom == 0.0 { 0.0 } else { (analytic - numeric).abs() / denom };
            if rel >= FD_TOL {
                return Err(format!(
                    "{spec:?} param {pi}[{j}]: analytic {analytic:e} vs numeric {numeric:e} (rel {rel:.2e})"
                ));
            }
            worst = worst.max(rel);
            count += 1;
        }
    }
    Ok(format!("{spec:?}: {count} parameters, worst relative error {worst:.2e} in {:.2?}", t0.elapsed()))
}
