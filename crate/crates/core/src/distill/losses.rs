//! Distillation losses, their gradients with respect to the student
//! features, and anomaly-map construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeaturePyramid;
use crate::tensor::{self, Tensor};

/// Guard for channel normalization of (near-)zero feature vectors.
pub const NORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossSpec {
    Stfpm,
    RdCosine,
    UsRegression,
}

/// Per-layer map combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Sum,
    Prod,
}

impl std::str::FromStr for Combine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Combine::Sum),
            "prod" => Ok(Combine::Prod),
            _ => Err(Error::InvalidArgument(format!("unknown combine mode {s:?}"))),
        }
    }
}

/// Non-negative per-pixel anomaly scores, `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub scores: Tensor,
}

impl AnomalyMap {
    pub fn new(scores: Tensor) -> Result<Self> {
        scores.hw()?;
        if let Some((i, v)) = scores.data().iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::NonFinite {
                index: i,
                value: f64::from(*v),
            });
        }
        Ok(Self { scores })
    }
}

fn check_pair(t: &FeaturePyramid, s: &FeaturePyramid) -> Result<()> {
    if t.len() != s.len() {
        return Err(Error::Shape(format!(
            "teacher pyramid has {} layers, student {}",
            t.len(),
            s.len()
        )));
    }
    for (l, (a, b)) in t.maps.iter().zip(&s.maps).enumerate() {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "layer {l}: teacher map {:?} vs student map {:?}",
                a.shape(),
                b.shape()
            )));
        }
        a.chw()?;
    }
    Ok(())
}

/// Iterates positions of a `C x H x W` pair, handing the channel vectors
/// (strided by `H * W`) to `f`.
fn per_position(t: &Tensor, s: &Tensor, mut f: impl FnMut(usize, &[f32], &[f32])) {
    let (c, h, w) = t.chw().expect("checked");
    let hw = h * w;
    let mut tv = vec![0.0; c];
    let mut sv = vec![0.0; c];
    for p in 0..hw {
        for ch in 0..c {
            tv[ch] = t.data()[ch * hw + p];
            sv[ch] = s.data()[ch * hw + p];
        }
        f(p, &tv, &sv);
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// `1 - <t, s> / (max(|t|, eps) max(|s|, eps))` and its gradient in `s`.
fn cosine_term(t: &[f32], s: &[f32], grad: Option<&mut [f64]>) -> f64 {
    let eps = f64::from(NORM_EPS);
    let (nt, ns) = (norm(t).max(eps), norm(s).max(eps));
    let dot: f64 = t.iter().zip(s).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
    let cos = dot / (nt * ns);
    if let Some(g) = grad {
        let raw_ns = norm(s);
        for ((gi, &ti), &si) in g.iter_mut().zip(t).zip(s) {
            let (ti, si) = (f64::from(ti), f64::from(si));
            *gi = if raw_ns > eps {
                (-ti / nt + si / ns * cos) / ns
            } else {
                -ti / (nt * eps)
            };
        }
    }
    1.0 - cos
}

/// `½ |t/max(|t|,eps) - s/max(|s|,eps)|²` and its gradient in `s`.
fn normalized_sq_term(t: &[f32], s: &[f32], grad: Option<&mut [f64]>) -> f64 {
    let eps = f64::from(NORM_EPS);
    let (nt, ns) = (norm(t).max(eps), norm(s).max(eps));
    let (mut val, mut dot, mut bb) = (0.0, 0.0, 0.0);
    for (&ti, &si) in t.iter().zip(s) {
        let (a, b) = (f64::from(ti) / nt, f64::from(si) / ns);
        val += 0.5 * (a - b) * (a - b);
        dot += a * b;
        bb += b * b;
    }
    if let Some(g) = grad {
        let inside = norm(s) > eps;
        for ((gi, &ti), &si) in g.iter_mut().zip(t).zip(s) {
            let (a, b) = (f64::from(ti) / nt, f64::from(si) / ns);
            // Below eps the normalization is a constant division.
            *gi = if inside {
                ((b - a) - b * (bb - dot)) / ns
            } else {
                (b - a) / eps
            };
        }
    }
    val
}

fn pyramid_loss(
    t: &FeaturePyramid,
    s: &FeaturePyramid,
    want_grad: bool,
    term: fn(&[f32], &[f32], Option<&mut [f64]>) -> f64,
) -> Result<(f64, Vec<Tensor>)> {
    check_pair(t, s)?;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (tm, sm) in t.maps.iter().zip(&s.maps) {
        let (c, h, w) = tm.chw()?;
        let hw = h * w;
        let mut layer = 0.0;
        let mut g = if want_grad { vec![0.0f32; c * hw] } else { Vec::new() };
        let mut gv = vec![0.0f64; c];
        per_position(tm, sm, |p, tv, sv| {
            layer += term(tv, sv, want_grad.then_some(&mut gv[..]));
            if want_grad {
                for ch in 0..c {
                    g[ch * hw + p] = (gv[ch] / hw as f64) as f32;
                }
            }
        });
        total += layer / hw as f64;
        if want_grad {
            grads.push(Tensor::new(vec![c, h, w], g)?);
        }
    }
    Ok((total, grads))
}

/// Sum over layers of the mean, over positions, of half the squared
/// distance between channel-normalized teacher and student vectors.
pub fn stfpm_loss(t: &FeaturePyramid, s: &FeaturePyramid) -> Result<f64> {
    pyramid_loss(t, s, false, normalized_sq_term).map(|r| r.0)
}

/// Sum over layers of the mean, over positions, of `1 - cos(t, s)`.
pub fn rd_cosine_loss(t: &FeaturePyramid, s: &FeaturePyramid) -> Result<f64> {
    pyramid_loss(t, s, false, cosine_term).map(|r| r.0)
}

fn sq_term(t: &[f32], s: &[f32], grad: Option<&mut [f64]>) -> f64 {
    let mut v = 0.0;
    if let Some(g) = grad {
        for ((gi, &ti), &si) in g.iter_mut().zip(t).zip(s) {
            let d = f64::from(si) - f64::from(ti);
            *gi = 2.0 * d;
            v += d * d;
        }
    } else {
        for (&ti, &si) in t.iter().zip(s) {
            let d = f64::from(si) - f64::from(ti);
            v += d * d;
        }
    }
    v
}

/// Sum over layers of the mean, over positions, of `|s - t|²`.
pub fn us_regression_loss(t: &FeaturePyramid, s: &FeaturePyramid) -> Result<f64> {
    pyramid_loss(t, s, false, sq_term).map(|r| r.0)
}

/// Loss value and its gradient with respect to every student tap.
pub fn loss_and_grad(spec: LossSpec, t: &FeaturePyramid, s: &FeaturePyramid) -> Result<(f64, Vec<Tensor>)> {
    match spec {
        LossSpec::Stfpm => pyramid_loss(t, s, true, normalized_sq_term),
        LossSpec::RdCosine => pyramid_loss(t, s, true, cosine_term),
        LossSpec::UsRegression => pyramid_loss(t, s, true, sq_term),
    }
}

/// Per-position `½ |n(t) - n(s)|²` of one layer, as an `H x W` map.
pub fn layer_distance_map(t: &Tensor, s: &Tensor) -> Result<Tensor> {
    if t.shape() != s.shape() {
        return Err(Error::Shape(format!("teacher map {:?} vs student map {:?}", t.shape(), s.shape())));
    }
    let (_, h, w) = t.chw()?;
    let mut out = vec![0.0f32; h * w];
    per_position(t, s, |p, tv, sv| out[p] = normalized_sq_term(tv, sv, None) as f32);
    Tensor::new(vec![h, w], out)
}

/// Per-layer distance maps upsampled to `out_size` and combined.
pub fn anomaly_map(
    t: &FeaturePyramid,
    s: &FeaturePyramid,
    out_size: (usize, usize),
    combine: Combine,
) -> Result<AnomalyMap> {
    check_pair(t, s)?;
    let (oh, ow) = out_size;
    let mut acc: Option<Tensor> = None;
    for (tm, sm) in t.maps.iter().zip(&s.maps) {
        let m = tensor::bilinear_upsample(&layer_distance_map(tm, sm)?, oh, ow)?;
        acc = Some(match acc {
            None => m,
            Some(mut a) => {
                for (x, y) in a.data_mut().iter_mut().zip(m.data()) {
                    match combine {
                        Combine::Sum => *x += y,
                        Combine::Prod => *x *= y,
                    }
                }
                a
            }
        });
    }
    let mut scores = acc.ok_or_else(|| Error::InvalidArgument("empty pyramid".into()))?;
    // Interpolation can round a zero product a hair below zero.
    for v in scores.data_mut() {
        *v = v.max(0.0);
    }
    AnomalyMap::new(scores)
}

/// Highest pixel score.
pub fn image_score(map: &AnomalyMap) -> f32 {
    map.scores.max()
}

/// Mean and standard deviation of the raw regression error and predictive
/// variance over normal images, used to standardize US scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsStats {
    pub e_mean: f64,
    pub e_std: f64,
    pub v_mean: f64,
    pub v_std: f64,
}

impl Default for UsStats {
    fn default() -> Self {
        Self {
            e_mean: 0.0,
            e_std: 1.0,
            v_mean: 0.0,
            v_std: 1.0,
        }
    }
}

/// Raw per-pixel regression error `|mean_s - t|²` and predictive variance
/// `mean_k |s_k - mean_s|²`.
pub fn us_raw_maps(teacher: &Tensor, students: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if students.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ensemble needs at least 2 students, got {}",
            students.len()
        )));
    }
    let (c, h, w) = teacher.chw()?;
    if let Some(s) = students.iter().find(|s| s.shape() != teacher.shape()) {
        return Err(Error::Shape(format!(
            "student embedding {:?} vs teacher {:?}",
            s.shape(),
            teacher.shape()
        )));
    }
    let hw = h * w;
    let k = students.len() as f64;
    let mut e = vec![0.0f32; hw];
    let mut v = vec![0.0f32; hw];
    for p in 0..hw {
        let (mut ep, mut vp) = (0.0f64, 0.0f64);
        for ch in 0..c {
            let i = ch * hw + p;
            let mean = students.iter().map(|s| f64::from(s.data()[i])).sum::<f64>() / k;
            ep += (mean - f64::from(teacher.data()[i])).powi(2);
            vp += students.iter().map(|s| (f64::from(s.data()[i]) - mean).powi(2)).sum::<f64>() / k;
        }
        e[p] = ep as f32;
        v[p] = vp as f32;
    }
    Ok((Tensor::new(vec![h, w], e)?, Tensor::new(vec![h, w], v)?))
}

/// US score map at feature resolution: `e / σ_e + v / σ_v`.
///
/// This is the standardized sum `(e - μ_e)/σ_e + (v - μ_v)/σ_v` shifted by
/// the constant `μ_e/σ_e + μ_v/σ_v`, which keeps scores non-negative
/// without changing their order.
pub fn us_score_map(teacher: &Tensor, students: &[Tensor], stats: &UsStats) -> Result<AnomalyMap> {
    let (e, v) = us_raw_maps(teacher, students)?;
    let (se, sv) = (stats.e_std.max(1e-12), stats.v_std.max(1e-12));
    let data = e
        .data()
        .iter()
        .zip(v.data())
        .map(|(&a, &b)| (f64::from(a) / se + f64::from(b) / sv) as f32)
        .collect();
    AnomalyMap::new(Tensor::new(e.shape().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pyr(maps: Vec<(Vec<usize>, Vec<f32>)>) -> FeaturePyramid {
        FeaturePyramid {
            maps: maps.into_iter().map(|(s, d)| Tensor::new(s, d).unwrap()).collect(),
        }
    }

    fn vec1(v: &[f32]) -> FeaturePyramid {
        pyr(vec![(vec![v.len(), 1, 1], v.to_vec())])
    }

    #[test]
    fn loss_examples() {
        let a = vec1(&[1.0, 0.0]);
        let b = vec1(&[0.0, 2.0]);
        let c = vec1(&[-3.0, 0.0]);
        for f in [stfpm_loss, rd_cosine_loss] {
            assert_eq!(f(&a, &a).unwrap(), 0.0);
            assert!((f(&a, &b).unwrap() - 1.0).abs() < 1e-12);
            assert!((f(&a, &c).unwrap() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let a = pyr(vec![(vec![2, 1, 1], vec![1.0, 0.0]), (vec![1, 2, 2], vec![0.0; 4])]);
        let b = pyr(vec![(vec![2, 1, 1], vec![1.0, 0.0]), (vec![1, 1, 2], vec![0.0; 2])]);
        let err = stfpm_loss(&a, &b).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
    }

    #[test]
    fn us_examples() {
        let t = Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap();
        let s: Vec<Tensor> = [1.0, -1.0, 0.0]
            .iter()
            .map(|&v| Tensor::new(vec![1, 1, 1], vec![v]).unwrap())
            .collect();
        let (e, v) = us_raw_maps(&t, &s).unwrap();
        assert_eq!(e.data()[0], 0.0);
        assert!((v.data()[0] - 2.0 / 3.0).abs() < 1e-7);
        let same = vec![t.clone(), t.clone()];
        let (e, v) = us_raw_maps(&t, &same).unwrap();
        assert_eq!((e.data()[0], v.data()[0]), (0.0, 0.0));
        assert!(us_raw_maps(&t, &s[..1]).is_err());
    }

    #[test]
    fn us_quadratic_homogeneity() {
        let t = Tensor::new(vec![2, 1, 2], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let s = vec![
            Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, -0.5, 0.25]).unwrap(),
            Tensor::new(vec![2, 1, 2], vec![0.0, 0.5, 1.5, -1.0]).unwrap(),
        ];
        let (e1, v1) = us_raw_maps(&t, &s).unwrap();
        let s2: Vec<Tensor> = s.iter().map(|x| x.scale(2.0)).collect();
        let (e2, v2) = us_raw_maps(&t.scale(2.0), &s2).unwrap();
        for i in 0..2 {
            assert!((e2.data()[i] - 4.0 * e1.data()[i]).abs() < 1e-5);
            assert!((v2.data()[i] - 4.0 * v1.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn anomaly_map_identity_and_locality() {
        let base: Vec<f32> = (0..3 * 4 * 4).map(|i| ((i * 7 % 11) as f32) - 4.0).collect();
        let t = pyr(vec![(vec![3, 4, 4], base.clone())]);
        let z = anomaly_map(&t, &t, (16, 16), Combine::Sum).unwrap();
        assert!(z.scores.data().iter().all(|&v| v == 0.0));
        assert_eq!(image_score(&z), 0.0);

        let mut moved = base;
        // Cell (1, 2) of every channel.
        for ch in 0..3 {
            moved[ch * 16 + 6] = -moved[ch * 16 + 6] + 5.0;
        }
        let s = pyr(vec![(vec![3, 4, 4], moved)]);
        let m = anomaly_map(&t, &s, (16, 16), Combine::Sum).unwrap();
        let d = m.scores.data();
        let arg = (0..256).max_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        let (y, x) = (arg / 16, arg % 16);
        assert!((4..8).contains(&y) && (8..12).contains(&x), "({y}, {x})");
    }

    #[test]
    fn image_score_is_max() {
        let mut v = vec![0.0f32; 9];
        v[4] = 3.2;
        let m = AnomalyMap::new(Tensor::new(vec![3, 3], v).unwrap()).unwrap();
        assert_eq!(image_score(&m), 3.2);
    }

    fn arb_pyr() -> impl Strategy<Value = (FeaturePyramid, FeaturePyramid)> {
        (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(c, h, w)| {
            let n = c * h * w;
            (
                prop::collection::vec(-3.0f32..3.0, n),
                prop::collection::vec(-3.0f32..3.0, n),
            )
                .prop_map(move |(a, b)| (pyr(vec![(vec![c, h, w], a)]), pyr(vec![(vec![c, h, w], b)])))
        })
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_scale_invariant((t, s) in arb_pyr(), k in 0.1f32..10.0) {
            for f in [stfpm_loss, rd_cosine_loss] {
                let a = f(&t, &s).unwrap();
                prop_assert!(a >= -1e-12);
                prop_assert!(a <= 2.0 + 1e-9);
                let b = f(&t, &s.scale(k)).unwrap();
                // Vectors scaled across the eps guard change the value; skip those.
                let tiny = s.maps[0].data().iter().all(|v| v.abs() < 1e-3);
                if !tiny {
                    prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
                }
            }
            prop_assert!(us_regression_loss(&t, &s).unwrap() >= 0.0);
            let m = anomaly_map(&t, &s, (5, 7), Combine::Sum).unwrap();
            prop_assert!(m.scores.data().iter().all(|&v| (0.0..=2.0 + 1e-5).contains(&v)));
        }

        #[test]
        fn argmax_stable_under_feature_scaling((t, s) in arb_pyr(), k in 0.5f32..4.0) {
            let a = anomaly_map(&t, &s, (8, 8), Combine::Sum).unwrap();
            let b = anomaly_map(&t.scale(k), &s.scale(k), (8, 8), Combine::Sum).unwrap();
            for (x, y) in a.scores.data().iter().zip(b.scores.data()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
