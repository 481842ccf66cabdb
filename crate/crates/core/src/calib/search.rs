//! Clip-range selection over a [`RunningHistogram`].
//!
//! Candidates are windows `[lo, hi)` of bin indices inside the populated
//! span. Two objectives are provided:
//!
//! * **entropy** – fold the mass outside the window into its edge bins to
//!   get `P`, collapse the window's own counts into `L` chunks and spread
//!   each chunk's mass over the bins where `P` is non-zero to get `Q`, and
//!   minimize `KL(P || Q)`. Windows are at least `L` bins wide. A histogram
//!   with at most `L` populated bins is returned whole with `KL = 0`.
//! * **l2** – quantize every bin centre with the parameters the window
//!   implies (out-of-window centres clamp) and minimize the count-weighted
//!   squared error.
//!
//! Scores within `SCORE_TOL` of the optimum are treated as ties and the
//! narrowest window wins, then the lowest one. The returned range is the
//! winning window's edges clipped to the observed `[min, max]`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::histogram::RunningHistogram;
use crate::error::{Error, Result};
use crate::quant::{compute_qparams, QuantMode, QuantParams};

/// Relative (and absolute) slack under which two scores count as equal.
pub const SCORE_TOL: f64 = 1e-12;

/// Default candidate budget for the entropy search before it switches to a
/// coarse-to-fine sweep.
pub const DEFAULT_ENTROPY_BUDGET: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Entropy,
    L2,
    MinMax,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Entropy => "entropy",
            Objective::L2 => "l2",
            Objective::MinMax => "minmax",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Objective::Entropy),
            "l2" => Ok(Objective::L2),
            "minmax" => Ok(Objective::MinMax),
            _ => Err(Error::InvalidArgument(format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchOptions {
    /// Maximum number of windows scored on the full-resolution grid. Above
    /// it the search scores a strided grid, then refines around the best
    /// coarse window. `None` scores every window.
    pub max_candidates: Option<usize>,
}

impl SearchOptions {
    pub const FULL: SearchOptions = SearchOptions { max_candidates: None };
}

/// Winning window and its score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchResult {
    pub lo_bin: usize,
    pub hi_bin: usize,
    pub score: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    lo: usize,
    hi: usize,
    score: f64,
}

/// Picks the narrowest (then lowest) window among those tied with the best.
fn select(cands: &[Candidate]) -> Candidate {
    let best = cands.iter().map(|c| c.score).fold(f64::INFINITY, f64::min);
    let limit = best + SCORE_TOL * best.abs() + SCORE_TOL;
    *cands
        .iter()
        .filter(|c| c.score <= limit)
        .min_by_key(|c| (c.hi - c.lo, c.lo))
        .expect("at least one candidate")
}

fn check_nonempty(h: &RunningHistogram) -> Result<(usize, usize)> {
    if h.total_count() == 0 {
        return Err(Error::EmptyHistogram);
    }
    h.populated().ok_or(Error::EmptyHistogram)
}

fn clip_to_observed(h: &RunningHistogram, lo: usize, hi: usize) -> (f64, f64) {
    let (a, b) = (h.edge(lo), h.edge(hi));
    let (ca, cb) = (a.max(h.running_min()), b.min(h.running_max()));
    if ca < cb {
        (ca, cb)
    } else {
        (a, b)
    }
}

fn finish(h: &RunningHistogram, c: Candidate) -> SearchResult {
    let (alpha, beta) = clip_to_observed(h, c.lo, c.hi);
    SearchResult {
        lo_bin: c.lo,
        hi_bin: c.hi,
        score: c.score,
        alpha,
        beta,
    }
}

/// Observed `(min, max)`, widened by ±0.5 when they coincide.
pub fn minmax_calibrate(h: &RunningHistogram) -> Result<(f64, f64)> {
    check_nonempty(h)?;
    let (lo, hi) = (h.running_min(), h.running_max());
    Ok(if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) })
}

/// Prefix sums shared by both objectives.
struct Prefix {
    count: Vec<u64>,
    nonzero: Vec<u32>,
    c_ln_c: Vec<f64>,
    c_i: Vec<u128>,
    c_i2: Vec<u128>,
}

impl Prefix {
    fn new(counts: &[u64]) -> Self {
        let n = counts.len();
        let mut p = Prefix {
            count: Vec::with_capacity(n + 1),
            nonzero: Vec::with_capacity(n + 1),
            c_ln_c: Vec::with_capacity(n + 1),
            c_i: Vec::with_capacity(n + 1),
            c_i2: Vec::with_capacity(n + 1),
        };
        let (mut a, mut b, mut c, mut d, mut e) = (0u64, 0u32, 0f64, 0u128, 0u128);
        p.count.push(a);
        p.nonzero.push(b);
        p.c_ln_c.push(c);
        p.c_i.push(d);
        p.c_i2.push(e);
        for (i, &k) in counts.iter().enumerate() {
            a += k;
            b += u32::from(k > 0);
            c += xlnx(k as f64);
            d += u128::from(k) * i as u128;
            e += u128::from(k) * (i as u128) * (i as u128);
            p.count.push(a);
            p.nonzero.push(b);
            p.c_ln_c.push(c);
            p.c_i.push(d);
            p.c_i2.push(e);
        }
        p
    }

    fn mass(&self, a: usize, b: usize) -> u64 {
        self.count[b] - self.count[a]
    }
}

#[inline]
fn xlnx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// `KL(P || Q)` for the window `[lo, hi)` with `levels` quantization levels.
///
/// `P` is the window with the outside mass folded into its edge bins. `Q`
/// collapses the unfolded window counts into `levels` chunks and spreads each
/// chunk's mass evenly over the bins where `P` is non-zero. Both are
/// normalized. A window whose `Q` would be zero where `P` is not is
/// inadmissible and scores `+inf`.
fn window_kl(counts: &[u64], pre: &Prefix, lo: usize, hi: usize, levels: usize) -> f64 {
    let n = hi - lo;
    let total = pre.count[counts.len()] as f64;
    let below = pre.count[lo] as f64;
    let above = pre.mass(hi, counts.len()) as f64;
    let window = pre.mass(lo, hi) as f64;
    if window == 0.0 {
        return f64::INFINITY;
    }
    let p_first = counts[lo] as f64 + below;
    let p_last = counts[hi - 1] as f64 + above;
    let sum_plnp = if n == 1 {
        xlnx(total)
    } else {
        xlnx(p_first) + xlnx(p_last) + (pre.c_ln_c[hi - 1] - pre.c_ln_c[lo + 1])
    };

    let mut sum_plnq = 0.0;
    for j in 0..levels {
        let s = lo + j * n / levels;
        let e = lo + (j + 1) * n / levels;
        if s == e {
            continue;
        }
        let q_mass = pre.mass(s, e) as f64;
        let mut p_mass = q_mass;
        let mut nnz = i64::from(pre.nonzero[e] - pre.nonzero[s]);
        if s == lo {
            p_mass += below;
            nnz += i64::from(below > 0.0 && counts[lo] == 0);
        }
        if e == hi {
            p_mass += above;
            nnz += i64::from(above > 0.0 && counts[hi - 1] == 0 && !(n == 1 && below > 0.0));
        }
        if p_mass == 0.0 {
            continue;
        }
        if q_mass == 0.0 {
            return f64::INFINITY;
        }
        sum_plnq += p_mass * (q_mass / nnz as f64).ln();
    }
    let kl = (sum_plnp - sum_plnq) / total - total.ln() + window.ln();
    kl.max(0.0)
}

/// Count-weighted squared quantization error of every populated bin centre
/// under `qp`, in units of squared bin widths per observation.
fn window_l2(h: &RunningHistogram, pre: &Prefix, qp: &QuantParams, first: usize, last: usize) -> f64 {
    let level = |i: usize| qp.quantize_value(h.center(i));
    let mut err = 0.0f64;
    let mut i = first;
    while i <= last {
        let q = level(i);
        // Last bin mapping to level q: analytic guess, then exact fix-up.
        let mut e = if q >= qp.qmax {
            last
        } else {
            let x_b = qp.scale * (f64::from(q - qp.zero_point) + 0.5);
            let guess = ((x_b - h.lower()) / h.bin_width() - 0.5).floor();
            if guess.is_finite() && guess >= i as f64 {
                (guess as usize).min(last)
            } else {
                i
            }
        };
        while e < last && level(e + 1) == q {
            e += 1;
        }
        while e > i && level(e) != q {
            e -= 1;
        }
        let s0 = pre.mass(i, e + 1);
        if s0 > 0 {
            // sum c_j (j - u)^2 with j - u = (j - i) - d, using exact integer moments.
            let v = qp.dequantize_value(q);
            let u = (v - h.lower()) / h.bin_width() - 0.5;
            let d = u - i as f64;
            let s1 = pre.c_i[e + 1] - pre.c_i[i];
            let s2 = pre.c_i2[e + 1] - pre.c_i2[i];
            let ii = i as u128;
            let b = s1 - ii * u128::from(s0);
            let a = s2 + ii * ii * u128::from(s0) - 2 * ii * s1;
            err += a as f64 - 2.0 * d * b as f64 + d * d * s0 as f64;
        }
        i = e + 1;
    }
    err.max(0.0) / h.total_count() as f64
}

/// Enumerates windows `[lo, hi)` with `lo` in `los`, `hi` in `his` and
/// width at least `min_width`, scoring each.
fn sweep(
    los: impl Iterator<Item = usize> + Clone,
    his: impl Iterator<Item = usize> + Clone,
    min_width: usize,
    mut score: impl FnMut(usize, usize) -> f64,
) -> Vec<Candidate> {
    let mut out = Vec::new();
    for lo in los {
        for hi in his.clone() {
            if hi > lo && hi - lo >= min_width {
                out.push(Candidate {
                    lo,
                    hi,
                    score: score(lo, hi),
                });
            }
        }
    }
    out
}

fn stride_range(a: usize, b: usize, step: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (a..=b).step_by(step.max(1)).collect();
    if v.last() != Some(&b) {
        v.push(b);
    }
    v
}

/// Two-sided search over all windows inside the populated span, or a
/// strided sweep plus local refinement when the budget is exceeded.
fn two_sided(
    first: usize,
    last: usize,
    min_width: usize,
    opts: SearchOptions,
    mut score: impl FnMut(usize, usize) -> f64,
) -> Candidate {
    let span = last + 1 - first;
    let min_width = min_width.min(span).max(1);
    let free = span - min_width + 1;
    let full_count = free * (free + 1) / 2;
    let budget = opts.max_candidates.unwrap_or(usize::MAX);
    if full_count <= budget {
        return select(&sweep(first..=last, first + 1..=last + 1, min_width, &mut score));
    }
    let step = ((full_count as f64 / budget as f64).sqrt().ceil() as usize).max(2);
    let los = stride_range(first, last + 1 - min_width, step);
    let his = stride_range(first + min_width, last + 1, step);
    let coarse = select(&sweep(los.into_iter(), his.into_iter(), min_width, &mut score));
    let lo_a = coarse.lo.saturating_sub(step).max(first);
    let lo_b = (coarse.lo + step).min(last);
    let hi_a = coarse.hi.saturating_sub(step).max(first + 1);
    let hi_b = (coarse.hi + step).min(last + 1);
    let mut fine = sweep(lo_a..=lo_b, hi_a..=hi_b, min_width, &mut score);
    fine.push(coarse);
    select(&fine)
}

/// Asymmetric KL-divergence threshold search with `2^bits` levels.
pub fn entropy_calibrate(h: &RunningHistogram, bits: u8) -> Result<(f64, f64)> {
    let r = entropy_search(
        h,
        bits,
        SearchOptions {
            max_candidates: Some(DEFAULT_ENTROPY_BUDGET),
        },
    )?;
    Ok((r.alpha, r.beta))
}

pub fn entropy_search(h: &RunningHistogram, bits: u8, opts: SearchOptions) -> Result<SearchResult> {
    check_bits(bits)?;
    let (first, last) = check_nonempty(h)?;
    let levels = 1usize << bits;
    let pre = Prefix::new(h.counts());
    if pre.nonzero[h.bins()] as usize <= levels {
        return Ok(finish(h, Candidate { lo: first, hi: last + 1, score: 0.0 }));
    }
    let best = two_sided(first, last, levels, opts, |lo, hi| window_kl(h.counts(), &pre, lo, hi, levels));
    Ok(finish(h, best))
}

/// Symmetric KL search over a histogram of magnitudes (lower edge 0);
/// returns the clip threshold `T` for the range `[-T, T]`.
pub fn entropy_calibrate_symmetric(h_abs: &RunningHistogram, bits: u8) -> Result<f64> {
    check_bits(bits)?;
    let (first, last) = check_nonempty(h_abs)?;
    let levels = 1usize << (bits - 1);
    let pre = Prefix::new(h_abs.counts());
    if pre.nonzero[h_abs.bins()] as usize <= levels {
        return Ok(symmetric_threshold(h_abs, Candidate { lo: 0, hi: last + 1, score: 0.0 }));
    }
    let lo_hi = levels.max(first + 1);
    let cands = sweep(0..=0, lo_hi..=last + 1, 1, |lo, hi| window_kl(h_abs.counts(), &pre, lo, hi, levels));
    Ok(symmetric_threshold(h_abs, select(&cands)))
}

/// Asymmetric L2 search over every window (default: full grid).
pub fn l2_calibrate(h: &RunningHistogram, bits: u8) -> Result<(f64, f64)> {
    let r = l2_search(h, bits, SearchOptions::FULL)?;
    Ok((r.alpha, r.beta))
}

pub fn l2_search(h: &RunningHistogram, bits: u8, opts: SearchOptions) -> Result<SearchResult> {
    check_bits(bits)?;
    let (first, last) = check_nonempty(h)?;
    let pre = Prefix::new(h.counts());
    // Windows that widen to the same grid score identically; score each grid once.
    let mut seen: HashMap<(u64, i32), f64> = HashMap::new();
    let best = two_sided(first, last, 1, opts, |lo, hi| {
        match compute_qparams(h.edge(lo), h.edge(hi), bits, QuantMode::AffineUnsigned) {
            Ok(qp) => *seen
                .entry((qp.scale.to_bits(), qp.zero_point))
                .or_insert_with(|| window_l2(h, &pre, &qp, first, last)),
            Err(_) => f64::INFINITY,
        }
    });
    Ok(finish(h, best))
}

/// Symmetric L2 search over a histogram of magnitudes.
pub fn l2_calibrate_symmetric(h_abs: &RunningHistogram, bits: u8) -> Result<f64> {
    check_bits(bits)?;
    let (first, last) = check_nonempty(h_abs)?;
    let pre = Prefix::new(h_abs.counts());
    let cands = sweep(0..=0, first + 1..=last + 1, 1, |_, hi| {
        let t = h_abs.edge(hi);
        match compute_qparams(-t, t, bits, QuantMode::SymmetricSigned) {
            Ok(qp) => window_l2(h_abs, &pre, &qp, first, last),
            Err(_) => f64::INFINITY,
        }
    });
    Ok(symmetric_threshold(h_abs, select(&cands)))
}

fn symmetric_threshold(h_abs: &RunningHistogram, c: Candidate) -> f64 {
    let t = h_abs.edge(c.hi);
    let clipped = t.min(h_abs.running_max());
    if clipped > 0.0 {
        clipped
    } else {
        t
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bits must be in 2..=8, got {bits}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(counts: Vec<u64>) -> RunningHistogram {
        RunningHistogram::from_counts(0.0, 1.0, counts).unwrap()
    }

    #[test]
    fn empty_histogram_errors() {
        let h = RunningHistogram::new(16);
        assert!(matches!(minmax_calibrate(&h), Err(Error::EmptyHistogram)));
        assert!(matches!(entropy_calibrate(&h, 8), Err(Error::EmptyHistogram)));
        assert!(matches!(l2_calibrate(&h, 8), Err(Error::EmptyHistogram)));
    }

    #[test]
    fn minmax_examples() {
        let mut h = RunningHistogram::new(2048);
        h.observe_values(&[5.0; 10]).unwrap();
        assert_eq!(minmax_calibrate(&h).unwrap(), (4.5, 5.5));
        let mut h = RunningHistogram::new(2048);
        h.observe_values(&[-1.0, 2.0]).unwrap();
        assert_eq!(minmax_calibrate(&h).unwrap(), (-1.0, 2.0));
    }

    #[test]
    fn single_bin_mass() {
        let mut c = vec![0u64; 16];
        c[5] = 100;
        let h = hist(c);
        assert_eq!(entropy_calibrate(&h, 8).unwrap(), (5.0, 6.0));
        assert_eq!(entropy_calibrate(&h, 2).unwrap(), (5.0, 6.0));
        let r = l2_search(&h, 8, SearchOptions::FULL).unwrap();
        assert_eq!((r.alpha, r.beta), (5.0, 6.0));
    }

    #[test]
    fn uniform_64_bins_lossless_at_8_bits() {
        let h = hist(vec![10; 64]);
        let r = entropy_search(&h, 8, SearchOptions::FULL).unwrap();
        assert_eq!((r.alpha, r.beta), (0.0, 64.0));
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn outlier_is_clipped() {
        let mut c = vec![100u64; 63];
        c.push(1);
        let h = hist(c);
        let r = entropy_search(&h, 2, SearchOptions::FULL).unwrap();
        assert!(r.hi_bin <= 63, "{r:?}");
    }

    #[test]
    fn l2_mirrored_histogram_same_optimum() {
        let mut c = vec![0u64; 32];
        for (i, v) in c.iter_mut().enumerate().skip(4).take(24) {
            let d = (i as f64 - 14.5).abs();
            *v = (1000.0 * (-d * d / 40.0).exp()).round() as u64 + i as u64;
        }
        let mut m = c.clone();
        m.reverse();
        let a = l2_search(&RunningHistogram::from_counts(-16.0, 1.0, c).unwrap(), 4, SearchOptions::FULL).unwrap();
        let b = l2_search(&RunningHistogram::from_counts(-16.0, 1.0, m).unwrap(), 4, SearchOptions::FULL).unwrap();
        assert!((a.score - b.score).abs() <= 1e-9 * a.score.max(1.0), "{a:?} vs {b:?}");
        assert!(a.alpha < 0.0 && a.beta > 0.0);
    }

    #[test]
    fn symmetric_searches_cover_magnitudes() {
        let mut c = vec![50u64; 256];
        c[255] = 1;
        let h = hist(c);
        let t = entropy_calibrate_symmetric(&h, 8).unwrap();
        assert!(t > 0.0 && t <= 256.0);
        let t = l2_calibrate_symmetric(&h, 8).unwrap();
        assert!(t > 0.0 && t <= 256.0);
    }

    #[test]
    fn budgeted_search_stays_inside_span() {
        let counts: Vec<u64> = (0..2048u64).map(|i| (i * 7919) % 97 + u64::from(i % 3 == 0)).collect();
        let h = hist(counts);
        let r = entropy_search(&h, 4, SearchOptions { max_candidates: Some(4096) }).unwrap();
        assert!(r.hi_bin - r.lo_bin >= 16 && r.hi_bin <= 2048);
        assert!(r.alpha >= h.running_min() && r.beta <= h.running_max());
    }
}
