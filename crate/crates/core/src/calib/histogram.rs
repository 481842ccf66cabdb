use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Streaming histogram with running min/max.
///
/// The span starts at the first observation's range. Values that fall
/// outside it double the bin width (merging adjacent pairs of bins) until
/// they fit, so counts are never redistributed or lost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningHistogram {
    counts: Vec<u64>,
    lower: f64,
    bin_width: f64,
    running_min: f64,
    running_max: f64,
    total: u64,
}

impl RunningHistogram {
    pub const DEFAULT_BINS: usize = 2048;

    pub fn new(bins: usize) -> Self {
        assert!(bins >= 2 && bins % 2 == 0, "bin count must be even and >= 2");
        Self {
            counts: vec![0; bins],
            lower: 0.0,
            bin_width: 0.0,
            running_min: f64::INFINITY,
            running_max: f64::NEG_INFINITY,
            total: 0,
        }
    }

    /// Empty histogram with a fixed initial span `[lo, hi]`.
    pub fn with_range(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::DegenerateRange { lo, hi });
        }
        let mut h = Self::new(bins);
        h.lower = lo;
        h.bin_width = (hi - lo) / bins as f64;
        Ok(h)
    }

    /// Histogram built directly from bin counts. The running min/max are set
    /// to the outer edges of the populated bins.
    pub fn from_counts(lower: f64, bin_width: f64, counts: Vec<u64>) -> Result<Self> {
        if counts.len() < 2 || counts.len() % 2 != 0 {
            return Err(Error::InvalidArgument("bin count must be even and >= 2".into()));
        }
        if !(bin_width.is_finite() && bin_width > 0.0 && lower.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid bin width {bin_width}")));
        }
        let mut h = Self {
            total: counts.iter().sum(),
            counts,
            lower,
            bin_width,
            running_min: f64::INFINITY,
            running_max: f64::NEG_INFINITY,
        };
        if let Some((f, l)) = h.populated() {
            h.running_min = h.edge(f);
            h.running_max = h.edge(l + 1);
        }
        Ok(h)
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn upper(&self) -> f64 {
        self.lower + self.bin_width * self.bins() as f64
    }

    pub fn running_min(&self) -> f64 {
        self.running_min
    }

    pub fn running_max(&self) -> f64 {
        self.running_max
    }

    pub fn total_count(&self) -> u64 {
        self.total
    }

    /// Left edge of bin `i` (`i == bins` gives the upper edge).
    pub fn edge(&self, i: usize) -> f64 {
        self.lower + self.bin_width * i as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lower + self.bin_width * (i as f64 + 0.5)
    }

    /// First and last bins with non-zero count.
    pub fn populated(&self) -> Option<(usize, usize)> {
        let f = self.counts.iter().position(|&c| c > 0)?;
        let l = self.counts.iter().rposition(|&c| c > 0)?;
        Some((f, l))
    }

    pub fn observe(&mut self, t: &Tensor) -> Result<()> {
        self.observe_values(t.data())
    }

    pub fn observe_values(&mut self, values: &[f32]) -> Result<()> {
        if let Some((i, &v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                value: f64::from(v),
            });
        }
        if values.is_empty() {
            return Ok(());
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in values {
            lo = lo.min(f64::from(v));
            hi = hi.max(f64::from(v));
        }
        if self.bin_width == 0.0 {
            self.lower = lo;
            let span = hi - lo;
            self.bin_width = if span > 0.0 {
                span / self.bins() as f64
            } else {
                lo.abs().max(1.0) / self.bins() as f64
            };
        }
        while lo < self.lower {
            self.grow_down();
        }
        while hi > self.upper() {
            self.grow_up();
        }
        let n = self.bins();
        for &v in values {
            let pos = ((f64::from(v) - self.lower) / self.bin_width).floor();
            let idx = if pos < 0.0 { 0 } else { (pos as usize).min(n - 1) };
            self.counts[idx] += 1;
        }
        self.total += values.len() as u64;
        self.running_min = self.running_min.min(lo);
        self.running_max = self.running_max.max(hi);
        Ok(())
    }

    /// Doubles the bin width keeping the lower edge fixed.
    fn grow_up(&mut self) {
        let n = self.bins();
        let mut merged = vec![0u64; n];
        for j in 0..n / 2 {
            merged[j] = self.counts[2 * j] + self.counts[2 * j + 1];
        }
        self.counts = merged;
        self.bin_width *= 2.0;
    }

    /// Doubles the bin width keeping the upper edge fixed.
    fn grow_down(&mut self) {
        let n = self.bins();
        let mut merged = vec![0u64; n];
        for j in 0..n / 2 {
            merged[n / 2 + j] = self.counts[2 * j] + self.counts[2 * j + 1];
        }
        self.lower -= self.bin_width * n as f64;
        self.counts = merged;
        self.bin_width *= 2.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn constant_tensor_single_bin() {
        let mut h = RunningHistogram::new(2048);
        h.observe(&Tensor::full(&[4, 4], 5.0)).unwrap();
        assert_eq!(h.running_min(), 5.0);
        assert_eq!(h.running_max(), 5.0);
        assert_eq!(h.counts().iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.total_count(), 16);
    }

    #[test]
    fn observing_twice_doubles_counts() {
        let x = t(&[0.1, 0.5, 0.5, 2.0, -1.0, 1.25]);
        let mut h = RunningHistogram::new(64);
        h.observe(&x).unwrap();
        let once = h.counts().to_vec();
        h.observe(&x).unwrap();
        let twice: Vec<u64> = once.iter().map(|c| 2 * c).collect();
        assert_eq!(h.counts(), twice.as_slice());
    }

    #[test]
    fn counting() {
        let v: Vec<f32> = (0..1024).map(|i| i as f32).collect();
        let mut h = RunningHistogram::new(2048);
        h.observe(&t(&v)).unwrap();
        assert_eq!(h.counts().iter().sum::<u64>(), 1024);
        assert_eq!((h.running_min(), h.running_max()), (0.0, 1023.0));
    }

    #[test]
    fn rejects_non_finite() {
        let mut h = RunningHistogram::new(8);
        assert!(matches!(
            h.observe(&t(&[1.0, f32::NAN])),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert_eq!(h.total_count(), 0);
    }

    proptest! {
        #[test]
        fn rescaling_preserves_mass(batches in prop::collection::vec(
            prop::collection::vec(-1000.0f32..1000.0, 1..40), 1..8)) {
            let mut h = RunningHistogram::new(32);
            let mut n = 0u64;
            for b in &batches {
                h.observe(&t(b)).unwrap();
                n += b.len() as u64;
                prop_assert_eq!(h.counts().iter().sum::<u64>(), n);
                prop_assert_eq!(h.total_count(), n);
                prop_assert!(h.running_min() >= h.lower());
                prop_assert!(h.running_max() <= h.upper());
                prop_assert!(h.running_min() <= h.running_max());
            }
            // Every observed value lands in the bin whose span contains it.
            let last = batches.last().unwrap();
            for &v in last {
                let i = (((v as f64) - h.lower()) / h.bin_width()).floor().clamp(0.0, 31.0) as usize;
                prop_assert!(h.counts()[i] > 0);
            }
        }
    }
}
