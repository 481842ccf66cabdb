use std::f32::consts::PI;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ClassData, DatasetSpec, NamedImage, TestImage, GOOD};
use crate::distill::Normalization;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_good_per_class: usize,
    pub test_defect_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Texture amplitude around mid-grey; 1.0 spans roughly `[0.15, 0.85]`.
    pub contrast: f32,
    /// Global contrast gain applied to anomalous test images.
    pub anomaly_gain: f32,
}

impl SyntheticConfig {
    /// `imgs_per_class` training images, normal test images and defective
    /// test images per class.
    pub fn new(n_classes: usize, imgs_per_class: usize, image_size: usize, seed: u64) -> Self {
        Self {
            n_classes,
            train_per_class: imgs_per_class,
            test_good_per_class: imgs_per_class,
            test_defect_per_class: imgs_per_class,
            image_size,
            seed,
            contrast: 1.0,
            anomaly_gain: 1.0,
        }
    }
}

/// Convenience wrapper over [`generate`] with default contrast.
pub fn generate_synthetic_dataset(n_classes: usize, imgs_per_class: usize, image_size: usize, seed: u64) -> DatasetSpec {
    generate(&SyntheticConfig::new(n_classes, imgs_per_class, image_size, seed))
}

/// Texture family parameters of one class.
#[derive(Debug, Clone, Copy)]
enum Family {
    Waves { angle: f32, freq: f32 },
    Checker { period: f32 },
    Blobs { radius: usize },
    Weave { fx: f32, fy: f32 },
}

fn family(class: usize) -> Family {
    let variant = (class / 4) as f32;
    match class % 4 {
        0 => Family::Waves {
            angle: 0.35 + 0.9 * variant,
            freq: 4.0 + variant,
        },
        1 => Family::Checker { period: 4.0 + 2.0 * variant },
        2 => Family::Blobs { radius: 2 + class / 4 },
        _ => Family::Weave {
            fx: 3.0 + variant,
            fy: 6.0 + variant,
        },
    }
}

/// One texture image in `[0, 1]` (before quantization to bytes).
fn texture(fam: Family, n: usize, contrast: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let nf = n as f32;
    let phase: f32 = rng.random_range(0.0..2.0 * PI);
    let phase2: f32 = rng.random_range(0.0..2.0 * PI);
    let mut v = match fam {
        Family::Waves { angle, freq } => {
            let a = angle + rng.random_range(-0.05..0.05);
            let (c, s) = (a.cos(), a.sin());
            (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as f32, (i % n) as f32);
                    0.35 * (2.0 * PI * freq * (x * c + y * s) / nf + phase).sin()
                })
                .collect::<Vec<_>>()
        }
        Family::Checker { period } => {
            let (ox, oy) = (period * rng.random_range(0..2) as f32, period * rng.random_range(0..2) as f32);
            (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as f32, (i % n) as f32);
                    let a = ((x + ox) / period).floor() as i64 + ((y + oy) / period).floor() as i64;
                    if a % 2 == 0 {
                        0.3
                    } else {
                        -0.3
                    }
                })
                .collect()
        }
        Family::Blobs { radius } => {
            // Sparse bright Gaussian dots on a torus.
            let r = radius as f32;
            let count = ((nf * nf) / (r * r * 16.0)).ceil() as usize;
            let mut b = vec![0.0f32; n * n];
            for _ in 0..count {
                let (cx, cy) = (rng.random_range(0.0..nf), rng.random_range(0.0..nf));
                let sigma = r * rng.random_range(0.9..1.1);
                for (i, v) in b.iter_mut().enumerate() {
                    let (y, x) = ((i / n) as f32, (i % n) as f32);
                    let dx = (x - cx).abs().min(nf - (x - cx).abs());
                    let dy = (y - cy).abs().min(nf - (y - cy).abs());
                    *v += (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
            }
            let m = b.iter().sum::<f32>() / b.len() as f32;
            let sd = (b.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / b.len() as f32).sqrt().max(1e-6);
            b.iter().map(|x| 0.14 * (x - m) / sd).collect()
        }
        Family::Weave { fx, fy } => (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f32, (i % n) as f32);
                0.18 * ((2.0 * PI * fx * (x + y) / nf + phase).sin() + (2.0 * PI * fy * (x - y) / nf + phase2).sin())
            })
            .collect(),
    };
    let noise = Normal::new(0.0f32, 0.005).expect("std");
    for x in &mut v {
        *x = 0.5 + contrast * *x + noise.sample(rng);
    }
    v
}

fn to_image(v: &[f32], n: usize) -> GrayImage {
    let px = v.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    GrayImage::from_raw(n as u32, n as u32, px).expect("size")
}

/// Injects a contrast patch or a scratch stroke; returns the defect type
/// and mask. The mask covers at least one pixel and at most a quarter of
/// the image.
fn inject(v: &mut [f32], n: usize, rng: &mut ChaCha8Rng) -> (&'static str, Vec<u8>) {
    let mut mask = vec![0u8; n * n];
    if rng.random_bool(0.5) {
        let max = (n / 3).max(2);
        let (ph, pw) = (rng.random_range(2..=max), rng.random_range(2..=max));
        let (y0, x0) = (rng.random_range(0..=n - ph), rng.random_range(0..=n - pw));
        let shift = if rng.random_bool(0.5) { 0.3 } else { -0.3 };
        // Local contrast either amplified or nearly flattened.
        let gain = if rng.random_bool(0.5) { 1.8 } else { 0.15 };
        for y in y0..y0 + ph {
            for x in x0..x0 + pw {
                let i = y * n + x;
                v[i] = 0.5 + gain * (v[i] - 0.5) + shift;
                mask[i] = 1;
            }
        }
        ("patch", mask)
    } else {
        let len = rng.random_range(n as f32 / 3.0..n as f32 / 2.0);
        let a: f32 = rng.random_range(0.0..PI);
        let (dx, dy) = (a.cos(), a.sin());
        let (cx, cy) = (rng.random_range(0.25..0.75) * n as f32, rng.random_range(0.25..0.75) * n as f32);
        let value = if rng.random_bool(0.5) { 0.97 } else { 0.03 };
        let steps = (len * 2.0) as usize;
        for s in 0..=steps {
            let t = s as f32 / 2.0 - len / 2.0;
            let (x, y) = (cx + t * dx, cy + t * dy);
            for (ox, oy) in [(0.0, 0.0), (-dy * 0.7, dx * 0.7)] {
                let (xi, yi) = ((x + ox).round() as isize, (y + oy).round() as isize);
                if xi >= 0 && yi >= 0 && (xi as usize) < n && (yi as usize) < n {
                    let i = yi as usize * n + xi as usize;
                    v[i] = value;
                    mask[i] = 1;
                }
            }
        }
        if mask.iter().all(|&m| m == 0) {
            let i = (n / 2) * n + n / 2;
            v[i] = value;
            mask[i] = 1;
        }
        ("scratch", mask)
    }
}

/// Seeded synthetic dataset: one procedural texture family per class,
/// normal training images and test images with exact defect masks.
pub fn generate(cfg: &SyntheticConfig) -> DatasetSpec {
    assert!(cfg.n_classes >= 1, "at least one class");
    assert!(cfg.image_size >= 16, "image size must be at least 16");
    let n = cfg.image_size;
    let mut classes = Vec::with_capacity(cfg.n_classes);
    for c in 0..cfg.n_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(c as u64));
        let fam = family(c);
        let train = (0..cfg.train_per_class)
            .map(|i| NamedImage {
                name: format!("{i:03}"),
                image: to_image(&texture(fam, n, cfg.contrast, &mut rng), n),
            })
            .collect();
        let mut test = Vec::new();
        for i in 0..cfg.test_good_per_class {
            test.push(TestImage {
                name: format!("{i:03}"),
                defect: GOOD.into(),
                image: to_image(&texture(fam, n, cfg.contrast, &mut rng), n),
                mask: vec![0; n * n],
            });
        }
        for i in 0..cfg.test_defect_per_class {
            let mut v = texture(fam, n, cfg.contrast, &mut rng);
            let (defect, mask) = inject(&mut v, n, &mut rng);
            if cfg.anomaly_gain != 1.0 {
                for x in &mut v {
                    *x = 0.5 + cfg.anomaly_gain * (*x - 0.5);
                }
            }
            test.push(TestImage {
                name: format!("{i:03}"),
                defect: defect.into(),
                image: to_image(&v, n),
                mask,
            });
        }
        test.sort_by(|a, b| (&a.defect, &a.name).cmp(&(&b.defect, &b.name)));
        classes.push(ClassData {
            name: format!("class{c:02}"),
            train,
            test,
        });
    }
    DatasetSpec {
        classes,
        image_size: (n, n),
        norm: Normalization::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = generate_synthetic_dataset(3, 6, 24, 5);
        let b = generate_synthetic_dataset(3, 6, 24, 5);
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_dataset(3, 6, 24, 6));
    }

    #[test]
    fn masks_within_bounds() {
        let d = generate(&SyntheticConfig {
            test_defect_per_class: 40,
            ..SyntheticConfig::new(4, 2, 32, 9)
        });
        for c in &d.classes {
            assert!(c.train.len() == 2);
            for t in &c.test {
                let k = t.mask.iter().filter(|&&m| m == 1).count();
                assert!(t.mask.iter().all(|&m| m <= 1));
                if t.is_anomalous() {
                    assert!(k >= 1 && k * 4 <= 32 * 32, "{k}");
                } else {
                    assert_eq!(k, 0);
                }
            }
        }
        d.check().unwrap();
    }

    /// Histogram of gradient orientations (8 bins over [0, pi) centred on
    /// multiples of pi/8), weighted by magnitude and averaged over a class's
    /// training images.
    fn orientation_hist(imgs: &[NamedImage]) -> [f64; 8] {
        let mut h = [0.0f64; 8];
        for img in imgs {
            let (w, hh) = img.image.dimensions();
            let p = |x: u32, y: u32| f64::from(img.image.get_pixel(x, y).0[0]);
            for y in 1..hh - 1 {
                for x in 1..w - 1 {
                    let gx = p(x + 1, y) - p(x - 1, y);
                    let gy = p(x, y + 1) - p(x, y - 1);
                    let m = (gx * gx + gy * gy).sqrt();
                    let a = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                    h[((a / std::f64::consts::PI * 8.0 + 0.5) as usize) % 8] += m;
                }
            }
        }
        let s: f64 = h.iter().sum();
        h.map(|v| v / s)
    }

    #[test]
    fn class_statistics_differ() {
        let d = generate_synthetic_dataset(4, 8, 32, 1);
        let hs: Vec<[f64; 8]> = d.classes.iter().map(|c| orientation_hist(&c.train)).collect();
        for i in 0..hs.len() {
            for j in i + 1..hs.len() {
                let l1: f64 = hs[i].iter().zip(&hs[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(l1 > 0.2, "classes {i} and {j}: L1 distance {l1}");
            }
        }
    }

    #[test]
    fn gain_widens_anomalous_range() {
        let d = generate(&SyntheticConfig {
            contrast: 0.5,
            anomaly_gain: 2.0,
            ..SyntheticConfig::new(1, 4, 32, 2)
        });
        let range = |img: &GrayImage| {
            let r = img.as_raw();
            (*r.iter().min().unwrap(), *r.iter().max().unwrap())
        };
        let train_max = d.classes[0].train.iter().map(|n| range(&n.image).1).max().unwrap();
        let anom = d.classes[0].test.iter().filter(|t| t.is_anomalous()).map(|t| range(&t.image).1).max().unwrap();
        assert!(anom > train_max);
    }
}
