use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where calibration batches come from.
#[derive(Debug, Clone)]
pub enum CalibrationSource {
    /// Consecutive batches of `batch_size` images, in order.
    Dataset {
        images: Vec<Tensor>,
        n_batches: usize,
        batch_size: usize,
    },
    /// Seeded i.i.d. normal tensors. `batch_shape` is `[N, C, H, W]`.
    RandomNormal {
        mean: f32,
        std: f32,
        n_batches: usize,
        batch_shape: [usize; 4],
        seed: u64,
    },
}

impl CalibrationSource {
    pub fn n_batches(&self) -> usize {
        match self {
            CalibrationSource::Dataset { n_batches, .. } | CalibrationSource::RandomNormal { n_batches, .. } => {
                *n_batches
            }
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            CalibrationSource::Dataset { .. } => "train",
            CalibrationSource::RandomNormal { .. } => "random-normal",
        }
    }

    /// Materializes every batch as a list of `C x H x W` images.
    pub fn batches(&self) -> Result<Vec<Vec<Tensor>>> {
        if self.n_batches() == 0 {
            return Err(Error::InvalidArgument("calibration needs at least one batch".into()));
        }
        match self {
            CalibrationSource::Dataset {
                images,
                n_batches,
                batch_size,
            } => {
                if *batch_size == 0 {
                    return Err(Error::InvalidArgument("batch size must be positive".into()));
                }
                let needed = n_batches * batch_size;
                if images.len() < needed {
                    return Err(Error::SourceExhausted {
                        produced: images.len() / batch_size,
                        requested: *n_batches,
                    });
                }
                Ok(images[..needed].chunks(*batch_size).map(<[Tensor]>::to_vec).collect())
            }
            CalibrationSource::RandomNormal {
                mean,
                std,
                n_batches,
                batch_shape,
                seed,
            } => {
                let [n, c, h, w] = *batch_shape;
                random_normal_source(*mean, *std, *n_batches, &[n, c, h, w], *seed)?
                    .map(|batch| {
                        let per = c * h * w;
                        batch
                            .data()
                            .chunks(per)
                            .map(|d| Tensor::new(vec![c, h, w], d.to_vec()))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect()
            }
        }
    }
}

/// Deterministic stream of `n_batches` tensors of i.i.d. `N(mean, std^2)`
/// values with the given shape.
pub fn random_normal_source(
    mean: f32,
    std: f32,
    n_batches: usize,
    batch_shape: &[usize],
    seed: u64,
) -> Result<impl Iterator<Item = Tensor>> {
    if !(std.is_finite() && std > 0.0 && mean.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid normal parameters ({mean}, {std})")));
    }
    if batch_shape.is_empty() || batch_shape.contains(&0) {
        return Err(Error::Shape(format!("invalid batch shape {batch_shape:?}")));
    }
    let normal = Normal::new(mean, std).expect("checked parameters");
    let shape = batch_shape.to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_batches).map(move |_| {
        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Tensor::new(shape.clone(), data).expect("shape matches")
    }))
}
