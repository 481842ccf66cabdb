//! Anomaly-detection datasets: in-memory layout, a seeded synthetic texture
//! generator and a directory loader/saver for class trees of the form
//! `<class>/train/good`, `<class>/test/<defect>`, `<class>/ground_truth/<defect>`.

mod dir;
mod synthetic;

pub use dir::{load_dataset_dir, save_dataset_dir, write_pgm};
pub use synthetic::{generate, generate_synthetic_dataset, SyntheticConfig};

use image::GrayImage;

use crate::distill::Normalization;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GOOD: &str = "good";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedImage {
    pub name: String,
    pub image: GrayImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestImage {
    pub name: String,
    /// `good` for normal images, otherwise the defect type.
    pub defect: String,
    pub image: GrayImage,
    /// Ground truth, one byte per pixel, strictly 0 or 1.
    pub mask: Vec<u8>,
}

impl TestImage {
    pub fn is_anomalous(&self) -> bool {
        self.defect != GOOD
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassData {
    pub name: String,
    pub train: Vec<NamedImage>,
    pub test: Vec<TestImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub classes: Vec<ClassData>,
    /// `(height, width)` shared by every image.
    pub image_size: (usize, usize),
    pub norm: Normalization,
}

/// `[1, H, W]` tensor of `(p / 255 - mean) / std`.
pub fn image_tensor(img: &GrayImage, norm: Normalization) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img
        .as_raw()
        .iter()
        .map(|&p| (f32::from(p) / 255.0 - norm.mean) / norm.std)
        .collect();
    Tensor::new(vec![1, h as usize, w as usize], data).expect("image dimensions")
}

impl DatasetSpec {
    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::Dataset(format!("no class named {name:?}")))
    }

    pub fn tensor(&self, img: &GrayImage) -> Tensor {
        image_tensor(img, self.norm)
    }

    /// Standardized training images of one class.
    pub fn train_tensors(&self, class: usize) -> Vec<Tensor> {
        self.classes[class].train.iter().map(|n| self.tensor(&n.image)).collect()
    }

    /// Standardized training images of every class, class by class.
    pub fn all_train_tensors(&self) -> Vec<Tensor> {
        (0..self.classes.len()).flat_map(|c| self.train_tensors(c)).collect()
    }

    /// Dataset restricted to one class.
    pub fn only_class(&self, class: usize) -> DatasetSpec {
        DatasetSpec {
            classes: vec![self.classes[class].clone()],
            image_size: self.image_size,
            norm: self.norm,
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        let (h, w) = self.image_size;
        for c in &self.classes {
            let sizes = c.train.iter().map(|n| (&n.name, &n.image)).chain(c.test.iter().map(|t| (&t.name, &t.image)));
            for (name, img) in sizes {
                if img.dimensions() != (w as u32, h as u32) {
                    return Err(Error::Dataset(format!(
                        "{}/{name}: image is {:?}, expected {w}x{h}",
                        c.name,
                        img.dimensions()
                    )));
                }
            }
            for t in &c.test {
                if t.mask.len() != h * w || t.mask.iter().any(|&m| m > 1) {
                    return Err(Error::Dataset(format!("{}/{}: mask must be {h}x{w} of 0/1", c.name, t.name)));
                }
            }
        }
        Ok(())
    }
}
