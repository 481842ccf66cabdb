use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder};

use super::{ClassData, DatasetSpec, NamedImage, TestImage, GOOD};
use crate::distill::Normalization;
use crate::error::{Error, Result};

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect())
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

pub(crate) fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(img.into_luma8())
}

/// Writes an 8-bit binary PGM (P5).
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = PnmEncoder::new(BufWriter::new(f)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    enc.write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

fn find_mask(root: &Path, defect: &str, name: &str) -> Option<PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|ext| root.join(defect).join(format!("{name}_mask.{ext}")))
        .find(|p| p.is_file())
}

/// Loads a class tree. Classes and files are visited in sorted order.
pub fn load_dataset_dir(root: &Path, norm: Normalization) -> Result<DatasetSpec> {
    let mut classes = Vec::new();
    let mut size: Option<(u32, u32)> = None;
    let mut check_size = |p: &Path, img: &GrayImage| -> Result<()> {
        match size {
            None => {
                size = Some(img.dimensions());
                Ok(())
            }
            Some(s) if s == img.dimensions() => Ok(()),
            Some(s) => Err(Error::Dataset(format!(
                "{}: image is {:?}, expected {:?}",
                p.display(),
                img.dimensions(),
                s
            ))),
        }
    };
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = class_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let train_dir = class_dir.join("train").join(GOOD);
        if !train_dir.is_dir() {
            continue;
        }
        let mut train = Vec::new();
        for p in images_in(&train_dir)? {
            let img = read_gray(&p)?;
            check_size(&p, &img)?;
            train.push(NamedImage { name: stem(&p), image: img });
        }
        let mut test = Vec::new();
        let test_dir = class_dir.join("test");
        if test_dir.is_dir() {
            for defect_dir in sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
                let defect = defect_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                for p in images_in(&defect_dir)? {
                    let img = read_gray(&p)?;
                    check_size(&p, &img)?;
                    let n = stem(&p);
                    let mask = if defect == GOOD {
                        vec![0; img.as_raw().len()]
                    } else {
                        let mp = find_mask(&class_dir.join("ground_truth"), &defect, &n).ok_or_else(|| {
                            Error::Dataset(format!("no ground-truth mask for {}", p.display()))
                        })?;
                        let m = read_gray(&mp)?;
                        if m.dimensions() != img.dimensions() {
                            return Err(Error::Dataset(format!("{}: mask size differs from image", mp.display())));
                        }
                        m.as_raw().iter().map(|&v| u8::from(v > 0)).collect()
                    };
                    test.push(TestImage {
                        name: n,
                        defect: defect.clone(),
                        image: img,
                        mask,
                    });
                }
            }
        }
        classes.push(ClassData { name, train, test });
    }
    if classes.is_empty() {
        return Err(Error::Dataset(format!("no classes found under {}", root.display())));
    }
    let (w, h) = size.ok_or_else(|| Error::Dataset(format!("no images found under {}", root.display())))?;
    let spec = DatasetSpec {
        classes,
        image_size: (h as usize, w as usize),
        norm,
    };
    spec.check()?;
    Ok(spec)
}

/// Writes the dataset as PGM files; masks are stored as 0/255.
pub fn save_dataset_dir(spec: &DatasetSpec, root: &Path) -> Result<()> {
    let mk = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    for c in &spec.classes {
        let base = root.join(&c.name);
        let train = base.join("train").join(GOOD);
        mk(&train)?;
        for n in &c.train {
            write_pgm(&train.join(format!("{}.pgm", n.name)), &n.image)?;
        }
        for t in &c.test {
            let dir = base.join("test").join(&t.defect);
            mk(&dir)?;
            write_pgm(&dir.join(format!("{}.pgm", t.name)), &t.image)?;
            if t.is_anomalous() {
                let gt = base.join("ground_truth").join(&t.defect);
                mk(&gt)?;
                let (w, h) = t.image.dimensions();
                let m = GrayImage::from_raw(w, h, t.mask.iter().map(|&v| v * 255).collect()).expect("mask size");
                write_pgm(&gt.join(format!("{}_mask.pgm", t.name)), &m)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;

    #[test]
    fn round_trip_is_pixel_identical() {
        let d = generate_synthetic_dataset(2, 4, 16, 3);
        let dir = tempfile::tempdir().unwrap();
        save_dataset_dir(&d, dir.path()).unwrap();
        let back = load_dataset_dir(dir.path(), d.norm).unwrap();
        assert_eq!(back, d);
        let again = tempfile::tempdir().unwrap();
        save_dataset_dir(&back, again.path()).unwrap();
        let a = fs::read(dir.path().join("class00/train/good/000.pgm")).unwrap();
        let b = fs::read(again.path().join("class00/train/good/000.pgm")).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(b"P5"));
    }

    #[test]
    fn small_tree_counts() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path();
        let img = GrayImage::from_raw(4, 4, (0..16).collect()).unwrap();
        let mask = GrayImage::from_raw(4, 4, (0..16).map(|i| if i == 5 { 255 } else { 0 }).collect()).unwrap();
        for p in ["a/train/good", "a/test/good", "a/test/crack", "a/ground_truth/crack"] {
            fs::create_dir_all(r.join(p)).unwrap();
        }
        write_pgm(&r.join("a/train/good/0.pgm"), &img).unwrap();
        img.save(r.join("a/train/good/1.png")).unwrap();
        write_pgm(&r.join("a/test/good/0.pgm"), &img).unwrap();
        write_pgm(&r.join("a/test/crack/0.pgm"), &img).unwrap();
        write_pgm(&r.join("a/ground_truth/crack/0_mask.pgm"), &mask).unwrap();
        let d = load_dataset_dir(r, Normalization::default()).unwrap();
        assert_eq!((d.classes[0].train.len(), d.classes[0].test.len()), (2, 2));
        let t = d.classes[0].test.iter().find(|t| t.defect == "crack").unwrap();
        assert_eq!(t.mask.iter().filter(|&&m| m == 1).count(), 1);

        fs::remove_file(r.join("a/ground_truth/crack/0_mask.pgm")).unwrap();
        let err = load_dataset_dir(r, Normalization::default()).unwrap_err().to_string();
        assert!(err.contains("0.pgm"), "{err}");
    }
}
