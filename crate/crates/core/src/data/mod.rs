//! Defect image datasets: NEU-format loading, the fixed train/test split,
//! and a seeded synthetic stand-in with ground-truth masks.

mod neu;
mod pgm;
mod synth;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use neu::{class_from_name, load_gray, load_mask, load_neu, LoadReport};
pub use pgm::{read_pgm, write_dataset, write_pgm, MANIFEST};
pub use synth::{render, synth, SynthConfig};

pub const CLASS_NAMES: [&str; 6] = ["crazing", "inclusion", "patches", "pitted_surface", "rolled_in_scale", "scratches"];
/// File-name prefixes, same order as [`CLASS_NAMES`].
pub const CLASS_PREFIXES: [&str; 6] = ["Cr", "In", "Pa", "PS", "RS", "Sc"];
pub const NUM_CLASSES: usize = 6;
pub const DEFAULT_SIZE: usize = 200;

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub label: usize,
    pub source_id: String,
    /// Ground-truth defect pixels, when known.
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub train: [usize; NUM_CLASSES],
    pub test: [usize; NUM_CLASSES],
}

impl DatasetSplit {
    pub fn counts(&self) -> ClassCounts {
        let mut c = ClassCounts { train: [0; NUM_CLASSES], test: [0; NUM_CLASSES] };
        for i in &self.train {
            c.train[i.label] += 1;
        }
        for i in &self.test {
            c.test[i.label] += 1;
        }
        c
    }

    /// Checks pixel range, labels, sizes and train/test disjointness.
    pub fn validate(&self) -> Result<(), DataError> {
        for img in self.train.iter().chain(&self.test) {
            check_image(img)?;
        }
        let train_ids: std::collections::HashSet<&str> = self.train.iter().map(|i| i.source_id.as_str()).collect();
        if let Some(dup) = self.test.iter().find(|i| train_ids.contains(i.source_id.as_str())) {
            return Err(DataError::Overlap(dup.source_id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no images found in {0}")]
    EmptyDirectory(PathBuf),
    #[error("cannot tell the defect class of {0}")]
    UnknownClass(PathBuf),
    #[error("class `{class}` has {count} images, at least 2 are needed")]
    TooFewImages { class: &'static str, count: usize },
    #[error("image set is empty")]
    Empty,
    #[error("image `{0}` has pixels outside [0, 1], a bad label or a bad size")]
    Invalid(String),
    #[error("image `{0}` appears in both train and test")]
    Overlap(String),
    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_image(img: &LabeledImage) -> Result<(), DataError> {
    let ok = img.label < NUM_CLASSES
        && img.pixels.len() == img.height * img.width
        && img.pixels.iter().all(|p| (0.0..=1.0).contains(p))
        && img.mask.as_ref().is_none_or(|m| m.len() == img.pixels.len());
    if ok {
        Ok(())
    } else {
        Err(DataError::Invalid(img.source_id.clone()))
    }
}

/// Per class, sorts by source id and assigns the first 240 images to train
/// and the next 60 to test when the class has at least 300 images; smaller
/// classes are split 80/20.
pub fn split_neu(images: Vec<LabeledImage>) -> Result<DatasetSplit, DataError> {
    if images.is_empty() {
        return Err(DataError::Empty);
    }
    let mut by_class: BTreeMap<usize, Vec<LabeledImage>> = BTreeMap::new();
    for img in images {
        check_image(&img)?;
        by_class.entry(img.label).or_default().push(img);
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    for (label, name) in CLASS_NAMES.iter().enumerate() {
        let mut imgs = by_class.remove(&label).unwrap_or_default();
        if imgs.len() < 2 {
            return Err(DataError::TooFewImages { class: name, count: imgs.len() });
        }
        imgs.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        let (n_train, n_test) = if imgs.len() >= 300 {
            (240, 60)
        } else {
            let t = ((imgs.len() as f64 * 0.8).round() as usize).clamp(1, imgs.len() - 1);
            (t, imgs.len() - t)
        };
        let mut it = imgs.into_iter();
        split.train.extend(it.by_ref().take(n_train));
        split.test.extend(it.take(n_test));
    }
    split.validate()?;
    Ok(split)
}

/// Mean and population standard deviation over every pixel.
pub fn mean_std(images: &[LabeledImage]) -> Result<(f64, f64), DataError> {
    let n: usize = images.iter().map(|i| i.pixels.len()).sum();
    if n == 0 {
        return Err(DataError::Empty);
    }
    let sum: f64 = images.iter().flat_map(|i| &i.pixels).map(|&p| p as f64).sum();
    let mean = sum / n as f64;
    let var: f64 = images.iter().flat_map(|i| &i.pixels).map(|&p| (p as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(label: usize, id: &str, v: f32) -> LabeledImage {
        LabeledImage { pixels: vec![v; 4], height: 2, width: 2, label, source_id: id.into(), mask: None }
    }

    fn balanced(per_class: usize) -> Vec<LabeledImage> {
        (0..NUM_CLASSES)
            .flat_map(|c| (0..per_class).map(move |i| img(c, &format!("{}_{i}", CLASS_PREFIXES[c]), 0.5)))
            .collect()
    }

    #[test]
    fn per_class_protocol_counts() {
        let split = split_neu(balanced(300)).unwrap();
        assert_eq!(split.train.len(), 1440);
        assert_eq!(split.test.len(), 360);
        assert_eq!(split.counts().test, [60; 6]);
        assert_eq!(split.counts().train, [240; 6]);
    }

    #[test]
    fn split_ignores_input_order() {
        let mut imgs = balanced(10);
        let a = split_neu(imgs.clone()).unwrap();
        imgs.reverse();
        imgs.swap(3, 40);
        let b = split_neu(imgs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counts().train, [8; 6]);
        // lexicographic: Cr_0, Cr_1 go to train before Cr_2..; Cr_8, Cr_9 test
        let test_cr: Vec<&str> = a.test.iter().filter(|i| i.label == 0).map(|i| i.source_id.as_str()).collect();
        assert_eq!(test_cr, ["Cr_8", "Cr_9"]);
    }

    #[test]
    fn tiny_class_is_an_error() {
        let mut imgs = balanced(4);
        imgs.retain(|i| !(i.label == 3 && i.source_id != "PS_0"));
        assert!(matches!(split_neu(imgs), Err(DataError::TooFewImages { class: "pitted_surface", count: 1 })));
    }

    #[test]
    fn statistics() {
        assert_eq!(mean_std(&[img(0, "a", 0.5), img(1, "b", 0.5)]).unwrap(), (0.5, 0.0));
        let mut board = img(0, "c", 0.0);
        board.pixels = vec![0.0, 1.0, 1.0, 0.0];
        assert_eq!(mean_std(&[board]).unwrap(), (0.5, 0.5));
        assert!(mean_std(&[]).is_err());
    }
}
