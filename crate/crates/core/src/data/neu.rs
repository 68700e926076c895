use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma};
use rayon::prelude::*;

use super::{DataError, LabeledImage, CLASS_NAMES, CLASS_PREFIXES};

const IMAGE_EXTENSIONS: [&str; 8] = ["bmp", "jpg", "jpeg", "png", "pgm", "pnm", "tif", "tiff"];

/// Images that loaded plus files that could not be decoded.
#[derive(Debug)]
pub struct LoadReport {
    pub images: Vec<LabeledImage>,
    pub failures: Vec<DataError>,
}

fn normalize(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace(['-', ' '], "_")
}

/// Class index from a directory name (`scratches`, `Rolled-in_Scale`, `Sc`)
/// or a file stem prefix (`Sc_17`).
pub fn class_from_name(name: &str) -> Option<usize> {
    let n = normalize(name);
    if let Some(i) = CLASS_NAMES.iter().position(|c| *c == n) {
        return Some(i);
    }
    let prefix = n.split('_').next().unwrap_or("");
    CLASS_PREFIXES.iter().position(|p| p.to_ascii_lowercase() == prefix)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    v.sort();
    Ok(v)
}

/// Decodes any supported raster as grayscale in `[0, 1]`, resized bilinearly
/// to `height x width`.
pub fn load_gray(path: &Path, height: usize, width: usize) -> Result<Vec<f32>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Decode { path: path.into(), message: e.to_string() })?;
    let mut luma = img.to_luma32f();
    if luma.height() as usize != height || luma.width() as usize != width {
        luma = imageops::resize(&luma, width as u32, height as u32, FilterType::Triangle);
    }
    Ok(luma.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Decodes a mask image (pixels >= 128 are set), nearest-resized.
pub fn load_mask(path: &Path, height: usize, width: usize) -> Result<Vec<bool>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Decode { path: path.into(), message: e.to_string() })?;
    let mut mask: GrayImage = img.to_luma8();
    if mask.height() as usize != height || mask.width() as usize != width {
        let resized: ImageBuffer<Luma<u8>, Vec<u8>> =
            imageops::resize(&mask, width as u32, height as u32, FilterType::Nearest);
        mask = resized;
    }
    Ok(mask.into_raw().into_iter().map(|v| v >= 128).collect())
}

/// Loads a NEU-format directory: either one subdirectory per class or flat
/// files prefixed `Cr_`, `In_`, `Pa_`, `PS_`, `RS_`, `Sc_`. Images are
/// converted to grayscale in `[0, 1]` and resized bilinearly to
/// `height x width`. A `<stem>_mask` file next to an image becomes its mask.
pub fn load_neu(dir: &Path, height: usize, width: usize) -> Result<LoadReport, DataError> {
    if !dir.is_dir() {
        return Err(DataError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} is not a directory", dir.display()),
        )));
    }
    let mut files: Vec<(PathBuf, usize)> = Vec::new();
    for entry in sorted_entries(dir)? {
        if entry.is_dir() {
            let name = entry.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let label = class_from_name(&name).ok_or_else(|| DataError::UnknownClass(entry.clone()))?;
            for f in sorted_entries(&entry)? {
                if is_image(&f) && !stem(&f).ends_with("_mask") {
                    files.push((f, label));
                }
            }
        } else if is_image(&entry) && !stem(&entry).ends_with("_mask") {
            let label = class_from_name(&stem(&entry)).ok_or_else(|| DataError::UnknownClass(entry.clone()))?;
            files.push((entry, label));
        }
    }
    if files.is_empty() {
        return Err(DataError::EmptyDirectory(dir.into()));
    }
    let results: Vec<Result<LabeledImage, DataError>> = files
        .par_iter()
        .map(|(path, label)| {
            let pixels = load_gray(path, height, width)?;
            let mask_path = path.with_file_name(format!(
                "{}_mask.{}",
                stem(path),
                path.extension().and_then(|e| e.to_str()).unwrap_or("")
            ));
            let mask = if mask_path.is_file() { Some(load_mask(&mask_path, height, width)?) } else { None };
            Ok(LabeledImage { pixels, height, width, label: *label, source_id: stem(path), mask })
        })
        .collect();
    let mut report = LoadReport { images: Vec::new(), failures: Vec::new() };
    for r in results {
        match r {
            Ok(img) => report.images.push(img),
            Err(e) => report.failures.push(e),
        }
    }
    Ok(report)
}
