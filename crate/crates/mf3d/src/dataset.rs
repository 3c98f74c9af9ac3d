//! Dataset directories: PPM images, `annotations.txt` and `manifest.txt`.
//!
//! The manifest has one `path width height` line per image, paths relative
//! to the dataset directory. Image heights recorded there drive the raster
//! to bottom-left conversion of the annotation file.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use mf3d_core::training::AnnotatedImage;
use mf3d_core::FeatureMap;

use crate::error::{CliError, Result};
use crate::records::{parse_annotations, AnnotationRecord};

pub const MANIFEST: &str = "manifest.txt";
pub const ANNOTATIONS: &str = "annotations.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: String,
    pub width: usize,
    pub height: usize,
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    entries.iter().map(|e| format!("{} {} {}\n", e.image, e.width, e.height)).collect()
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let error = |message: String| CliError::Format { path: path.to_path_buf(), line: i + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [image, w, h] = fields[..] else {
            return Err(error(format!("expected `path width height`, found {line:?}")));
        };
        let dim = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| error(format!("bad image dimension {s:?}")));
        out.push(ManifestEntry { image: image.to_string(), width: dim(w)?, height: dim(h)? });
    }
    Ok(out)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(path, &read_text(path)?)
}

/// Writes an RGB map with values in `[0, 1]` as an 8-bit binary PPM.
pub fn write_ppm(path: &Path, image: &FeatureMap) -> Result<()> {
    if image.channels != 3 {
        return Err(CliError::Invalid(format!("expected an RGB map, got {} channels", image.channels)));
    }
    let (w, h) = (image.width, image.height);
    let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    // raster row 0 is the top row, i.e. the last row of the map
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let row = h - 1 - y as usize;
        image::Rgb(std::array::from_fn(|c| to_byte(image.at(c, row, x as usize))))
    });
    img.save_with_format(path, ImageFormat::Pnm).map_err(|source| CliError::Image { path: path.to_path_buf(), source })
}

pub fn read_ppm(path: &Path) -> Result<FeatureMap> {
    let img = image::ImageReader::open(path)
        .map_err(|e| CliError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CliError::io(path, e))?
        .decode()
        .map_err(|source| CliError::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut map = FeatureMap::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            *map.at_mut(c, h - 1 - y as usize, x as usize) = f64::from(px[c]) / 255.0;
        }
    }
    Ok(map)
}

/// A loaded dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Vec<ManifestEntry>,
    pub annotations: Vec<AnnotationRecord>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(CliError::Invalid(format!("dataset directory {} not found", dir.display())));
        }
        let manifest = read_manifest(&dir.join(MANIFEST))?;
        let path = dir.join(ANNOTATIONS);
        let annotations = parse_annotations(&path, &read_text(&path)?)?;
        Ok(Self { dir: dir.to_path_buf(), manifest, annotations })
    }

    /// Image sizes keyed by image path.
    pub fn sizes(&self) -> HashMap<&str, (usize, usize)> {
        self.manifest.iter().map(|e| (e.image.as_str(), (e.width, e.height))).collect()
    }

    /// Every annotated image with faces in library coordinates.
    pub fn load_images(&self) -> Result<Vec<AnnotatedImage>> {
        let sizes = self.sizes();
        self.annotations
            .iter()
            .map(|rec| {
                let &(w, h) = sizes
                    .get(rec.image.as_str())
                    .ok_or_else(|| CliError::Invalid(format!("{} is annotated but missing from the manifest", rec.image)))?;
                let path = self.dir.join(&rec.image);
                let image = read_ppm(&path)?;
                if (image.width, image.height) != (w, h) {
                    return Err(CliError::Invalid(format!(
                        "{}: image is {}x{}, manifest says {w}x{h}",
                        path.display(),
                        image.width,
                        image.height
                    )));
                }
                let faces = rec
                    .faces
                    .iter()
                    .map(|f| f.to_truth(w, h))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| CliError::Invalid(format!("{}: {e}", rec.image)))?;
                Ok(AnnotatedImage { image, faces })
            })
            .collect()
    }
}
