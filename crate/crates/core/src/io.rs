//! Image files, the simulation manifest and corpus loading.
//!
//! Images are single-channel 8- or 16-bit PNG or PGM files mapped linearly to
//! `[0, 1]`. Simulated pairs are stored scaled by a fixed intensity factor so
//! the speckle tail fits the file range; the factor is recorded in the
//! manifest and undone when a corpus is loaded through it.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::speckle::{self, SceneKind, SpeckleError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed image: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("{path}: grayscale required, found {found}")]
    GrayscaleRequired { path: PathBuf, found: String },
    #[error("{path}: unsupported bit depth ({found}); expected 8 or 16 bits")]
    UnsupportedDepth { path: PathBuf, found: String },
    #[error("{path}: unsupported image format (use .png or .pgm)")]
    UnsupportedFormat { path: PathBuf },
    #[error("cannot save tensor of shape {0}; expected a single image")]
    NotAnImage(crate::tensor::Shape),
    #[error("{path}:{line}: bad manifest record: {detail}")]
    Manifest { path: PathBuf, line: usize, detail: String },
    #[error("no images found in {0}")]
    EmptyCorpus(PathBuf),
    #[error(transparent)]
    Speckle(#[from] SpeckleError),
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// Stored sample depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    #[default]
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> f32 {
        match self {
            Self::Eight => 255.0,
            Self::Sixteen => 65535.0,
        }
    }
}

impl std::str::FromStr for BitDepth {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "8" => Ok(Self::Eight),
            "16" => Ok(Self::Sixteen),
            other => Err(format!("bit depth must be 8 or 16, got '{other}'")),
        }
    }
}

fn is_supported(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("png" | "pgm"))
}

/// Reads a grayscale image as `[1, 1, h, w]` with values in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    if !is_supported(path) {
        return Err(IoError::UnsupportedFormat { path: path.to_path_buf() });
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory(&bytes).map_err(|e| IoError::Malformed { path: path.to_path_buf(), detail: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_) => {
            return Err(IoError::UnsupportedDepth { path: path.to_path_buf(), found: "32-bit float".into() })
        }
        other => {
            return Err(IoError::GrayscaleRequired { path: path.to_path_buf(), found: format!("{:?}", other.color()) })
        }
    };
    Ok(Tensor::new([1, 1, h, w], data).expect("decoder returns w·h samples"))
}

/// Writes a `[1, 1, h, w]` tensor, clamped to `[0, 1]` and rounded to `depth`.
pub fn save_image(path: impl AsRef<Path>, t: &Tensor<f32>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(IoError::NotAnImage(s));
    }
    if !is_supported(path) {
        return Err(IoError::UnsupportedFormat { path: path.to_path_buf() });
    }
    let q = |v: f32| (v.clamp(0.0, 1.0) * depth.max_value()).round();
    let (w, h) = (s.w as u32, s.h as u32);
    let img = match depth {
        BitDepth::Eight => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, t.data().iter().map(|&v| q(v) as u8).collect()).expect("sized"),
        ),
        BitDepth::Sixteen => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, t.data().iter().map(|&v| q(v) as u16).collect()).expect("sized"),
        ),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    img.save(path).map_err(|e| IoError::Malformed { path: path.to_path_buf(), detail: e.to_string() })
}

/// One simulated clean/noisy pair. Together with the scene parameters the
/// record regenerates the pair bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub clean_path: String,
    pub noisy_path: String,
    pub looks: f64,
    pub seed: u64,
    pub kind: String,
    pub size: usize,
    pub contrast: f64,
    /// Stored value = intensity × scale.
    pub intensity_scale: f64,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes one JSON object per line.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("plain struct serializes"));
        out.push('\n');
    }
    fs::File::create(path).and_then(|mut f| f.write_all(out.as_bytes())).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| IoError::Manifest { path: path.to_path_buf(), line: i + 1, detail: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// Scene generation settings of `simulate`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulateConfig {
    pub kind: SceneKind,
    pub count: usize,
    pub size: usize,
    pub contrast: f64,
    pub looks: f64,
    pub seed: u64,
    pub intensity_scale: f64,
    pub depth: BitDepth,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::Piecewise,
            count: 32,
            size: 128,
            contrast: 4.0,
            looks: 4.0,
            seed: 0,
            intensity_scale: 1.0 / 16.0,
            depth: BitDepth::Sixteen,
        }
    }
}

/// Generates `count` scenes (seeds `seed, seed+1, …`) into `out_dir/{clean,noisy}`
/// and writes the manifest.
pub fn simulate(out_dir: &Path, cfg: &SimulateConfig) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let seed = cfg.seed + i as u64;
        let scene = speckle::make_scene(cfg.kind, cfg.size, cfg.contrast, cfg.looks, seed)?;
        let id = format!("scene_{i:04}");
        let clean_path = format!("clean/{id}.png");
        let noisy_path = format!("noisy/{id}.png");
        let k = cfg.intensity_scale as f32;
        save_image(out_dir.join(&clean_path), &scene.clean.map(|v| v * k), cfg.depth)?;
        save_image(out_dir.join(&noisy_path), &scene.noisy.map(|v| v * k), cfg.depth)?;
        records.push(ManifestRecord {
            id,
            clean_path,
            noisy_path,
            looks: cfg.looks,
            seed,
            kind: cfg.kind.to_string(),
            size: cfg.size,
            contrast: cfg.contrast,
            intensity_scale: cfg.intensity_scale,
        });
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

/// A named image with its optional clean reference, in intensity units.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub id: String,
    pub noisy: Tensor<f32>,
    pub clean: Option<Tensor<f32>>,
    pub looks: Option<f64>,
}

/// Loads a corpus directory. With a manifest, pairs are read through it and
/// rescaled to intensity units; otherwise every `.png`/`.pgm` file in the
/// directory (sorted by name) is a noisy image without reference.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusItem>> {
    let manifest = dir.join(MANIFEST_FILE);
    let items = if manifest.exists() {
        read_manifest(&manifest)?
            .into_iter()
            .map(|r| {
                let inv = (1.0 / r.intensity_scale) as f32;
                Ok(CorpusItem {
                    noisy: load_image(dir.join(&r.noisy_path))?.map(|v| v * inv),
                    clean: Some(load_image(dir.join(&r.clean_path))?.map(|v| v * inv)),
                    looks: Some(r.looks),
                    id: r.id,
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        list_images(dir)?
            .into_iter()
            .map(|p| {
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok(CorpusItem { noisy: load_image(&p)?, clean: None, looks: None, id })
            })
            .collect::<Result<Vec<_>>>()?
    };
    if items.is_empty() {
        return Err(IoError::EmptyCorpus(dir.to_path_buf()));
    }
    Ok(items)
}

/// Supported image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_supported(p))
        .collect();
    paths.sort();
    Ok(paths)
}
