//! Dataset manifests, synthetic data generation, and image loading.
//!
//! Manifests are CSV with header `path,label,pai_type,dataset_id,subject_id`
//! and an optional leading `#version=1` directive line. Image paths resolve
//! relative to the manifest file's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::metrics::Label;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_HEADER: &str = "path,label,pai_type,dataset_id,subject_id";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Resolved path (relative entries are joined onto the manifest dir).
    pub path: PathBuf,
    pub label: Label,
    pub pai_type: String,
    pub dataset_id: String,
    pub subject_id: Option<String>,
}

impl ManifestEntry {
    pub fn class_label(&self) -> u8 {
        match self.label {
            Label::Bonafide => 0,
            Label::Attack => 1,
        }
    }
}

fn manifest_err(path: &Path, line: usize, reason: impl Into<String>) -> DataError {
    DataError::ManifestLine {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

/// Strict manifest parser: exact header, vocabulary-checked labels,
/// label/PAI consistency, existing unique paths. Errors carry 1-based line
/// numbers.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Manifest {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut lines = text.lines().enumerate().peekable();
    // optional version directive
    if let Some((_, first)) = lines.peek() {
        if let Some(v) = first.strip_prefix("#version=") {
            let version: u32 = v
                .trim()
                .parse()
                .map_err(|_| manifest_err(path, 1, format!("bad version directive {first:?}")))?;
            if version != MANIFEST_VERSION {
                return Err(manifest_err(
                    path,
                    1,
                    format!("unsupported manifest version {version} (expected {MANIFEST_VERSION})"),
                ));
            }
            lines.next();
        }
    }

    let (header_line, header) = lines
        .next()
        .ok_or_else(|| manifest_err(path, 1, "empty file: missing header row"))?;
    if header.trim() != MANIFEST_HEADER {
        return Err(manifest_err(
            path,
            header_line + 1,
            format!("header must be {MANIFEST_HEADER:?}, got {header:?}"),
        ));
    }

    let mut entries = Vec::new();
    let mut seen_paths: HashSet<String> = HashSet::new();
    let mut duplicates: Vec<usize> = Vec::new();
    let mut missing: Vec<usize> = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 5 {
            return Err(manifest_err(
                path,
                line_no,
                format!("expected 5 columns, got {}", fields.len()),
            ));
        }
        let (raw_path, label_s, pai, dataset, subject) =
            (fields[0].trim(), fields[1].trim(), fields[2].trim(), fields[3].trim(), fields[4].trim());
        if raw_path.is_empty() {
            return Err(manifest_err(path, line_no, "empty path"));
        }
        let label: Label = label_s
            .parse()
            .map_err(|e: crate::error::MetricsError| manifest_err(path, line_no, e.to_string()))?;
        match label {
            Label::Attack if pai.is_empty() => {
                return Err(manifest_err(path, line_no, "attack row needs a pai_type"));
            }
            Label::Bonafide if !pai.is_empty() => {
                return Err(manifest_err(
                    path,
                    line_no,
                    format!("bonafide row must leave pai_type empty, got {pai:?}"),
                ));
            }
            _ => {}
        }
        if dataset.is_empty() {
            return Err(manifest_err(path, line_no, "empty dataset_id"));
        }
        if !seen_paths.insert(raw_path.to_string()) {
            duplicates.push(line_no);
        }
        let resolved = if Path::new(raw_path).is_absolute() {
            PathBuf::from(raw_path)
        } else {
            base.join(raw_path)
        };
        if !resolved.exists() {
            missing.push(line_no);
        }
        entries.push(ManifestEntry {
            path: resolved,
            label,
            pai_type: pai.to_string(),
            dataset_id: dataset.to_string(),
            subject_id: if subject.is_empty() {
                None
            } else {
                Some(subject.to_string())
            },
        });
    }
    if !duplicates.is_empty() {
        return Err(DataError::Manifest {
            path: path.display().to_string(),
            reason: format!("duplicate paths at lines {duplicates:?}"),
        });
    }
    if !missing.is_empty() {
        return Err(DataError::Manifest {
            path: path.display().to_string(),
            reason: format!("missing image files at lines {missing:?}"),
        });
    }
    if entries.is_empty() {
        log::warn!("manifest {} has a header but no rows", path.display());
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = format!("#version={MANIFEST_VERSION}\n{MANIFEST_HEADER}\n");
    for e in entries {
        let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rel.display(),
            match e.label {
                Label::Bonafide => "bonafide",
                Label::Attack => "attack",
            },
            e.pai_type,
            e.dataset_id,
            e.subject_id.clone().unwrap_or_default()
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Synthetic dataset recipe. Bonafide images are smooth ridge sinusoids;
/// attacks overlay high-frequency texture plus a brightness offset per fake
/// PAI tag, making the classes separable by design at toy scale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub n_bonafide: usize,
    pub n_attack: usize,
    pub pai_types: Vec<String>,
    pub seed: u64,
    pub dataset_id: String,
    #[serde(default = "default_noise_amp")]
    pub noise_amp: f64,
    #[serde(default = "default_brightness_offset")]
    pub brightness_offset: f64,
}

fn default_noise_amp() -> f64 {
    0.10
}

fn default_brightness_offset() -> f64 {
    0.12
}

impl SyntheticSpec {
    pub fn toy(dataset_id: &str, seed: u64) -> Self {
        Self {
            image_size: 64,
            n_bonafide: 16,
            n_attack: 16,
            pai_types: vec!["FAKE_A".into(), "FAKE_B".into()],
            seed,
            dataset_id: dataset_id.into(),
            noise_amp: default_noise_amp(),
            brightness_offset: default_brightness_offset(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| {
            Err(DataError::Manifest {
                path: "<synthetic spec>".into(),
                reason: m.into(),
            })
        };
        if self.image_size < 8 {
            return bad("image_size must be >= 8");
        }
        if self.n_attack > 0 && self.pai_types.is_empty() {
            return bad("attack samples need at least one pai_type");
        }
        if self.dataset_id.is_empty() {
            return bad("dataset_id must be non-empty");
        }
        Ok(())
    }
}

fn ridge_value(x: usize, y: usize, size: usize, freq: f64, theta: f64, phase: f64) -> f64 {
    let (xs, ys) = (x as f64 / size as f64, y as f64 / size as f64);
    let t = xs * theta.cos() + ys * theta.sin();
    0.55 + 0.28 * (2.0 * std::f64::consts::PI * freq * t + phase).sin()
}

fn render_image(
    size: usize,
    rng: &mut ChaCha8Rng,
    attack: Option<(usize, f64, f64)>, // (pai index, noise_amp, brightness)
) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let freq = 4.0 + rng.random::<f64>() * 3.0;
    let theta = rng.random::<f64>() * std::f64::consts::PI;
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let hf_phase = rng.random::<f64>() * std::f64::consts::TAU;
    ImageBuffer::from_fn(size as u32, size as u32, |px, py| {
        let (x, y) = (px as usize, py as usize);
        let mut v = ridge_value(x, y, size, freq, theta, phase);
        if let Some((pai_idx, amp, offset)) = attack {
            // near-Nyquist checker plus a per-PAI frequency accent
            let parity = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            let accent =
                ((x as f64 * (0.9 + 0.2 * pai_idx as f64) + hf_phase).sin() * 0.5 + 0.5) * 0.04;
            v += amp * parity + offset + accent;
        }
        let to_u8 = |f: f64| (f.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([to_u8(v * 0.95), to_u8(v), to_u8(v * 0.90)])
    })
}

/// Deterministically generate PNGs plus a manifest under `out_dir`.
/// Returns the entries written to `out_dir/manifest.csv`.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>, DataError> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::new();
    for i in 0..spec.n_bonafide {
        let img = render_image(spec.image_size, &mut rng, None);
        let file = images_dir.join(format!("bonafide_{i:04}.png"));
        img.save(&file).map_err(|e| DataError::Image {
            path: file.display().to_string(),
            reason: e.to_string(),
        })?;
        entries.push(ManifestEntry {
            path: file,
            label: Label::Bonafide,
            pai_type: String::new(),
            dataset_id: spec.dataset_id.clone(),
            subject_id: Some(format!("s{:03}", i / 4)),
        });
    }
    for i in 0..spec.n_attack {
        let pai_idx = i % spec.pai_types.len().max(1);
        let img = render_image(
            spec.image_size,
            &mut rng,
            Some((pai_idx, spec.noise_amp, spec.brightness_offset)),
        );
        let file = images_dir.join(format!("attack_{i:04}.png"));
        img.save(&file).map_err(|e| DataError::Image {
            path: file.display().to_string(),
            reason: e.to_string(),
        })?;
        entries.push(ManifestEntry {
            path: file,
            label: Label::Attack,
            pai_type: spec.pai_types[pai_idx].clone(),
            dataset_id: spec.dataset_id.clone(),
            subject_id: Some(format!("s{:03}", 100 + i / 4)),
        });
    }
    write_manifest(&out_dir.join("manifest.csv"), &entries)?;
    Ok(entries)
}

/// 8-bit RGB, scaled to [0,1], bilinear-resized to `size` when needed.
/// Returns `[3, size, size]`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.width() as usize != size || rgb.height() as usize != size {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    } else {
        rgb
    };
    let mut t = Tensor::<f32>::zeros(&[3, size, size]);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            t.data_mut()[c * size * size + y as usize * size + x as usize] =
                p.0[c] as f32 / 255.0;
        }
    }
    Ok(t)
}

/// Mean pixel intensity of a tensor image, the statistic the synthetic
/// classes are separated by.
pub fn mean_intensity(t: &Tensor<f32>) -> f64 {
    t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64
}
