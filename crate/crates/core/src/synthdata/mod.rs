//! Synthetic two-modality image pairs and on-disk datasets.
//!
//! The fixed image is a smooth "anatomy" of anisotropic Gaussian blobs over
//! a low-frequency bias field. The moving image shows the same anatomy
//! through a contrast-inverting intensity map with multiplicative speckle,
//! so the two share structure but not intensities.

mod volume;

pub(crate) use volume::Reader;
pub use volume::{decode_volume, encode_volume, load_volume, save_volume, VOLUME_MAGIC};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::RigidParams2D;
use crate::rng::{derive_seed, seeded, stream};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A fixed/moving pair on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    /// `[C,H,W]` in `[0,1]`.
    pub fixed: Tensor,
    /// `[C,H,W]` in `[0,1]`.
    pub moving: Tensor,
    pub pixel_spacing_mm: f64,
    /// Transform aligning `moving` to `fixed`; identity for generated pairs.
    pub gt_transform: RigidParams2D,
}

impl ImagePair {
    pub fn size(&self) -> usize {
        self.fixed.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.fixed.shape()[0]
    }
}

/// Min-max rescale of one plane into `[0,1]`. A flat plane maps to zeros.
fn normalize(plane: &mut [f32]) {
    let (lo, hi) = plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    for v in plane.iter_mut() {
        *v = if span > 0.0 {
            ((*v - lo) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
}

fn box3(plane: &[f32], size: usize) -> Vec<f32> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            let (mut acc, mut n) = (0.0, 0);
            for yy in y.saturating_sub(1)..=(y + 1).min(size - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(size - 1) {
                    acc += plane[yy * size + xx];
                    n += 1;
                }
            }
            out[y * size + x] = acc / n as f32;
        }
    }
    out
}

struct Blob {
    cx: f32,
    cy: f32,
    sx: f32,
    sy: f32,
    cos: f32,
    sin: f32,
    amp: f32,
}

/// Generates one aligned pair. Pure function of its arguments.
pub fn generate_pair(
    seed: u64,
    size: usize,
    channels: usize,
    spacing_mm: f64,
) -> Result<ImagePair, DataError> {
    if size < 32 {
        return Err(DataError::Invalid(format!(
            "size must be >= 32, got {size}"
        )));
    }
    if channels == 0 {
        return Err(DataError::Invalid("channels must be >= 1".into()));
    }
    if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
        return Err(DataError::Invalid(format!(
            "spacing must be positive, got {spacing_mm}"
        )));
    }
    let mut rng = seeded(seed);
    let s = size as f32;
    let n_blobs = rng.gen_range(6..=12);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| {
            let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
            Blob {
                cx: rng.gen_range(0.15..0.85) * s,
                cy: rng.gen_range(0.15..0.85) * s,
                sx: rng.gen_range(0.04..0.16) * s,
                sy: rng.gen_range(0.04..0.16) * s,
                cos: angle.cos(),
                sin: angle.sin(),
                amp: rng.gen_range(0.3..1.0),
            }
        })
        .collect();
    let bias: [f32; 3] = [
        rng.gen_range(-0.25..0.25),
        rng.gen_range(-0.25..0.25),
        rng.gen_range(-0.15..0.15),
    ];

    let plane = size * size;
    let mut fixed = vec![0.0f32; channels * plane];
    let mut moving = vec![0.0f32; channels * plane];
    for c in 0..channels {
        // Neighbouring channels behave like adjacent slices: same anatomy,
        // slightly different blob extent and contrast.
        let offset = c as f32 - (channels as f32 - 1.0) / 2.0;
        let scale = 1.0 + 0.08 * offset;
        let gains: Vec<f32> = blobs.iter().map(|_| rng.gen_range(0.85..1.15)).collect();
        let f = &mut fixed[c * plane..(c + 1) * plane];
        for y in 0..size {
            let yn = 2.0 * y as f32 / (s - 1.0) - 1.0;
            for x in 0..size {
                let xn = 2.0 * x as f32 / (s - 1.0) - 1.0;
                let mut v = 0.5 + bias[0] * xn + bias[1] * yn + bias[2] * xn * yn;
                for (b, g) in blobs.iter().zip(&gains) {
                    let dx = x as f32 - b.cx;
                    let dy = y as f32 - b.cy;
                    let u = (b.cos * dx + b.sin * dy) / (b.sx * scale);
                    let w = (-b.sin * dx + b.cos * dy) / (b.sy * scale);
                    v += b.amp * g * (-0.5 * (u * u + w * w)).exp();
                }
                f[y * size + x] = v;
            }
        }
        normalize(f);

        let m = &mut moving[c * plane..(c + 1) * plane];
        for (mv, &fv) in m.iter_mut().zip(f.iter()) {
            *mv = (1.0 - fv.powf(0.7)) * rng.gen_range(0.7..1.3);
        }
        let smoothed = box3(m, size);
        m.copy_from_slice(&smoothed);
        normalize(m);
    }

    Ok(ImagePair {
        id: format!("seed{seed}"),
        fixed: Tensor::new([channels, size, size], fixed).expect("shape"),
        moving: Tensor::new([channels, size, size], moving).expect("shape"),
        pixel_spacing_mm: spacing_mm,
        gt_transform: RigidParams2D::IDENTITY,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
}

/// Generation parameters of a dataset; the whole dataset is a pure function
/// of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    pub n: usize,
    pub seed: u64,
    pub size: usize,
    pub channels: usize,
    pub spacing_mm: f64,
}

impl DatasetParams {
    /// 64x64, two channels, 1 mm pixels.
    pub fn desk(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            size: 64,
            channels: 2,
            spacing_mm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub params: DatasetParams,
    pub split_seed: u64,
    pub pairs: Vec<PairEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "air-dataset-1";

/// A dataset directory: manifest plus two volumes per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// Number of training pairs under the 5:1 rule: `round(5n/6)`.
pub fn train_count(n: usize) -> usize {
    (5 * n + 3) / 6
}

/// Shuffled 5:1 partition of `ids`, returned as the split of each id in
/// input order.
pub fn split_ids(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let mut splits = vec![Split::Validation; n];
    for &i in &order[..train_count(n)] {
        splits[i] = Split::Train;
    }
    splits
}

pub fn fixed_path(root: &Path, id: &str) -> PathBuf {
    root.join(format!("{id}_fixed.airvol"))
}

pub fn moving_path(root: &Path, id: &str) -> PathBuf {
    root.join(format!("{id}_moving.airvol"))
}

/// Generates `params.n` pairs into `out_dir`, splits them 5:1 and writes the
/// manifest.
pub fn make_dataset(params: &DatasetParams, out_dir: &Path) -> Result<Dataset, DataError> {
    if params.n < 6 {
        return Err(DataError::Invalid(format!(
            "need at least 6 pairs for a 5:1 split, got {}",
            params.n
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let pair_root = derive_seed(params.seed, stream::PAIRS);
    let mut pairs = Vec::with_capacity(params.n);
    for i in 0..params.n {
        let seed = derive_seed(pair_root, i as u64);
        let id = format!("pair_{i:04}");
        let pair = generate_pair(seed, params.size, params.channels, params.spacing_mm)?;
        save_volume(&pair.fixed, &fixed_path(out_dir, &id))?;
        save_volume(&pair.moving, &moving_path(out_dir, &id))?;
        pairs.push(PairEntry {
            id,
            seed,
            split: Split::Train,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        params: params.clone(),
        split_seed: derive_seed(params.seed, stream::SPLIT),
        pairs,
    };
    let dataset = split(
        Dataset {
            root: out_dir.to_path_buf(),
            manifest,
        },
        derive_seed(params.seed, stream::SPLIT),
    );
    dataset.write_manifest()?;
    Ok(dataset)
}

/// Reassigns the train/validation split with the 5:1 rule.
pub fn split(mut d: Dataset, seed: u64) -> Dataset {
    let splits = split_ids(d.manifest.pairs.len(), seed);
    for (entry, s) in d.manifest.pairs.iter_mut().zip(splits) {
        entry.split = s;
    }
    d.manifest.split_seed = seed;
    d
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DataError> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(DataError::Manifest(format!(
                "unsupported format {:?}",
                manifest.format
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn write_manifest(&self) -> Result<(), DataError> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| DataError::Manifest(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| DataError::io(&path, e))
    }

    pub fn ids(&self, which: Split) -> Vec<&str> {
        self.manifest
            .pairs
            .iter()
            .filter(|p| p.split == which)
            .map(|p| p.id.as_str())
            .collect()
    }

    pub fn load_pair(&self, id: &str) -> Result<ImagePair, DataError> {
        let fixed = load_volume(&fixed_path(&self.root, id))?;
        let moving = load_volume(&moving_path(&self.root, id))?;
        if fixed.shape() != moving.shape() {
            return Err(DataError::Invalid(format!(
                "{id}: fixed {:?} vs moving {:?}",
                fixed.shape(),
                moving.shape()
            )));
        }
        Ok(ImagePair {
            id: id.to_string(),
            fixed,
            moving,
            pixel_spacing_mm: self.manifest.params.spacing_mm,
            gt_transform: RigidParams2D::IDENTITY,
        })
    }

    pub fn load_split(&self, which: Split) -> Result<Vec<ImagePair>, DataError> {
        self.ids(which)
            .into_iter()
            .map(|id| self.load_pair(id))
            .collect()
    }
}
