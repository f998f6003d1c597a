//! Labeled datasets: IDX ingestion, per-dataset standardization, synthetic
//! ID/OOD generators and the two shifting augmentations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{put_f32s_le, put_u32_le, Reader};
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const NORMALIZER_MAGIC: &[u8; 4] = b"WMKN";

/// `n x d` inputs with integer labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    spatial: Option<(usize, usize)>,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize, spatial: Option<(usize, usize)>) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::invalid(format!("inputs must be n x d, got shape {:?}", inputs.shape())));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::invalid(format!("label {bad} outside [0, {class_count})")));
        }
        if let Some((h, w)) = spatial {
            if h * w != inputs.row_len() {
                return Err(Error::invalid(format!(
                    "spatial shape {h}x{w} does not cover {} features",
                    inputs.row_len()
                )));
            }
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            class_count,
            spatial,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.row_len()
    }

    pub fn spatial(&self) -> Option<(usize, usize)> {
        self.spatial
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn with_inputs(&self, inputs: Tensor) -> Result<Self> {
        LabeledDataset::new(inputs, self.labels.clone(), self.class_count, self.spatial)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        LabeledDataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            spatial: self.spatial,
        }
    }
}

/// Raw contents of an IDX `u8` image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    /// Pixels scaled to `[0, 1]`, one image per row.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            vec![self.count, self.rows * self.cols],
            self.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        )
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut r = Reader::new(bytes);
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(4, "image file has a zero dimension"));
    }
    let pixels = r.take(count * rows * cols, "pixels")?.to_vec();
    r.finish()?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader::new(bytes);
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = r.u32_be("label count")? as usize;
    let labels = r.take(count, "labels")?.to_vec();
    r.finish()?;
    Ok(labels)
}

/// Decodes an image/label file pair. Pixels are scaled to `[0, 1]`; apply a
/// [`Normalizer`] afterwards to standardize.
pub fn decode_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledDataset> {
    let images = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != images.count {
        return Err(Error::format(
            4,
            format!("label file has {} entries, image file has {}", labels.len(), images.count),
        ));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    LabeledDataset::new(images.to_tensor()?, labels, class_count, Some((images.rows, images.cols)))
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    decode_idx(&std::fs::read(images_path)?, &std::fs::read(labels_path)?)
}

/// Unlabeled images (e.g. an OOD set) scaled to `[0, 1]`.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<(Tensor, (usize, usize))> {
    let images = parse_idx_images(&std::fs::read(path)?)?;
    Ok((images.to_tensor()?, (images.rows, images.cols)))
}

/// Re-encodes `[0, 1]`-scaled inputs as an IDX image file.
pub fn encode_idx_images(inputs: &Tensor, spatial: (usize, usize)) -> Result<Vec<u8>> {
    let (h, w) = spatial;
    if h * w != inputs.row_len() {
        return Err(Error::invalid("spatial shape does not match row length"));
    }
    let mut out = Vec::with_capacity(16 + inputs.len());
    for v in [IDX_IMAGES_MAGIC, inputs.rows() as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(inputs.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &y in labels {
        out.push(u8::try_from(y).map_err(|_| Error::invalid(format!("label {y} does not fit in a byte")))?);
    }
    Ok(out)
}

/// Affine standardization `(x - mean) / std`, either with one global
/// statistic pair or with one pair per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl Normalizer {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(Error::invalid("mean and std must be non-empty and equally long"));
        }
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("std must be positive and all statistics finite"));
        }
        Ok(Normalizer { mean, std })
    }

    pub fn identity() -> Self {
        Normalizer {
            mean: vec![0.0],
            std: vec![1.0],
        }
    }

    /// One mean/std pair over every element of `inputs`.
    pub fn fit_global(inputs: &Tensor) -> Self {
        let mean = inputs.mean();
        let var = inputs
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / inputs.len() as f64;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        Normalizer {
            mean: vec![mean as f32],
            std: vec![std as f32],
        }
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn std(&self) -> &[f32] {
        &self.std
    }

    fn stat(&self, j: usize) -> (f64, f64) {
        let k = if self.mean.len() == 1 { 0 } else { j };
        (self.mean[k] as f64, self.std[k] as f64)
    }

    pub fn apply(&self, inputs: &Tensor) -> Result<Tensor> {
        let d = inputs.row_len();
        if self.mean.len() != 1 && self.mean.len() != d {
            return Err(Error::invalid(format!(
                "normalizer has {} statistics, inputs have {d} features",
                self.mean.len()
            )));
        }
        let data = inputs
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (m, s) = self.stat(i % d);
                ((v as f64 - m) / s) as f32
            })
            .collect();
        Tensor::new(inputs.shape().to_vec(), data)
    }

    pub fn apply_dataset(&self, data: &LabeledDataset) -> Result<LabeledDataset> {
        data.with_inputs(self.apply(data.inputs())?)
    }

    /// `"WMKN" | u32 k | k f32 means | k f32 stds`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.mean.len());
        out.extend_from_slice(NORMALIZER_MAGIC);
        put_u32_le(&mut out, self.mean.len() as u32);
        put_f32s_le(&mut out, &self.mean);
        put_f32s_le(&mut out, &self.std);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(NORMALIZER_MAGIC)?;
        let k = r.u32_le("statistic count")? as usize;
        let at = r.offset();
        let mean = r.f32_vec_le(k, "means")?;
        let std = r.f32_vec_le(k, "stds")?;
        r.finish()?;
        Normalizer::new(mean, std).map_err(|e| Error::format(at, e.to_string()))
    }
}

/// `classes` unit-variance isotropic Gaussians centred at
/// `(separation / sqrt 2) e_k`, so every pair of centres is `separation`
/// apart. Labels cycle through the classes. Needs `dim >= classes`.
pub fn gaussian_blobs(classes: usize, dim: usize, separation: f64, n: usize, rng: &mut SeededRng) -> Result<LabeledDataset> {
    if n == 0 || classes == 0 {
        return Err(Error::invalid("need n >= 1 and at least one class"));
    }
    if dim < classes {
        return Err(Error::invalid(format!("dimension {dim} cannot host {classes} equidistant centres")));
    }
    let offset = separation / std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(n * dim);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &y in &labels {
        for j in 0..dim {
            let centre = if j == y { offset } else { 0.0 };
            data.push((centre + rng.standard_normal()) as f32);
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, dim], data)?, labels, classes, None)
}

/// Unlabeled samples uniform in `[-3, 3]^dim`.
pub fn uniform_box(dim: usize, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
    if n == 0 || dim == 0 {
        return Err(Error::invalid("need n >= 1 and dim >= 1"));
    }
    let data = (0..n * dim).map(|_| rng.uniform_range(-3.0, 3.0) as f32).collect();
    Tensor::new(vec![n, dim], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    GaussianBlobs { classes: usize, dim: usize, separation: f64 },
    UniformBox { dim: usize },
}

#[derive(Debug, Clone)]
pub enum Synthetic {
    Labeled(LabeledDataset),
    Unlabeled(Tensor),
}

pub fn make_synthetic(kind: SyntheticKind, n: usize, rng: &mut SeededRng) -> Result<Synthetic> {
    match kind {
        SyntheticKind::GaussianBlobs {
            classes,
            dim,
            separation,
        } => gaussian_blobs(classes, dim, separation, n, rng).map(Synthetic::Labeled),
        SyntheticKind::UniformBox { dim } => uniform_box(dim, n, rng).map(Synthetic::Unlabeled),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Random non-identity permutation of the four 2x2 quadrant blocks.
    Permute,
    /// Clockwise quarter turn.
    Rotate,
}

/// All 24 orderings of the four quadrants, identity first.
fn quadrant_permutations() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    let mut seen = [false; 4];
                    if p.iter().all(|&q| !std::mem::replace(&mut seen[q], true)) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// Applies a shifting augmentation to one `h x w` image stored row-major.
/// Rotation turns an `h x w` image into a `w x h` one.
pub fn shift_image(x: &[f32], (h, w): (usize, usize), kind: ShiftKind, rng: &mut SeededRng) -> Result<Vec<f32>> {
    if h * w != x.len() {
        return Err(Error::invalid(format!("{h}x{w} image needs {} values, got {}", h * w, x.len())));
    }
    match kind {
        ShiftKind::Rotate => {
            // out has shape w x h; out[i][j] = in[h-1-j][i]
            let mut out = Vec::with_capacity(x.len());
            for i in 0..w {
                for j in 0..h {
                    out.push(x[(h - 1 - j) * w + i]);
                }
            }
            Ok(out)
        }
        ShiftKind::Permute => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::invalid(format!("permute needs even spatial dims, got {h}x{w}")));
            }
            let perms = quadrant_permutations();
            let perm = perms[1 + rng.below(perms.len() - 1)];
            Ok(permute_quadrants(x, (h, w), perm))
        }
    }
}

/// Output quadrant `q` (0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right) takes input quadrant `perm[q]`.
pub fn permute_quadrants(x: &[f32], (h, w): (usize, usize), perm: [usize; 4]) -> Vec<f32> {
    let (qh, qw) = (h / 2, w / 2);
    let mut out = vec![0.0; x.len()];
    for (q, &src) in perm.iter().enumerate() {
        let (dr, dc) = ((q / 2) * qh, (q % 2) * qw);
        let (sr, sc) = ((src / 2) * qh, (src % 2) * qw);
        for r in 0..qh {
            for c in 0..qw {
                out[(dr + r) * w + dc + c] = x[(sr + r) * w + sc + c];
            }
        }
    }
    out
}

/// Shifting augmentation of a tensor of shape `[h, w]`.
pub fn augment_shift(x: &Tensor, kind: ShiftKind, rng: &mut SeededRng) -> Result<Tensor> {
    let &[h, w] = x.shape() else {
        return Err(Error::invalid(format!("expected an [h, w] tensor, got {:?}", x.shape())));
    };
    let out = shift_image(x.data(), (h, w), kind, rng)?;
    let shape = match kind {
        ShiftKind::Rotate => vec![w, h],
        ShiftKind::Permute => vec![h, w],
    };
    Tensor::new(shape, out)
}
