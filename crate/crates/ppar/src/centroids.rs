//! Masked per-class feature centroids and the EMA prototype bank used by the
//! naive-prototype baselines.
//!
//! A centroid is the mean feature column over every position a class labels
//! at feature resolution. Batch centroids pool positions across all images
//! before dividing — one global denominator, not a mean of per-image means —
//! so images contribute proportionally to their pixel counts.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::catalog::ClassCatalog;
use crate::error::{Error, Result};

/// Backbone stages a feature tap can come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    S1,
    S2,
    S3,
    S4,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::S1, Stage::S2, Stage::S3, Stage::S4];

    pub fn index(self) -> usize {
        match self {
            Stage::S1 => 0,
            Stage::S2 => 1,
            Stage::S3 => 2,
            Stage::S4 => 3,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::S1 => "s1",
            Stage::S2 => "s2",
            Stage::S3 => "s3",
            Stage::S4 => "s4",
        };
        f.write_str(name)
    }
}

/// One intermediate activation map, channel-first `(C, H_f, W_f)`, tagged
/// with its stage and its downsampling factor relative to the input image.
#[derive(Debug, Clone)]
pub struct FeatureTap {
    pub stage: Stage,
    pub map: Array3<f64>,
    pub stride: usize,
}

impl FeatureTap {
    pub fn new(stage: Stage, map: Array3<f64>, stride: usize) -> Result<Self> {
        let (_, h, w) = map.dim();
        if h == 0 || w == 0 || stride == 0 {
            return Err(Error::Validation(format!(
                "feature tap {stage} must have positive extent and stride"
            )));
        }
        Ok(Self { stage, map, stride })
    }

    pub fn channels(&self) -> usize {
        self.map.dim().0
    }
}

/// Per-class centroid with the number of positions behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCentroid {
    pub vector: Array1<f64>,
    pub count: usize,
}

/// Centroids for one batch at one stage; entry `n` is `None` when class `n`
/// labeled no position.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidReport {
    pub stage: Stage,
    pub dim: usize,
    pub per_class: Vec<Option<ClassCentroid>>,
}

impl CentroidReport {
    pub fn present_classes(&self) -> impl Iterator<Item = (u8, &ClassCentroid)> {
        self.per_class
            .iter()
            .enumerate()
            .filter_map(|(id, c)| c.as_ref().map(|c| (id as u8, c)))
    }

    pub fn any_present(&self) -> bool {
        self.per_class.iter().any(|c| c.is_some())
    }
}

/// Nearest-neighbor label downsampling to feature resolution.
///
/// Output position `i` reads source row `floor((i + 0.5) · H / H_f)`; labels
/// (including the ignore value) are copied, never interpolated.
pub fn downsample_labels(mask: &Array2<u8>, target: (usize, usize)) -> Result<Array2<u8>> {
    let (h, w) = mask.dim();
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Validation("downsample target must be nonzero".into()));
    }
    if th > h || tw > w {
        return Err(Error::Validation(format!(
            "downsample target {th}x{tw} exceeds source {h}x{w}"
        )));
    }
    Ok(Array2::from_shape_fn((th, tw), |(i, j)| {
        let sy = ((i as f64 + 0.5) * h as f64 / th as f64).floor() as usize;
        let sx = ((j as f64 + 0.5) * w as f64 / tw as f64).floor() as usize;
        mask[(sy.min(h - 1), sx.min(w - 1))]
    }))
}

/// Mean feature column over positions labeled `class_id`, with the count of
/// contributing positions. `None` when the class is absent.
pub fn class_centroid(
    map: &Array3<f64>,
    mask_f: &Array2<u8>,
    class_id: u8,
) -> Result<Option<ClassCentroid>> {
    let (c, h, w) = map.dim();
    if mask_f.dim() != (h, w) {
        return Err(Error::Validation(format!(
            "mask {:?} does not match feature map {h}x{w}",
            mask_f.dim()
        )));
    }
    let mut sum = Array1::<f64>::zeros(c);
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask_f[(y, x)] == class_id {
                for ch in 0..c {
                    sum[ch] += map[(ch, y, x)];
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(None);
    }
    sum.mapv_inplace(|v| v / count as f64);
    Ok(Some(ClassCentroid { vector: sum, count }))
}

/// Pool class centroids across a whole batch of taps: sums and counts
/// accumulate over every image before the single division.
pub fn batch_centroids(
    taps: &[&FeatureTap],
    masks_f: &[Array2<u8>],
    catalog: &ClassCatalog,
) -> Result<CentroidReport> {
    if taps.is_empty() || taps.len() != masks_f.len() {
        return Err(Error::Validation(format!(
            "batch_centroids needs matching nonempty taps/masks, got {}/{}",
            taps.len(),
            masks_f.len()
        )));
    }
    let stage = taps[0].stage;
    let dim = taps[0].channels();
    let n = catalog.n_classes();
    let mut sums = vec![Array1::<f64>::zeros(dim); n];
    let mut counts = vec![0usize; n];

    for (tap, mask_f) in taps.iter().zip(masks_f) {
        if tap.stage != stage || tap.channels() != dim {
            return Err(Error::Validation(
                "all taps in a batch must share stage and channel count".into(),
            ));
        }
        let (c, h, w) = tap.map.dim();
        if mask_f.dim() != (h, w) {
            return Err(Error::Validation(format!(
                "mask {:?} does not match tap {h}x{w}",
                mask_f.dim()
            )));
        }
        for y in 0..h {
            for x in 0..w {
                let label = mask_f[(y, x)];
                if label == catalog.ignore_index() {
                    continue;
                }
                let idx = label as usize;
                if idx >= n {
                    return Err(Error::Validation(format!(
                        "label {label} outside catalog of {n} classes"
                    )));
                }
                for ch in 0..c {
                    sums[idx][ch] += tap.map[(ch, y, x)];
                }
                counts[idx] += 1;
            }
        }
    }

    let per_class = sums
        .into_iter()
        .zip(counts)
        .map(|(sum, count)| {
            (count > 0).then(|| ClassCentroid {
                vector: sum / count as f64,
                count,
            })
        })
        .collect();
    Ok(CentroidReport {
        stage,
        dim,
        per_class,
    })
}

/// Adjoint of [`batch_centroids`]: scatter per-class centroid cotangents
/// back onto the feature maps that produced the report.
///
/// Every position labeled `n` contributed `1/count_n` of its feature column
/// to centroid `n`, so it receives `grad_n / count_n`. Accumulates into
/// `grad_maps` (one per image, same shape as the corresponding tap).
pub fn scatter_centroid_grads(
    grad_maps: &mut [Array3<f64>],
    masks_f: &[Array2<u8>],
    report: &CentroidReport,
    grads: &[Option<Array1<f64>>],
) -> Result<()> {
    if grad_maps.len() != masks_f.len() {
        return Err(Error::Validation(format!(
            "scatter got {} grad maps but {} masks",
            grad_maps.len(),
            masks_f.len()
        )));
    }
    if grads.len() != report.per_class.len() {
        return Err(Error::Validation(format!(
            "scatter got {} class grads but report covers {}",
            grads.len(),
            report.per_class.len()
        )));
    }
    // Per-class cotangent scaled by 1/count, indexed by label value.
    let scaled: Vec<Option<Array1<f64>>> = grads
        .iter()
        .zip(&report.per_class)
        .map(|(g, c)| match (g, c) {
            (Some(g), Some(c)) => Some(g / c.count as f64),
            _ => None,
        })
        .collect();
    for (gmap, mask_f) in grad_maps.iter_mut().zip(masks_f) {
        let (ch, h, w) = gmap.dim();
        if mask_f.dim() != (h, w) {
            return Err(Error::Validation(format!(
                "mask {:?} does not match grad map {h}x{w}",
                mask_f.dim()
            )));
        }
        for y in 0..h {
            for x in 0..w {
                let label = mask_f[(y, x)] as usize;
                if let Some(Some(g)) = scaled.get(label) {
                    for c in 0..ch {
                        gmap[(c, y, x)] += g[c];
                    }
                }
            }
        }
    }
    Ok(())
}

/// Running per-class prototypes for the naive baselines: plain EMA over
/// observed centroids, first observation adopted verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaPrototypeBank {
    pub dim: usize,
    pub momentum: f64,
    pub entries: Vec<Option<BankEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub vector: Array1<f64>,
    pub updates: u64,
}

impl EmaPrototypeBank {
    pub fn new(n_classes: usize, dim: usize, momentum: f64) -> Result<Self> {
        validate_momentum(momentum)?;
        Ok(Self {
            dim,
            momentum,
            entries: vec![None; n_classes],
        })
    }

    pub fn vector(&self, class_id: u8) -> Option<&Array1<f64>> {
        self.entries
            .get(class_id as usize)
            .and_then(|e| e.as_ref())
            .map(|e| &e.vector)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|e| e.is_none())
    }
}

fn validate_momentum(momentum: f64) -> Result<()> {
    if !(momentum > 0.0 && momentum < 1.0) {
        return Err(Error::Validation(format!(
            "EMA momentum must lie strictly inside (0,1), got {momentum}"
        )));
    }
    Ok(())
}

/// `v' = λ·v + (1−λ)·centroid` for every class the report observed; classes
/// absent from the report keep their entry untouched.
pub fn ema_update(
    bank: &EmaPrototypeBank,
    report: &CentroidReport,
    momentum: f64,
) -> Result<EmaPrototypeBank> {
    validate_momentum(momentum)?;
    if report.per_class.len() != bank.entries.len() {
        return Err(Error::Validation(format!(
            "report covers {} classes, bank holds {}",
            report.per_class.len(),
            bank.entries.len()
        )));
    }
    if report.dim != bank.dim {
        return Err(Error::Validation(format!(
            "report dim {} does not match bank dim {}",
            report.dim, bank.dim
        )));
    }
    let entries = bank
        .entries
        .iter()
        .zip(&report.per_class)
        .map(|(entry, observed)| match (entry, observed) {
            (_, None) => entry.clone(),
            (None, Some(c)) => Some(BankEntry {
                vector: c.vector.clone(),
                updates: 1,
            }),
            (Some(e), Some(c)) => Some(BankEntry {
                vector: momentum * &e.vector + (1.0 - momentum) * &c.vector,
                updates: e.updates + 1,
            }),
        })
        .collect();
    Ok(EmaPrototypeBank {
        dim: bank.dim,
        momentum,
        entries,
    })
}
