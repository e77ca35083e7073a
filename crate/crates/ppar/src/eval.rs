//! Segmentation metrics (per-class IoU, mIoU, confusion matrix), the
//! cross-domain evaluation protocol, and figure/report emission.
//!
//! Evaluation is full-resolution and single-scale: each image is inferred
//! uncropped, logits are resized to the label extent when they differ, and
//! the argmax prediction is scored against the mask. Classes that never
//! occur in either truth or prediction have an undefined IoU; they are
//! excluded from the mean and flagged, rather than silently counted as 0.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::{normalize_image, ToyBackbone};
use crate::catalog::ClassCatalog;
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::nn::bilinear_resize;

/// Pixel-count confusion matrix: rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    n_classes: usize,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: vec![0; n_classes * n_classes],
            n_classes,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    /// Total pixels scored (ignored pixels never enter).
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.n_classes).map(|p| self.count(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.n_classes).map(|g| self.count(g, pred)).sum()
    }

    /// Score one aligned (truth, prediction) pair of label maps.
    pub fn accumulate(
        &mut self,
        truth: &Array2<u8>,
        pred: &Array2<u8>,
        ignore_index: u8,
    ) -> Result<()> {
        if truth.dim() != pred.dim() {
            return Err(Error::Validation(format!(
                "truth is {:?} but prediction is {:?}",
                truth.dim(),
                pred.dim()
            )));
        }
        for (&g, &p) in truth.iter().zip(pred.iter()) {
            if g == ignore_index {
                continue;
            }
            if g as usize >= self.n_classes {
                return Err(Error::Validation(format!(
                    "truth label {g} outside the {}-class catalog",
                    self.n_classes
                )));
            }
            if p as usize >= self.n_classes {
                return Err(Error::Validation(format!(
                    "predicted label {p} outside the {}-class catalog",
                    self.n_classes
                )));
            }
            self.counts[g as usize * self.n_classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Merge another matrix by addition (per-image matrices compose this way).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.n_classes != other.n_classes {
            return Err(Error::Validation(format!(
                "cannot merge a {}-class matrix into a {}-class one",
                other.n_classes, self.n_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Rows rescaled to sum to 1; zero-support rows stay all-zero.
    pub fn normalized_rows(&self) -> Array2<f64> {
        let n = self.n_classes;
        let mut out = Array2::zeros((n, n));
        for g in 0..n {
            let total = self.row_sum(g);
            if total == 0 {
                continue;
            }
            for p in 0..n {
                out[(g, p)] = self.count(g, p) as f64 / total as f64;
            }
        }
        out
    }
}

/// Per-class IoU plus their mean over defined classes.
#[derive(Debug, Clone, PartialEq)]
pub struct MiouSummary {
    /// `None` marks a class absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    /// Class ids whose IoU is undefined.
    pub undefined: Vec<usize>,
}

/// IoU_n = diag / (row + col − diag); zero-denominator classes are
/// excluded from the mean and reported as undefined.
pub fn miou(cm: &ConfusionMatrix) -> MiouSummary {
    let n = cm.n_classes();
    let mut per_class = Vec::with_capacity(n);
    let mut undefined = Vec::new();
    let mut sum = 0.0;
    let mut defined = 0usize;
    for c in 0..n {
        let tp = cm.count(c, c);
        let denom = cm.row_sum(c) + cm.col_sum(c) - tp;
        if denom == 0 {
            per_class.push(None);
            undefined.push(c);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            defined += 1;
        }
    }
    let mean = if defined == 0 { 0.0 } else { sum / defined as f64 };
    MiouSummary {
        per_class,
        mean,
        undefined,
    }
}

/// Argmax class map from logits; ties resolve to the lowest class id.
pub fn argmax_labels(logits: &Array3<f64>) -> Array2<u8> {
    let (n, h, w) = logits.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = logits[(0, y, x)];
            for c in 1..n {
                let v = logits[(c, y, x)];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[(y, x)] = best as u8;
        }
    }
    out
}

/// Full-image argmax prediction for one sample.
pub fn predict(model: &ToyBackbone, image: &ndarray::Array3<u8>, label_extent: (usize, usize)) -> Result<Array2<u8>> {
    let logits = model.infer(&normalize_image(image))?;
    let (_, h, w) = logits.dim();
    let logits = if (h, w) == label_extent {
        logits
    } else {
        bilinear_resize(&logits, label_extent)?
    };
    Ok(argmax_labels(&logits))
}

/// Evaluate a model over a dataset: uncropped inference, argmax scoring.
pub fn evaluate_model(
    model: &ToyBackbone,
    samples: &[SegSample],
    catalog: &ClassCatalog,
) -> Result<(ConfusionMatrix, f64)> {
    if model.cfg.n_classes != catalog.n_classes() {
        return Err(Error::Validation(format!(
            "model emits {} classes but the catalog defines {}",
            model.cfg.n_classes,
            catalog.n_classes()
        )));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset("evaluation dataset holds no samples".into()));
    }
    let mut cm = ConfusionMatrix::new(catalog.n_classes());
    for sample in samples {
        let pred = predict(model, &sample.image, sample.mask.dim())?;
        cm.accumulate(&sample.mask, &pred, catalog.ignore_index())?;
    }
    let summary = miou(&cm);
    Ok((cm, summary.mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: usize,
    /// `null` in JSON when the class never occurred.
    pub iou: Option<f64>,
    pub defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub miou: f64,
    pub per_class: Vec<ClassIou>,
    /// Kept for heatmap rendering; not part of the JSON interface.
    #[serde(skip)]
    pub confusion: ConfusionMatrix,
}

/// One training domain scored against every target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainReport {
    pub train_domain: String,
    pub targets: Vec<DomainReport>,
    /// Arithmetic mean of the targets' mIoU values.
    pub avg_miou: f64,
    pub config_hash: String,
}

/// Evaluate against every target domain and average the mIoUs.
pub fn cross_domain_eval(
    model: &ToyBackbone,
    train_domain: &str,
    targets: &[(String, Vec<SegSample>)],
    catalog: &ClassCatalog,
    config_hash: &str,
) -> Result<CrossDomainReport> {
    if targets.is_empty() {
        return Err(Error::Validation(
            "cross-domain evaluation needs at least one target domain".into(),
        ));
    }
    let mut reports = Vec::with_capacity(targets.len());
    let mut sum = 0.0;
    for (domain, samples) in targets {
        let (cm, mean) = evaluate_model(model, samples, catalog)?;
        let summary = miou(&cm);
        sum += mean;
        reports.push(DomainReport {
            domain: domain.clone(),
            miou: mean,
            per_class: summary
                .per_class
                .iter()
                .enumerate()
                .map(|(class_id, iou)| ClassIou {
                    class_id,
                    iou: *iou,
                    defined: iou.is_some(),
                })
                .collect(),
            confusion: cm,
        });
    }
    Ok(CrossDomainReport {
        train_domain: train_domain.to_string(),
        targets: reports,
        avg_miou: sum / targets.len() as f64,
        config_hash: config_hash.to_string(),
    })
}

/// Side length of one confusion-matrix cell in the rendered heatmap.
const HEATMAP_CELL: usize = 24;

/// Render a row-normalized confusion heatmap as a grayscale PNG.
pub fn write_heatmap(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let n = cm.n_classes();
    if n == 0 {
        return Err(Error::Validation("cannot render an empty confusion matrix".into()));
    }
    let norm = cm.normalized_rows();
    let side = (n * HEATMAP_CELL) as u32;
    let mut img = image::GrayImage::new(side, side);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let g = y as usize / HEATMAP_CELL;
        let p = x as usize / HEATMAP_CELL;
        *px = image::Luma([(norm[(g, p)] * 255.0).round().clamp(0.0, 255.0) as u8]);
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::Validation(format!("failed to encode '{}': {other}", path.display())),
    })
}

/// Write the cross-domain report JSON plus one heatmap PNG per target.
/// Filenames embed the config hash; bytes are deterministic for a given
/// report.
pub fn emit_figures(report: &CrossDomainReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let report_path = out_dir.join(format!("report_{}.json", report.config_hash));
    let body = serde_json::to_string_pretty(report)
        .map_err(|e| Error::json(report_path.display().to_string(), e))?;
    std::fs::write(&report_path, format!("{body}\n")).map_err(|e| Error::io(&report_path, e))?;
    written.push(report_path);

    for target in &report.targets {
        let name: String = target
            .domain
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
            .collect();
        let path = out_dir.join(format!("confusion_{name}_{}.png", report.config_hash));
        write_heatmap(&target.confusion, &path)?;
        written.push(path);
    }
    Ok(written)
}
