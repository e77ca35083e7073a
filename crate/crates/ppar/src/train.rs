//! End-to-end training: batch assembly, photometric augmentation, the
//! combined objective, optimizer schedule, metrics logging, and resumable
//! checkpoints.
//!
//! Every step optimizes `L_all = L_rs + α_pa · L_pa`, where `L_rs` is the
//! (optionally reweighted) segmentation cross-entropy and `L_pa` is the
//! active alignment objective — the progressive shallow+deep pair in the
//! full configuration, or a single-/multi-stage baseline term. Loss values
//! in the step report are computed by the same module-level functions the
//! tests recompose, so a report is externally reproducible to the last bit.
//!
//! All randomness is derived statelessly from `(seed, purpose, index)`:
//! batch sampling and augmentation at iteration `k` depend only on the seed
//! and `k`, never on how many iterations ran before. Together with
//! checkpointed momentum buffers this makes a resumed run bitwise identical
//! to an uninterrupted one.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    alignment_terms, deep_alignment_terms, shallow_alignment_terms, AlignmentConfig,
    AlignmentTerms, ProjectionGrad, ProjectionHead, PrototypeSource,
};
use crate::backbone::{normalize_image, BackboneConfig, BackboneGrads, ToyBackbone};
use crate::catalog::ClassCatalog;
use crate::centroids::{
    batch_centroids, downsample_labels, ema_update, scatter_centroid_grads, CentroidReport,
    ClassCentroid, EmaPrototypeBank, FeatureTap, Stage,
};
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::nn::SgdConfig;
use crate::reweight::{
    ce_partials, class_similarity, pixel_uncertainty, pool_ce, resize_weights_nearest,
    reweight_map, reweight_map_batch, CePartials, ReweightScope,
};
use crate::rng::derive_rng;
use crate::text::{FactorSet, PrototypeKind, PrototypeSet};

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Largest supported batch; keeps per-slot RNG indices collision-free.
pub const MAX_BATCH: usize = 64;

/// Which prototypes a baseline mode aligns against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineSource {
    /// Running EMA of observed (projected) class centroids.
    Np,
    /// Plain class-name prototypes.
    Otp,
    /// Style-augmented prototypes.
    Vtp,
}

/// The objective configuration: either the progressive method with its
/// component toggles, or one of the fixed-prototype baselines. Exactly one
/// is active by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TrainMode {
    Ppar {
        /// Attach the texture factor to the shallow-alignment prototypes.
        ppa_lt: bool,
        /// Attach the color factor to the shallow-alignment prototypes.
        ppa_c: bool,
        /// Enable prototype-based pixel reweighting of the CE loss.
        pr: bool,
    },
    Baseline {
        /// Align all four stages instead of only the deep one.
        multi_stage: bool,
        source: BaselineSource,
    },
}

impl TrainMode {
    pub fn ppa_active(&self) -> bool {
        matches!(self, TrainMode::Ppar { ppa_lt, ppa_c, .. } if *ppa_lt || *ppa_c)
    }

    pub fn pr_active(&self) -> bool {
        matches!(self, TrainMode::Ppar { pr: true, .. })
    }

    pub fn needs_otp(&self) -> bool {
        match self {
            TrainMode::Ppar { .. } => self.ppa_active() || self.pr_active(),
            TrainMode::Baseline { source, .. } => *source == BaselineSource::Otp,
        }
    }

    pub fn needs_vtp(&self) -> bool {
        match self {
            TrainMode::Ppar { .. } => self.ppa_active(),
            TrainMode::Baseline { source, .. } => *source == BaselineSource::Vtp,
        }
    }

    /// Factor set the shallow prototypes must carry under this mode.
    pub fn vtp_factors(&self) -> FactorSet {
        match self {
            TrainMode::Ppar { ppa_lt, ppa_c, .. } => FactorSet {
                color: *ppa_c,
                texture: *ppa_lt,
            },
            TrainMode::Baseline { .. } => FactorSet::ALL,
        }
    }

    pub fn label(&self) -> String {
        match self {
            TrainMode::Ppar { ppa_lt, ppa_c, pr } => {
                let mut parts = Vec::new();
                if *ppa_lt {
                    parts.push("ppa-lt");
                }
                if *ppa_c {
                    parts.push("ppa-c");
                }
                if *pr {
                    parts.push("pr");
                }
                if parts.is_empty() {
                    "plain-ce".to_string()
                } else {
                    parts.join("+")
                }
            }
            TrainMode::Baseline { multi_stage, source } => format!(
                "{}-{}",
                if *multi_stage { "mpa" } else { "spa" },
                match source {
                    BaselineSource::Np => "np",
                    BaselineSource::Otp => "otp",
                    BaselineSource::Vtp => "vtp",
                }
            ),
        }
    }
}

/// Seeded photometric jitter: brightness, contrast, saturation, then hue
/// rotation, applied to images only — masks are never touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotometricConfig {
    pub enabled: bool,
    /// Multiplicative brightness range.
    pub brightness: (f64, f64),
    /// Contrast range; 1.0 leaves the image unchanged.
    pub contrast: (f64, f64),
    /// Saturation range; 0 collapses to grayscale.
    pub saturation: (f64, f64),
    /// Hue rotation range in radians.
    pub hue: (f64, f64),
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            saturation: (0.8, 1.2),
            hue: (-0.15, 0.15),
        }
    }
}

impl PhotometricConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi), floor) in [
            ("brightness", self.brightness, 0.0),
            ("contrast", self.contrast, 0.0),
            ("saturation", self.saturation, 0.0),
            ("hue", self.hue, f64::NEG_INFINITY),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= floor) {
                return Err(Error::Validation(format!(
                    "photometric {name} range ({lo}, {hi}) is invalid"
                )));
            }
        }
        Ok(())
    }
}

/// Apply the configured jitter to one image, deterministically from
/// `(seed, iteration, slot)`.
pub fn augment_image(
    cfg: &PhotometricConfig,
    seed: u64,
    iter: u64,
    slot: usize,
    image: &Array3<u8>,
) -> Array3<u8> {
    if !cfg.enabled {
        return image.clone();
    }
    let mut rng = derive_rng(seed, "augment", iter * MAX_BATCH as u64 + slot as u64);
    let b = rng.gen_range(cfg.brightness.0..=cfg.brightness.1);
    let c = rng.gen_range(cfg.contrast.0..=cfg.contrast.1);
    let s = rng.gen_range(cfg.saturation.0..=cfg.saturation.1);
    let h = rng.gen_range(cfg.hue.0..=cfg.hue.1);

    let (_, height, width) = image.dim();
    let luma = |r: f64, g: f64, bl: f64| 0.299 * r + 0.587 * g + 0.114 * bl;

    // Contrast anchors on the post-brightness mean luminance so that a
    // contrast factor of 1 is exactly a no-op.
    let mut mean = 0.0;
    for y in 0..height {
        for x in 0..width {
            mean += luma(
                image[(0, y, x)] as f64 * b,
                image[(1, y, x)] as f64 * b,
                image[(2, y, x)] as f64 * b,
            );
        }
    }
    mean /= (height * width) as f64;

    let mut out = Array3::<u8>::zeros(image.raw_dim());
    for y in 0..height {
        for x in 0..width {
            let mut px = [
                image[(0, y, x)] as f64 * b,
                image[(1, y, x)] as f64 * b,
                image[(2, y, x)] as f64 * b,
            ];
            for v in px.iter_mut() {
                *v = mean + (*v - mean) * c;
            }
            let gray = luma(px[0], px[1], px[2]);
            for v in px.iter_mut() {
                *v = gray + (*v - gray) * s;
            }
            let px = crate::data::hue_rotate(px, h);
            for (ch, v) in px.iter().enumerate() {
                out[(ch, y, x)] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Polynomial learning-rate decay: `base · (1 − iter/max_iters)^power`.
pub fn poly_lr(base: f64, iter: u64, max_iters: u64, power: f64) -> f64 {
    let t = (iter as f64 / max_iters.max(1) as f64).min(1.0);
    base * (1.0 - t).powf(power)
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the alignment loss inside the combined objective.
    pub alpha_pa: f64,
    pub lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Square crop fed to the network; must not exceed the image extent.
    pub crop: usize,
    pub max_iters: u64,
    pub seed: u64,
    pub mode: TrainMode,
    /// EMA momentum for the naive prototype bank.
    pub ema_momentum: f64,
    pub align: AlignmentConfig,
    pub reweight_scope: ReweightScope,
    pub photometric: PhotometricConfig,
    pub backbone: BackboneConfig,
    /// Prototype/projection dimensionality; must match any text prototypes.
    pub embed_dim: usize,
    /// Save a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_pa: 0.001,
            lr: 0.01,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0025,
            batch_size: 4,
            crop: 64,
            max_iters: 2000,
            seed: 1,
            mode: TrainMode::Ppar {
                ppa_lt: true,
                ppa_c: true,
                pr: true,
            },
            ema_momentum: 0.99,
            align: AlignmentConfig::default(),
            reweight_scope: ReweightScope::Batch,
            photometric: PhotometricConfig::default(),
            backbone: BackboneConfig::default(),
            embed_dim: 64,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_pa.is_finite() && self.alpha_pa >= 0.0) {
            return Err(Error::Validation(format!(
                "alpha_pa must be a finite nonnegative number, got {}",
                self.alpha_pa
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Validation(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_power.is_finite() && self.lr_power > 0.0) {
            return Err(Error::Validation("lr_power must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Validation("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.batch_size > MAX_BATCH {
            return Err(Error::Validation(format!(
                "batch_size must lie in 1..={MAX_BATCH}, got {}",
                self.batch_size
            )));
        }
        if self.crop < 32 {
            return Err(Error::Validation(format!(
                "crop must be at least 32 pixels, got {}",
                self.crop
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Validation("max_iters must be positive".into()));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::Validation(format!(
                "ema_momentum must lie strictly inside (0,1), got {}",
                self.ema_momentum
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Validation("embed_dim must be positive".into()));
        }
        self.align.validate()?;
        self.photometric.validate()
    }
}

/// One training step's logged quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iter: u64,
    #[serde(rename = "L_rs")]
    pub l_rs: f64,
    #[serde(rename = "L_pa")]
    pub l_pa: f64,
    #[serde(rename = "L_all")]
    pub l_all: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Trainable state: model, projections, optimizer buffers, prototype bank.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub catalog: ClassCatalog,
    pub backbone: ToyBackbone,
    /// One head per stage, S1..S4, all constructed in every mode so the
    /// parameter-initialization RNG stream is mode-independent.
    pub projections: Vec<ProjectionHead>,
    pub backbone_vel: BackboneGrads,
    pub projection_vel: Vec<ProjectionGrad>,
    /// Naive prototype bank in projection space; only the NP baselines read
    /// it, but it is part of the state in every mode.
    pub bank: EmaPrototypeBank,
    pub otp: Option<PrototypeSet>,
    pub vtp: Option<PrototypeSet>,
    /// Next iteration to run.
    pub iter: u64,
    /// Steps where the naive bank had no prototype for any present class.
    pub empty_bank_steps: u64,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        catalog: ClassCatalog,
        otp: Option<PrototypeSet>,
        vtp: Option<PrototypeSet>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.backbone.n_classes != catalog.n_classes() {
            return Err(Error::Validation(format!(
                "backbone is configured for {} classes but the catalog has {}",
                cfg.backbone.n_classes,
                catalog.n_classes()
            )));
        }
        let check_set = |set: &PrototypeSet, kind: PrototypeKind, role: &str| -> Result<()> {
            if set.kind != kind {
                return Err(Error::Validation(format!(
                    "the {role} prototype set has kind {:?}, expected {kind:?}",
                    set.kind
                )));
            }
            if set.dim != cfg.embed_dim {
                return Err(Error::Validation(format!(
                    "{role} prototypes have dim {} but embed_dim is {}",
                    set.dim, cfg.embed_dim
                )));
            }
            set.validate_against(&catalog)
        };
        if cfg.mode.needs_otp() {
            let set = otp.as_ref().ok_or_else(|| {
                Error::Validation(format!(
                    "mode {} needs class-name prototypes but none were supplied",
                    cfg.mode.label()
                ))
            })?;
            check_set(set, PrototypeKind::Otp, "class-name")?;
        }
        if cfg.mode.needs_vtp() {
            let set = vtp.as_ref().ok_or_else(|| {
                Error::Validation(format!(
                    "mode {} needs style-augmented prototypes but none were supplied",
                    cfg.mode.label()
                ))
            })?;
            check_set(set, PrototypeKind::Vtp, "style-augmented")?;
        }

        let backbone = ToyBackbone::new(&cfg.backbone, cfg.seed)?;
        let projections: Vec<ProjectionHead> = cfg
            .backbone
            .widths
            .iter()
            .enumerate()
            .map(|(i, &width)| {
                let mut rng = derive_rng(cfg.seed, "projection", i as u64);
                ProjectionHead::new_random(width, cfg.embed_dim, &mut rng)
            })
            .collect();
        let backbone_vel = backbone.zero_grads();
        let projection_vel = projections.iter().map(ProjectionGrad::zeros_like).collect();
        let bank = EmaPrototypeBank::new(catalog.n_classes(), cfg.embed_dim, cfg.ema_momentum)?;
        Ok(Self {
            cfg,
            catalog,
            backbone,
            projections,
            backbone_vel,
            projection_vel,
            bank,
            otp,
            vtp,
            iter: 0,
            empty_bank_steps: 0,
        })
    }

    fn deep_projection(&self) -> &ProjectionHead {
        &self.projections[Stage::S4.index()]
    }

    /// Run one optimizer step on an already-assembled batch and report the
    /// loss breakdown. The batch is augmented internally (deterministically
    /// from the current iteration), so callers pass clean samples.
    pub fn train_step(&mut self, batch: &[SegSample]) -> Result<StepReport> {
        if batch.is_empty() || batch.len() > MAX_BATCH {
            return Err(Error::Validation(format!(
                "batch must hold 1..={MAX_BATCH} samples, got {}",
                batch.len()
            )));
        }
        let iter = self.iter;
        let n_classes = self.catalog.n_classes();
        let ignore = self.catalog.ignore_index();

        // Forward every image, collecting logits, taps, and activations.
        let mut outs = Vec::with_capacity(batch.len());
        let mut acts = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        for (slot, sample) in batch.iter().enumerate() {
            let image = augment_image(&self.cfg.photometric, self.cfg.seed, iter, slot, &sample.image);
            let x = normalize_image(&image);
            let (out, act) = self.backbone.forward(&x)?;
            outs.push(out);
            acts.push(act);
            masks.push(sample.mask.clone());
        }

        // Labels at each stage's resolution (needed by centroids/scatter).
        let mut stage_masks: Vec<Vec<Array2<u8>>> = vec![Vec::new(); 4];
        for (out, mask) in outs.iter().zip(&masks) {
            for (s, tap) in out.taps.iter().enumerate() {
                let (_, h, w) = tap.map.dim();
                stage_masks[s].push(downsample_labels(mask, (h, w))?);
            }
        }

        // Pixel weights for the segmentation loss.
        let weights: Vec<Array2<f64>> = if self.cfg.mode.pr_active() {
            let otp = self.otp.as_ref().expect("validated at construction");
            let mut us = Vec::with_capacity(batch.len());
            for out in &outs {
                let deep = &out.taps[Stage::S4.index()].map;
                let projected = self.deep_projection().project_map(deep)?;
                let sim = class_similarity(&projected, otp)?;
                us.push(pixel_uncertainty(&sim));
            }
            let feature_weights = match self.cfg.reweight_scope {
                ReweightScope::Batch => reweight_map_batch(&us)?,
                ReweightScope::Image => us
                    .iter()
                    .map(reweight_map)
                    .collect::<Result<Vec<_>>>()?,
            };
            feature_weights
                .iter()
                .zip(&masks)
                .map(|(w, mask)| resize_weights_nearest(w, mask.dim()))
                .collect::<Result<Vec<_>>>()?
        } else {
            masks.iter().map(|m| Array2::ones(m.raw_dim())).collect()
        };

        // Segmentation loss with one pooled denominator across the batch.
        let mut parts: Vec<CePartials> = Vec::with_capacity(batch.len());
        for ((out, mask), w) in outs.iter().zip(&masks).zip(&weights) {
            parts.push(ce_partials(&out.logits, mask, w, ignore)?);
        }
        let pooled = pool_ce(&parts);
        let l_rs = pooled.loss;

        // Alignment loss and its gradients, per mode.
        let mut l_pa = 0.0;
        // (stage index, terms, report) for every active alignment target.
        let mut stage_terms: Vec<(usize, AlignmentTerms, CentroidReport)> = Vec::new();
        match &self.cfg.mode {
            TrainMode::Ppar { .. } => {
                if self.cfg.mode.ppa_active() {
                    let vtp = self.vtp.as_ref().expect("validated at construction");
                    let otp = self.otp.as_ref().expect("validated at construction");
                    let shallow = self.cfg.align.shallow_stage.index();
                    let report = self.stage_report(&outs, &stage_masks, shallow)?;
                    let terms = shallow_alignment_terms(
                        &report,
                        &self.projections[shallow],
                        vtp,
                        &self.cfg.align,
                    )?;
                    l_pa += terms.loss;
                    stage_terms.push((shallow, terms, report));

                    let deep = Stage::S4.index();
                    let report = self.stage_report(&outs, &stage_masks, deep)?;
                    let terms =
                        deep_alignment_terms(&report, &self.projections[deep], otp, &self.cfg.align)?;
                    l_pa += terms.loss;
                    stage_terms.push((deep, terms, report));
                }
            }
            TrainMode::Baseline { multi_stage, source } => {
                let stages: Vec<usize> = if *multi_stage {
                    (0..4).collect()
                } else {
                    vec![Stage::S4.index()]
                };
                let mut any_present = false;
                let mut aligned = 0usize;
                for s in stages {
                    let report = self.stage_report(&outs, &stage_masks, s)?;
                    let targets = match source {
                        BaselineSource::Np => PrototypeSource::Naive(&self.bank),
                        BaselineSource::Otp => {
                            PrototypeSource::Text(self.otp.as_ref().expect("validated"))
                        }
                        BaselineSource::Vtp => {
                            PrototypeSource::Text(self.vtp.as_ref().expect("validated"))
                        }
                    }
                    .targets(n_classes)?;
                    let terms =
                        alignment_terms(&report, &self.projections[s], &targets, &self.cfg.align)?;
                    l_pa += terms.loss;
                    any_present |= report.any_present();
                    aligned += terms.aligned_classes;
                    stage_terms.push((s, terms, report));
                }
                if any_present && aligned == 0 {
                    self.empty_bank_steps += 1;
                }
            }
        }

        let l_all = l_rs + self.cfg.alpha_pa * l_pa;
        if !l_all.is_finite() || !l_rs.is_finite() || !l_pa.is_finite() {
            return Err(Error::NonFinite(format!(
                "non-finite loss at iteration {iter}: L_rs={l_rs}, L_pa={l_pa}, L_all={l_all} \
                 (batch [{}])",
                batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }

        // Tap cotangents: alignment centroid gradients scattered back onto
        // the producing feature maps, scaled by the loss weight.
        let mut tap_grads: Vec<[Option<Array3<f64>>; 4]> =
            (0..batch.len()).map(|_| [None, None, None, None]).collect();
        for (stage, terms, report) in &stage_terms {
            if terms.aligned_classes == 0 {
                continue;
            }
            let scaled: Vec<Option<Array1<f64>>> = terms
                .grad_centroids
                .iter()
                .map(|g| g.as_ref().map(|g| g * self.cfg.alpha_pa))
                .collect();
            let mut maps: Vec<Array3<f64>> = outs
                .iter()
                .map(|o| Array3::zeros(o.taps[*stage].map.raw_dim()))
                .collect();
            scatter_centroid_grads(&mut maps, &stage_masks[*stage], report, &scaled)?;
            for (img, map) in maps.into_iter().enumerate() {
                match &mut tap_grads[img][*stage] {
                    Some(existing) => *existing += &map,
                    slot => *slot = Some(map),
                }
            }
        }

        // Backbone gradients: CE path plus alignment taps, summed over the
        // batch.
        let mut grads = self.backbone.zero_grads();
        let scale = if pooled.valid_count == 0 {
            0.0
        } else {
            1.0 / pooled.valid_count as f64
        };
        for ((part, act), tap_grad) in parts.iter().zip(&acts).zip(tap_grads.into_iter()) {
            let d_logits = part.grad_unscaled.mapv(|v| v * scale);
            grads.add(&self.backbone.backward(act, &d_logits, tap_grad)?);
        }

        // Projection gradients, accumulated per stage. The heads serve only
        // the alignment objective, so they take its gradient unscaled;
        // `alpha_pa` weighs alignment against segmentation where the two
        // compete, on the shared backbone.
        let mut proj_grads: Vec<ProjectionGrad> = self
            .projections
            .iter()
            .map(ProjectionGrad::zeros_like)
            .collect();
        let mut proj_active = [false; 4];
        for (stage, terms, _) in &stage_terms {
            proj_grads[*stage].w += &terms.grad_w;
            proj_grads[*stage].b += &terms.grad_b;
            proj_active[*stage] = true;
        }

        let grad_norm = {
            let proj_sq: f64 = proj_grads
                .iter()
                .map(|g| {
                    g.w.iter().map(|v| v * v).sum::<f64>() + g.b.iter().map(|v| v * v).sum::<f64>()
                })
                .sum();
            (grads.sq_norm() + proj_sq).sqrt()
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "non-finite gradient norm at iteration {iter} (L_rs={l_rs}, L_pa={l_pa}, batch [{}])",
                batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }

        // Optimizer step.
        let lr = poly_lr(self.cfg.lr, iter, self.cfg.max_iters, self.cfg.lr_power);
        let opt = SgdConfig {
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
        };
        self.backbone.sgd_step(&grads, &mut self.backbone_vel, &opt, lr);
        for s in 0..4 {
            if proj_active[s] {
                let head = &mut self.projections[s];
                crate::nn::sgd_step(
                    head.w.as_slice_mut().unwrap(),
                    proj_grads[s].w.as_slice().unwrap(),
                    self.projection_vel[s].w.as_slice_mut().unwrap(),
                    &opt,
                    lr,
                );
                crate::nn::sgd_step(
                    head.b.as_slice_mut().unwrap(),
                    proj_grads[s].b.as_slice().unwrap(),
                    self.projection_vel[s].b.as_slice_mut().unwrap(),
                    &opt,
                    lr,
                );
            }
        }

        // Naive bank update from this batch's deep centroids, projected and
        // detached; runs after the loss so step t aligned against the bank
        // as of step t−1.
        if matches!(
            self.cfg.mode,
            TrainMode::Baseline { source: BaselineSource::Np, .. }
        ) {
            let deep = Stage::S4.index();
            let report = self.stage_report(&outs, &stage_masks, deep)?;
            let projected = CentroidReport {
                stage: Stage::S4,
                dim: self.cfg.embed_dim,
                per_class: report
                    .per_class
                    .iter()
                    .map(|c| {
                        c.as_ref()
                            .map(|c| {
                                Ok(ClassCentroid {
                                    vector: self.deep_projection().project(&c.vector)?,
                                    count: c.count,
                                })
                            })
                            .transpose()
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            self.bank = ema_update(&self.bank, &projected, self.cfg.ema_momentum)?;
        }

        self.iter += 1;
        Ok(StepReport {
            iter,
            l_rs,
            l_pa,
            l_all,
            lr,
            grad_norm,
        })
    }

    fn stage_report(
        &self,
        outs: &[crate::backbone::BackboneOut],
        stage_masks: &[Vec<Array2<u8>>],
        stage: usize,
    ) -> Result<CentroidReport> {
        let taps: Vec<&FeatureTap> = outs.iter().map(|o| &o.taps[stage]).collect();
        batch_centroids(&taps, &stage_masks[stage], &self.catalog)
    }

    /// Restore a trainer from a checkpoint, verifying both hashes.
    pub fn resume(
        cfg: TrainConfig,
        catalog: ClassCatalog,
        otp: Option<PrototypeSet>,
        vtp: Option<PrototypeSet>,
        checkpoint: Checkpoint,
        expected_config_hash: &str,
        expected_catalog_hash: &str,
    ) -> Result<Self> {
        if checkpoint.config_hash != expected_config_hash {
            return Err(Error::ArtifactMismatch(format!(
                "checkpoint was trained under config {} but the active config hashes to {expected_config_hash}",
                checkpoint.config_hash
            )));
        }
        if checkpoint.catalog_hash != expected_catalog_hash {
            return Err(Error::ArtifactMismatch(format!(
                "checkpoint catalog hash {} does not match the active catalog {expected_catalog_hash}",
                checkpoint.catalog_hash
            )));
        }
        let mut trainer = Self::new(cfg, catalog, otp, vtp)?;
        let payload = checkpoint.payload;
        if payload.projections.len() != 4 || payload.projection_vel.len() != 4 {
            return Err(Error::ArtifactMismatch(
                "checkpoint does not hold one projection per stage".into(),
            ));
        }
        trainer.backbone = payload.backbone;
        trainer.projections = payload.projections;
        trainer.backbone_vel = payload.backbone_vel;
        trainer.projection_vel = payload.projection_vel;
        trainer.bank = payload.bank;
        trainer.iter = payload.iter;
        Ok(trainer)
    }

    /// Run the training loop to `max_iters`, appending one metrics row per
    /// step and checkpointing at the configured cadence.
    pub fn fit(&mut self, dataset: &[SegSample], opts: &FitOptions) -> Result<Vec<StepReport>> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset("training dataset holds no samples".into()));
        }
        // Fail on catalog/shape problems before any step runs.
        for sample in dataset {
            if sample.height() < self.cfg.crop || sample.width() < self.cfg.crop {
                return Err(Error::Validation(format!(
                    "sample '{}' is {}x{}, smaller than the {} crop",
                    sample.id,
                    sample.height(),
                    sample.width(),
                    self.cfg.crop
                )));
            }
            let bad: Vec<u8> = {
                let mut seen: Vec<u8> = sample
                    .mask
                    .iter()
                    .copied()
                    .filter(|&l| !self.catalog.is_known_label(l))
                    .collect();
                seen.sort_unstable();
                seen.dedup();
                seen
            };
            if !bad.is_empty() {
                return Err(Error::Validation(format!(
                    "sample '{}' holds labels {bad:?} outside the catalog",
                    sample.id
                )));
            }
        }

        let mut metrics = match &opts.metrics_path {
            Some(path) => {
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let file = fs::OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(opts.append_metrics)
                    .truncate(!opts.append_metrics)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                Some(std::io::BufWriter::new(file))
            }
            None => None,
        };

        let stop_at = self
            .cfg
            .max_iters
            .min(opts.stop_after_iters.unwrap_or(u64::MAX));
        let mut reports = Vec::new();
        while self.iter < stop_at {
            let iter = self.iter;
            let batch = assemble_batch(dataset, &self.cfg, iter)?;
            let report = match self.train_step(&batch) {
                Ok(r) => r,
                Err(err) => {
                    self.dump_diagnostics(opts, iter, &err);
                    return Err(err);
                }
            };
            if let Some(w) = metrics.as_mut() {
                let path = opts.metrics_path.as_ref().unwrap();
                let line = serde_json::to_string(&report)
                    .map_err(|e| Error::json(path.display().to_string(), e))?;
                writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
            }
            reports.push(report);
            let due = self.cfg.checkpoint_every > 0 && self.iter % self.cfg.checkpoint_every == 0;
            if due && self.iter < stop_at {
                self.save_checkpoint_if_configured(opts)?;
            }
        }
        if let Some(mut w) = metrics {
            w.flush()
                .map_err(|e| Error::io(opts.metrics_path.as_ref().unwrap(), e))?;
        }
        self.save_checkpoint_if_configured(opts)?;
        Ok(reports)
    }

    fn save_checkpoint_if_configured(&self, opts: &FitOptions) -> Result<()> {
        if let Some(path) = &opts.checkpoint_path {
            save_checkpoint(self, &opts.config_hash, &opts.catalog_hash, path)?;
        }
        Ok(())
    }

    fn dump_diagnostics(&self, opts: &FitOptions, iter: u64, err: &Error) {
        let Some(metrics_path) = &opts.metrics_path else {
            return;
        };
        let path = metrics_path.with_file_name("diagnostics.json");
        let body = serde_json::json!({
            "iter": iter,
            "error": err.to_string(),
            "mode": self.cfg.mode.label(),
        });
        let _ = fs::write(&path, format!("{body}\n"));
    }
}

/// Deterministic batch assembly for one iteration: with-replacement sample
/// selection plus an aligned random crop, both derived from `(seed, iter)`.
pub fn assemble_batch(dataset: &[SegSample], cfg: &TrainConfig, iter: u64) -> Result<Vec<SegSample>> {
    let mut pick = derive_rng(cfg.seed, "batch", iter);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for slot in 0..cfg.batch_size {
        let sample = &dataset[pick.gen_range(0..dataset.len())];
        let (h, w) = (sample.height(), sample.width());
        if h == cfg.crop && w == cfg.crop {
            batch.push(sample.clone());
            continue;
        }
        let mut crop_rng = derive_rng(cfg.seed, "crop", iter * MAX_BATCH as u64 + slot as u64);
        let y0 = crop_rng.gen_range(0..=h - cfg.crop);
        let x0 = crop_rng.gen_range(0..=w - cfg.crop);
        let image = sample
            .image
            .slice(ndarray::s![.., y0..y0 + cfg.crop, x0..x0 + cfg.crop])
            .to_owned();
        let mask = sample
            .mask
            .slice(ndarray::s![y0..y0 + cfg.crop, x0..x0 + cfg.crop])
            .to_owned();
        batch.push(SegSample {
            id: sample.id.clone(),
            image,
            mask,
        });
    }
    Ok(batch)
}

/// Output plumbing for [`Trainer::fit`].
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub config_hash: String,
    pub catalog_hash: String,
    /// Append to an existing metrics file instead of truncating (used when
    /// resuming).
    pub append_metrics: bool,
    /// Stop after this iteration even though the schedule runs to
    /// `max_iters` — an external interruption, not a schedule change, so a
    /// later resume under the same config is bitwise-faithful.
    pub stop_after_iters: Option<u64>,
}

/// Everything a checkpoint persists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointPayload {
    pub iter: u64,
    pub backbone: ToyBackbone,
    pub projections: Vec<ProjectionHead>,
    pub backbone_vel: BackboneGrads,
    pub projection_vel: Vec<ProjectionGrad>,
    pub bank: EmaPrototypeBank,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    pub catalog_hash: String,
    pub payload: CheckpointPayload,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema: u32,
    config_hash: String,
    catalog_hash: String,
    /// SHA-256 of the payload's exact JSON bytes.
    checksum: String,
    payload: Box<serde_json::value::RawValue>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    crate::data::hex_string(&h.finalize())
}

pub fn save_checkpoint(
    trainer: &Trainer,
    config_hash: &str,
    catalog_hash: &str,
    path: &Path,
) -> Result<()> {
    let payload = CheckpointPayload {
        iter: trainer.iter,
        backbone: trainer.backbone.clone(),
        projections: trainer.projections.clone(),
        backbone_vel: trainer.backbone_vel.clone(),
        projection_vel: trainer.projection_vel.clone(),
        bank: trainer.bank.clone(),
    };
    let payload_json = serde_json::to_string(&payload)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    let file = CheckpointFile {
        schema: CHECKPOINT_SCHEMA,
        config_hash: config_hash.to_string(),
        catalog_hash: catalog_hash.to_string(),
        checksum: sha256_hex(payload_json.as_bytes()),
        payload: serde_json::value::RawValue::from_string(payload_json)
            .map_err(|e| Error::json(path.display().to_string(), e))?,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let body =
        serde_json::to_string(&file).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&raw).map_err(|e| {
        if e.is_eof() {
            Error::Truncated(format!("checkpoint '{}' ends mid-record", path.display()))
        } else {
            Error::json(path.display().to_string(), e)
        }
    })?;
    if file.schema != CHECKPOINT_SCHEMA {
        return Err(Error::SchemaVersion {
            path: path.display().to_string(),
            found: file.schema,
            expected: CHECKPOINT_SCHEMA,
        });
    }
    let payload_bytes = file.payload.get().as_bytes();
    let checksum = sha256_hex(payload_bytes);
    if checksum != file.checksum {
        return Err(Error::Checksum(format!(
            "checkpoint '{}' payload hashes to {checksum}, recorded {}",
            path.display(),
            file.checksum
        )));
    }
    let payload: CheckpointPayload = serde_json::from_str(file.payload.get())
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    Ok(Checkpoint {
        config_hash: file.config_hash,
        catalog_hash: file.catalog_hash,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_domain, ToyDomainSpec};
    use crate::factors::{scan_dataset_factors, LbpConfig};
    use crate::provider::StubTextProvider;
    use crate::text::{build_otp, build_vtp};

    const DIM: usize = 8;

    fn tiny_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            crop: 32,
            max_iters: 10,
            seed: 5,
            mode,
            backbone: BackboneConfig {
                widths: [4, 5, 6, 6],
                n_classes: 5,
            },
            embed_dim: DIM,
            ..TrainConfig::default()
        }
    }

    struct Fixture {
        dataset: Vec<SegSample>,
        catalog: ClassCatalog,
        otp: PrototypeSet,
        vtp: PrototypeSet,
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyDomainSpec::benchmark_source(99);
        let ds = generate_toy_domain(&spec, 6, 32, dir.path()).unwrap();
        let dataset = ds.load_all().unwrap();
        let catalog = crate::data::toy_catalog();
        let provider = StubTextProvider::new(3, DIM).unwrap();
        let factors = scan_dataset_factors(
            dataset.iter().map(|s| Ok(s.clone())),
            &catalog,
            &LbpConfig::default(),
            "fixture",
            "cfg",
        )
        .unwrap();
        let otp = build_otp(&catalog, &provider).unwrap();
        let vtp = build_vtp(&catalog, &factors, FactorSet::ALL, &provider).unwrap();
        Fixture {
            dataset,
            catalog,
            otp,
            vtp,
        }
    }

    fn full_ppar() -> TrainMode {
        TrainMode::Ppar {
            ppa_lt: true,
            ppa_c: true,
            pr: true,
        }
    }

    #[test]
    fn zero_alignment_weight_collapses_the_objective() {
        let fx = fixture();
        let mut cfg = tiny_cfg(full_ppar());
        cfg.alpha_pa = 0.0;
        let mut trainer =
            Trainer::new(cfg, fx.catalog.clone(), Some(fx.otp.clone()), Some(fx.vtp.clone()))
                .unwrap();
        let batch = assemble_batch(&fx.dataset, &trainer.cfg, 0).unwrap();
        let report = trainer.train_step(&batch).unwrap();
        assert!((report.l_all - report.l_rs).abs() < 1e-9);
        assert!(report.l_pa > 0.0, "alignment is still computed, just unweighted");
    }

    #[test]
    fn step_report_recomposes_from_module_level_ops() {
        let fx = fixture();
        let cfg = tiny_cfg(full_ppar());
        let mut trainer =
            Trainer::new(cfg, fx.catalog.clone(), Some(fx.otp.clone()), Some(fx.vtp.clone()))
                .unwrap();
        let batch = assemble_batch(&fx.dataset, &trainer.cfg, 0).unwrap();
        let frozen = trainer.clone();
        let report = trainer.train_step(&batch).unwrap();

        // Recompose L_rs and L_pa outside the trainer, from the frozen
        // pre-step state, using only public module functions.
        let cfg = &frozen.cfg;
        let mut outs = Vec::new();
        let mut masks = Vec::new();
        for (slot, sample) in batch.iter().enumerate() {
            let image = augment_image(&cfg.photometric, cfg.seed, 0, slot, &sample.image);
            let (out, _) = frozen.backbone.forward(&normalize_image(&image)).unwrap();
            outs.push(out);
            masks.push(sample.mask.clone());
        }
        let mut us = Vec::new();
        for out in &outs {
            let projected = frozen.projections[3]
                .project_map(&out.taps[3].map)
                .unwrap();
            us.push(pixel_uncertainty(&class_similarity(&projected, &fx.otp).unwrap()));
        }
        let weights = reweight_map_batch(&us).unwrap();
        let mut parts = Vec::new();
        for ((out, mask), w) in outs.iter().zip(&masks).zip(&weights) {
            let w_full = resize_weights_nearest(w, mask.dim()).unwrap();
            parts.push(ce_partials(&out.logits, mask, &w_full, 255).unwrap());
        }
        let l_rs = pool_ce(&parts).loss;

        let stage_mask = |stage: usize| -> Vec<Array2<u8>> {
            outs.iter()
                .zip(&masks)
                .map(|(o, m)| {
                    let (_, h, w) = o.taps[stage].map.dim();
                    downsample_labels(m, (h, w)).unwrap()
                })
                .collect()
        };
        let shallow_taps: Vec<&FeatureTap> = outs.iter().map(|o| &o.taps[0]).collect();
        let shallow_report =
            batch_centroids(&shallow_taps, &stage_mask(0), &fx.catalog).unwrap();
        let l_as = crate::align::shallow_alignment_loss(
            &shallow_report,
            &frozen.projections[0],
            &fx.vtp,
            &cfg.align,
        )
        .unwrap();
        let deep_taps: Vec<&FeatureTap> = outs.iter().map(|o| &o.taps[3]).collect();
        let deep_report = batch_centroids(&deep_taps, &stage_mask(3), &fx.catalog).unwrap();
        let l_ad = crate::align::deep_alignment_loss(
            &deep_report,
            &frozen.projections[3],
            &fx.otp,
            &cfg.align,
        )
        .unwrap();

        assert!((report.l_rs - l_rs).abs() < 1e-9, "{} vs {l_rs}", report.l_rs);
        assert!(
            (report.l_pa - (l_as + l_ad)).abs() < 1e-9,
            "{} vs {}",
            report.l_pa,
            l_as + l_ad
        );
        assert!(
            (report.l_all - (l_rs + 0.001 * (l_as + l_ad))).abs() < 1e-9,
            "combined objective recomposition"
        );
    }

    #[test]
    fn disabled_components_reproduce_a_plain_supervised_step() {
        let fx = fixture();
        let mut cfg = tiny_cfg(TrainMode::Ppar {
            ppa_lt: false,
            ppa_c: false,
            pr: false,
        });
        cfg.photometric.enabled = false;
        let mut trainer =
            Trainer::new(cfg.clone(), fx.catalog.clone(), None, None).unwrap();
        let batch = assemble_batch(&fx.dataset, &cfg, 0).unwrap();

        // Independent plain-CE step: forward, unit-weight CE, backward, SGD.
        let mut reference = ToyBackbone::new(&cfg.backbone, cfg.seed).unwrap();
        let mut vel = reference.zero_grads();
        let mut parts = Vec::new();
        let mut acts = Vec::new();
        for sample in &batch {
            let (out, act) = reference.forward(&normalize_image(&sample.image)).unwrap();
            let ones = Array2::ones(sample.mask.raw_dim());
            parts.push(ce_partials(&out.logits, &sample.mask, &ones, 255).unwrap());
            acts.push(act);
        }
        let total: usize = parts.iter().map(|p| p.valid_count).sum();
        let mut grads = reference.zero_grads();
        for (p, a) in parts.iter().zip(&acts) {
            let d = p.grad_unscaled.mapv(|v| v / total as f64);
            grads.add(&reference.backward(a, &d, [None, None, None, None]).unwrap());
        }
        let lr = poly_lr(cfg.lr, 0, cfg.max_iters, cfg.lr_power);
        let opt = SgdConfig { momentum: cfg.momentum, weight_decay: cfg.weight_decay };
        reference.sgd_step(&grads, &mut vel, &opt, lr);

        let report = trainer.train_step(&batch).unwrap();
        assert_eq!(report.l_pa, 0.0);
        assert_eq!(trainer.backbone, reference, "identical parameter update");
    }

    #[test]
    fn identical_seeds_march_in_lockstep() {
        let fx = fixture();
        let cfg = tiny_cfg(full_ppar());
        let mk = || {
            Trainer::new(
                cfg.clone(),
                fx.catalog.clone(),
                Some(fx.otp.clone()),
                Some(fx.vtp.clone()),
            )
            .unwrap()
        };
        let mut a = mk();
        let mut b = mk();
        for iter in 0..3 {
            let batch = assemble_batch(&fx.dataset, &cfg, iter).unwrap();
            let ra = a.train_step(&batch).unwrap();
            let rb = b.train_step(&batch).unwrap();
            assert_eq!(ra, rb);
        }
        assert_eq!(a.backbone, b.backbone);
        assert_eq!(a.projections, b.projections);
    }

    #[test]
    fn prototypes_stay_bitwise_frozen_across_steps() {
        let fx = fixture();
        let cfg = tiny_cfg(full_ppar());
        let mut trainer = Trainer::new(
            cfg.clone(),
            fx.catalog.clone(),
            Some(fx.otp.clone()),
            Some(fx.vtp.clone()),
        )
        .unwrap();
        for iter in 0..5 {
            let batch = assemble_batch(&fx.dataset, &cfg, iter).unwrap();
            trainer.train_step(&batch).unwrap();
        }
        assert_eq!(trainer.otp.as_ref().unwrap(), &fx.otp);
        assert_eq!(trainer.vtp.as_ref().unwrap(), &fx.vtp);
    }

    #[test]
    fn augmentation_is_deterministic_and_leaves_masks_alone() {
        let fx = fixture();
        let cfg = PhotometricConfig::default();
        let img = &fx.dataset[0].image;
        let a = augment_image(&cfg, 7, 3, 1, img);
        let b = augment_image(&cfg, 7, 3, 1, img);
        assert_eq!(a, b);
        let c = augment_image(&cfg, 7, 3, 0, img);
        assert_ne!(a, c, "slots draw independent jitter");
        let off = PhotometricConfig { enabled: false, ..cfg };
        assert_eq!(augment_image(&off, 7, 3, 1, img), *img);
        // The API takes no mask at all; batch assembly is what pairs the
        // augmented image back with its untouched mask.
        let batch = assemble_batch(&fx.dataset, &tiny_cfg(full_ppar()), 0).unwrap();
        assert!(batch.iter().all(|s| s.mask.iter().all(|&l| l < 5)));
    }

    #[test]
    fn naive_bank_starts_empty_then_engages() {
        let fx = fixture();
        let cfg = tiny_cfg(TrainMode::Baseline {
            multi_stage: false,
            source: BaselineSource::Np,
        });
        let mut trainer = Trainer::new(cfg.clone(), fx.catalog.clone(), None, None).unwrap();
        let batch = assemble_batch(&fx.dataset, &cfg, 0).unwrap();
        let first = trainer.train_step(&batch).unwrap();
        assert_eq!(first.l_pa, 0.0, "no prototypes to align against yet");
        assert_eq!(trainer.empty_bank_steps, 1);
        assert!(!trainer.bank.is_empty(), "bank was seeded after the step");
        let batch = assemble_batch(&fx.dataset, &cfg, 1).unwrap();
        let second = trainer.train_step(&batch).unwrap();
        assert!(second.l_pa > 0.0);
        assert_eq!(trainer.empty_bank_steps, 1);
    }

    #[test]
    fn multi_stage_baseline_touches_every_projection() {
        let fx = fixture();
        let cfg = tiny_cfg(TrainMode::Baseline {
            multi_stage: true,
            source: BaselineSource::Otp,
        });
        let mut trainer =
            Trainer::new(cfg.clone(), fx.catalog.clone(), Some(fx.otp.clone()), None).unwrap();
        let before = trainer.projections.clone();
        let batch = assemble_batch(&fx.dataset, &cfg, 0).unwrap();
        let report = trainer.train_step(&batch).unwrap();
        assert!(report.l_pa > 0.0);
        for (s, (a, b)) in before.iter().zip(&trainer.projections).enumerate() {
            assert_ne!(a, b, "stage {s} projection should have moved");
        }
    }

    #[test]
    fn fit_writes_monotonic_metrics_and_is_reproducible() {
        let fx = fixture();
        let dir = tempfile::tempdir().unwrap();
        let run = |name: &str| -> (Vec<StepReport>, String) {
            let cfg = tiny_cfg(full_ppar());
            let mut trainer = Trainer::new(
                cfg,
                fx.catalog.clone(),
                Some(fx.otp.clone()),
                Some(fx.vtp.clone()),
            )
            .unwrap();
            let path = dir.path().join(name);
            let opts = FitOptions {
                metrics_path: Some(path.clone()),
                ..FitOptions::default()
            };
            let reports = trainer.fit(&fx.dataset, &opts).unwrap();
            (reports, fs::read_to_string(path).unwrap())
        };
        let (reports, log_a) = run("a.ndjson");
        let (_, log_b) = run("b.ndjson");
        assert_eq!(reports.len(), 10);
        let iters: Vec<u64> = reports.iter().map(|r| r.iter).collect();
        assert_eq!(iters, (0..10).collect::<Vec<_>>());
        assert_eq!(log_a, log_b, "same seed, same bytes");
        assert_eq!(log_a.lines().count(), 10);
        let parsed: StepReport = serde_json::from_str(log_a.lines().next().unwrap()).unwrap();
        assert_eq!(parsed.iter, 0);
        assert!(log_a.contains("\"L_rs\"") && log_a.contains("\"grad_norm\""));
    }

    #[test]
    fn resume_continues_bitwise_from_a_checkpoint() {
        let fx = fixture();
        let dir = tempfile::tempdir().unwrap();
        let mk_cfg = || {
            let mut cfg = tiny_cfg(full_ppar());
            cfg.max_iters = 8;
            cfg
        };

        // Uninterrupted reference run.
        let mut straight = Trainer::new(
            mk_cfg(),
            fx.catalog.clone(),
            Some(fx.otp.clone()),
            Some(fx.vtp.clone()),
        )
        .unwrap();
        let opts = FitOptions {
            metrics_path: Some(dir.path().join("straight.ndjson")),
            ..FitOptions::default()
        };
        let straight_reports = straight.fit(&fx.dataset, &opts).unwrap();

        // Interrupted run: same config, externally stopped after 4 steps
        // with a checkpoint, then resumed.
        let mut first = Trainer::new(
            mk_cfg(),
            fx.catalog.clone(),
            Some(fx.otp.clone()),
            Some(fx.vtp.clone()),
        )
        .unwrap();
        let ckpt_path = dir.path().join("ckpt.json");
        let opts = FitOptions {
            checkpoint_path: Some(ckpt_path.clone()),
            config_hash: "cfg-hash".into(),
            catalog_hash: "cat-hash".into(),
            stop_after_iters: Some(4),
            ..FitOptions::default()
        };
        let first_reports = first.fit(&fx.dataset, &opts).unwrap();
        assert_eq!(first_reports.len(), 4);
        assert_eq!(&straight_reports[..4], &first_reports[..]);
        let ckpt = load_checkpoint(&ckpt_path).unwrap();
        assert_eq!(ckpt.payload.iter, 4);

        let mut resumed = Trainer::resume(
            mk_cfg(),
            fx.catalog.clone(),
            Some(fx.otp.clone()),
            Some(fx.vtp.clone()),
            ckpt,
            "cfg-hash",
            "cat-hash",
        )
        .unwrap();
        let reports = resumed.fit(&fx.dataset, &FitOptions::default()).unwrap();
        assert_eq!(reports.len(), 4);
        assert_eq!(&straight_reports[4..], &reports[..], "bitwise continuation");
        assert_eq!(straight.backbone, resumed.backbone);
        assert_eq!(straight.backbone_vel, resumed.backbone_vel);
    }

    #[test]
    fn checkpoint_mismatches_are_rejected() {
        let fx = fixture();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(full_ppar());
        let trainer = Trainer::new(
            cfg.clone(),
            fx.catalog.clone(),
            Some(fx.otp.clone()),
            Some(fx.vtp.clone()),
        )
        .unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&trainer, "hash-a", "cat-a", &path).unwrap();

        let ckpt = load_checkpoint(&path).unwrap();
        let err = Trainer::resume(
            cfg.clone(),
            fx.catalog.clone(),
            Some(fx.otp.clone()),
            Some(fx.vtp.clone()),
            ckpt,
            "hash-OTHER",
            "cat-a",
        )
        .unwrap_err();
        assert!(matches!(err, Error::ArtifactMismatch(_)));
        assert_eq!(err.exit_code(), 5);

        // Corrupt one payload byte: checksum must catch it.
        let body = fs::read_to_string(&path).unwrap();
        let tampered = body.replacen("\"iter\":0", "\"iter\":7", 1);
        assert_ne!(body, tampered);
        fs::write(&path, tampered).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checksum(_)), "{err:?}");

        // Truncated file.
        fs::write(&path, &body[..body.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert_eq!(err.exit_code(), 5, "{err:?}");
    }

    #[test]
    fn runaway_learning_rate_aborts_with_diagnostics() {
        let fx = fixture();
        let mut cfg = tiny_cfg(full_ppar());
        cfg.lr = 1e30;
        cfg.max_iters = 20;
        let mut trainer = Trainer::new(
            cfg,
            fx.catalog.clone(),
            Some(fx.otp.clone()),
            Some(fx.vtp.clone()),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = FitOptions {
            metrics_path: Some(dir.path().join("metrics.ndjson")),
            ..FitOptions::default()
        };
        let err = trainer.fit(&fx.dataset, &opts).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err:?}");
        assert_eq!(err.exit_code(), 4);
        let dump = fs::read_to_string(dir.path().join("diagnostics.json")).unwrap();
        assert!(dump.contains("L_rs"), "dump lists loss components: {dump}");
    }

    #[test]
    fn poly_schedule_hits_reference_points() {
        assert_eq!(poly_lr(0.01, 0, 2000, 0.9), 0.01);
        let half = poly_lr(0.01, 1000, 2000, 0.9);
        assert!((half - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!(poly_lr(0.01, 1999, 2000, 0.9) > 0.0);
        assert_eq!(poly_lr(0.01, 2000, 2000, 0.9), 0.0);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let ok = tiny_cfg(full_ppar());
        assert!(ok.validate().is_ok());
        for breakage in [
            |c: &mut TrainConfig| c.alpha_pa = -0.1,
            |c: &mut TrainConfig| c.lr = 0.0,
            |c: &mut TrainConfig| c.momentum = 1.0,
            |c: &mut TrainConfig| c.batch_size = 0,
            |c: &mut TrainConfig| c.crop = 16,
            |c: &mut TrainConfig| c.max_iters = 0,
            |c: &mut TrainConfig| c.ema_momentum = 1.0,
            |c: &mut TrainConfig| c.align.epsilon = 1.0,
            |c: &mut TrainConfig| c.photometric.brightness = (1.2, 0.8),
        ] {
            let mut bad = ok.clone();
            breakage(&mut bad);
            assert!(bad.validate().is_err());
        }

        // Missing prototypes for a mode that needs them.
        let fx = fixture();
        let err = Trainer::new(tiny_cfg(full_ppar()), fx.catalog.clone(), None, None).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
