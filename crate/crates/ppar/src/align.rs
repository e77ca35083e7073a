//! Alignment objectives between batch class centroids and per-class
//! prototype vectors.
//!
//! Centroids live in stage channel space; a trainable affine projection
//! lifts each aligned stage to the prototype dimension. Both sides are then
//! converted to distributions by a temperature softmax and compared with an
//! ε-floored KL divergence, summed over the classes present in the batch.
//! Prototype targets are constants: no gradient ever flows into them.
//!
//! The progressive objective pairs the shallow stage with style-augmented
//! prototypes and the deep stage with plain class-name prototypes. The
//! single-stage (`spa_loss`) and multi-stage (`mpa_loss`) baselines reuse
//! the identical per-stage term with one prototype source for every stage.
//!
//! Gradients are computed in closed form (this crate has no autodiff). For
//! one class with projected centroid z = W·c + b, p = softmax(z/τ) and
//! target distribution q:
//!
//! ```text
//! L     = Σ_i p_i · (ln(p_i+ε) − ln(q_i+ε))
//! g_i   = ln(p_i+ε) − ln(q_i+ε) + p_i/(p_i+ε)
//! dL/dz_j = (1/τ) · p_j · (g_j − Σ_i p_i·g_i)
//! dL/dW = dz ⊗ c,   dL/db = dz,   dL/dc = Wᵀ·dz
//! ```

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::centroids::{CentroidReport, EmaPrototypeBank, Stage};
use crate::error::{Error, Result};
use crate::text::{FactorSet, PrototypeKind, PrototypeSet};

/// Shared knobs for every alignment objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    /// Softmax temperature for converting vectors to distributions.
    pub temperature: f64,
    /// Flooring constant added inside both logs of the KL divergence.
    pub epsilon: f64,
    /// Stage whose centroids align with the style-augmented prototypes.
    pub shallow_stage: Stage,
    /// Which visual factors the style-augmented prototypes carry.
    pub enabled_factors: FactorSet,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            epsilon: 1e-8,
            shallow_stage: Stage::S1,
            enabled_factors: FactorSet::ALL,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Validation(format!(
                "temperature must be a positive finite number, got {}",
                self.temperature
            )));
        }
        if self.shallow_stage == Stage::S4 {
            return Err(Error::Validation(
                "the shallow alignment stage must be one of s1..s3; s4 is the deep stage".into(),
            ));
        }
        validate_epsilon(self.epsilon)
    }
}

fn validate_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon <= 1e-4) {
        return Err(Error::Validation(format!(
            "epsilon must lie in (0, 1e-4], got {epsilon}"
        )));
    }
    Ok(())
}

/// Trainable affine map from one stage's channel count to the prototype
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    /// Weight matrix, shape `(out_dim, in_dim)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl ProjectionHead {
    /// Gaussian init scaled by `1/sqrt(in_dim)`, zero bias.
    pub fn new_random(in_dim: usize, out_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| {
            let u: f64 = rng.sample(rand_distr::StandardNormal);
            u * scale
        });
        Self {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.dim().1
    }

    pub fn out_dim(&self) -> usize {
        self.w.dim().0
    }

    pub fn project(&self, v: &Array1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.in_dim() {
            return Err(Error::Validation(format!(
                "projection expects {} input channels, got {}",
                self.in_dim(),
                v.len()
            )));
        }
        Ok(self.w.dot(v) + &self.b)
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Apply the affine map to every spatial position of a `(C, H, W)`
    /// tensor, yielding `(out_dim, H, W)`. Forward-only: the one consumer
    /// (the similarity path) treats its output as a constant.
    pub fn project_map(&self, map: &ndarray::Array3<f64>) -> Result<ndarray::Array3<f64>> {
        let (c, h, w) = map.dim();
        if c != self.in_dim() {
            return Err(Error::Validation(format!(
                "projection expects {} input channels, got {c}",
                self.in_dim()
            )));
        }
        let flat = map
            .view()
            .into_shape_with_order((c, h * w))
            .expect("feature map is contiguous");
        let mut out = self.w.dot(&flat);
        out += &self.b.view().insert_axis(ndarray::Axis(1));
        Ok(out
            .into_shape_with_order((self.out_dim(), h, w))
            .expect("fresh projection is contiguous"))
    }
}

/// Gradient buffers matching a [`ProjectionHead`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl ProjectionGrad {
    pub fn zeros_like(head: &ProjectionHead) -> Self {
        Self {
            w: Array2::zeros(head.w.raw_dim()),
            b: Array1::zeros(head.b.raw_dim()),
        }
    }
}

/// Temperature softmax: `softmax(v / τ)`, computed with the max-shift trick.
pub fn to_distribution(v: &Array1<f64>, temperature: f64) -> Result<Array1<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Validation(format!(
            "temperature must be a positive finite number, got {temperature}"
        )));
    }
    if v.is_empty() {
        return Err(Error::Validation("cannot normalize an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation(
            "distribution conversion requires finite inputs".into(),
        ));
    }
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut out = v.mapv(|x| ((x - max) / temperature).exp());
    let sum: f64 = out.sum();
    out.mapv_inplace(|x| x / sum);
    Ok(out)
}

fn validate_simplex(name: &str, p: &Array1<f64>) -> Result<()> {
    if p.iter().any(|&x| !x.is_finite() || x < -1e-9) {
        return Err(Error::Validation(format!(
            "{name} must have finite nonnegative entries"
        )));
    }
    let sum: f64 = p.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!(
            "{name} must sum to 1 within 1e-6, got {sum}"
        )));
    }
    Ok(())
}

/// ε-floored KL divergence `Σ p_i · ln((p_i+ε)/(q_i+ε))` between two simplex
/// vectors. The symmetric flooring keeps the result finite for zero entries
/// and exactly zero when `p == q`. Flooring can leave an O(ε²) negative
/// residue near the floored-objective minimizer; that is clamped away so the
/// divergence keeps its defining property (≥ 0).
pub fn kl_simplex(p: &Array1<f64>, q: &Array1<f64>, epsilon: f64) -> Result<f64> {
    validate_epsilon(epsilon)?;
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Validation(format!(
            "KL needs two equal-length nonempty vectors, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    validate_simplex("first argument", p)?;
    validate_simplex("second argument", q)?;
    let sum: f64 = p
        .iter()
        .zip(q.iter())
        .map(|(&pi, &qi)| pi * ((pi + epsilon) / (qi + epsilon)).ln())
        .sum();
    Ok(sum.max(0.0))
}

/// One class's KL term through the temperature softmax: returns the loss and
/// its gradient with respect to the pre-softmax vector `z`. The target
/// distribution `q` is a constant.
fn kl_softmax_term(z: &Array1<f64>, q: &Array1<f64>, cfg: &AlignmentConfig) -> (f64, Array1<f64>) {
    let tau = cfg.temperature;
    let eps = cfg.epsilon;
    let max = z.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut p = z.mapv(|x| ((x - max) / tau).exp());
    let sum: f64 = p.sum();
    p.mapv_inplace(|x| x / sum);

    let mut loss = 0.0;
    let mut g = Array1::<f64>::zeros(p.len());
    for i in 0..p.len() {
        let ratio = (p[i] + eps) / (q[i] + eps);
        loss += p[i] * ratio.ln();
        g[i] = ratio.ln() + p[i] / (p[i] + eps);
    }
    let inner = p.dot(&g);
    let dz = Array1::from_shape_fn(p.len(), |j| p[j] * (g[j] - inner) / tau);
    (loss, dz)
}

/// Loss and gradients for aligning one report's centroids against per-class
/// target vectors through one projection head.
#[derive(Debug, Clone)]
pub struct AlignmentTerms {
    pub loss: f64,
    pub grad_w: Array2<f64>,
    pub grad_b: Array1<f64>,
    /// Per-class `dL/d(centroid)`, in stage channel space.
    pub grad_centroids: Vec<Option<Array1<f64>>>,
    /// How many classes actually contributed a KL term.
    pub aligned_classes: usize,
}

/// Unit-normalize a target vector; degenerate norms pass through unchanged
/// so the caller never divides by zero.
fn normalize_target(v: &Array1<f64>) -> Array1<f64> {
    let norm = v.dot(v).sqrt();
    if norm > 1e-12 {
        v / norm
    } else {
        v.clone()
    }
}

/// Core alignment computation shared by every objective in this module:
/// sum of `kl(softmax(normalize(project(centroid))/τ), softmax(target/τ))`
/// over classes present in both the report and the target list. Targets are
/// unit-normalized by the callers, and the projected centroid is
/// unit-normalized here for the same reason: both softmax arguments live on
/// the sphere, so the divergence compares directions and stays bounded no
/// matter how large the feature scale grows during training.
pub fn alignment_terms(
    report: &CentroidReport,
    projection: &ProjectionHead,
    targets: &[Option<Array1<f64>>],
    cfg: &AlignmentConfig,
) -> Result<AlignmentTerms> {
    cfg.validate()?;
    if projection.in_dim() != report.dim {
        return Err(Error::Validation(format!(
            "projection expects {} input channels but {} centroids have {}",
            projection.in_dim(),
            report.stage,
            report.dim
        )));
    }
    if targets.len() != report.per_class.len() {
        return Err(Error::Validation(format!(
            "got {} targets for {} classes",
            targets.len(),
            report.per_class.len()
        )));
    }

    let mut out = AlignmentTerms {
        loss: 0.0,
        grad_w: Array2::zeros(projection.w.raw_dim()),
        grad_b: Array1::zeros(projection.b.raw_dim()),
        grad_centroids: vec![None; targets.len()],
        aligned_classes: 0,
    };

    for (n, (centroid, target)) in report.per_class.iter().zip(targets).enumerate() {
        let (Some(centroid), Some(target)) = (centroid, target) else {
            continue;
        };
        if target.len() != projection.out_dim() {
            return Err(Error::Validation(format!(
                "projected centroids have dim {} but the class {n} target has {}",
                projection.out_dim(),
                target.len()
            )));
        }
        let z_raw = projection.project(&centroid.vector)?;
        let norm = z_raw.dot(&z_raw).sqrt();
        let z_hat = normalize_target(&z_raw);
        let q = to_distribution(&normalize_target(target), cfg.temperature)?;
        let (loss, dz_hat) = kl_softmax_term(&z_hat, &q, cfg);
        // Pull the gradient back through the unit normalization (identity
        // when the norm was too small to divide by).
        let dz = if norm > 1e-12 {
            let radial = z_hat.dot(&dz_hat);
            Array1::from_shape_fn(dz_hat.len(), |j| (dz_hat[j] - z_hat[j] * radial) / norm)
        } else {
            dz_hat
        };
        out.loss += loss;
        for i in 0..dz.len() {
            if dz[i] != 0.0 {
                for j in 0..centroid.vector.len() {
                    out.grad_w[(i, j)] += dz[i] * centroid.vector[j];
                }
            }
        }
        out.grad_b += &dz;
        out.grad_centroids[n] = Some(projection.w.t().dot(&dz));
        out.aligned_classes += 1;
    }
    Ok(out)
}

fn text_targets(set: &PrototypeSet) -> Vec<Option<Array1<f64>>> {
    set.rows
        .iter()
        .map(|r| Some(normalize_target(&r.vector)))
        .collect()
}

fn bank_targets(bank: &EmaPrototypeBank) -> Vec<Option<Array1<f64>>> {
    bank.entries
        .iter()
        .map(|e| e.as_ref().map(|e| normalize_target(&e.vector)))
        .collect()
}

fn expect_kind(set: &PrototypeSet, kind: PrototypeKind, role: &str) -> Result<()> {
    if set.kind != kind {
        return Err(Error::Validation(format!(
            "{role} alignment requires {kind:?} prototypes, got {:?}",
            set.kind
        )));
    }
    Ok(())
}

/// Gradient-carrying shallow alignment term: centroids of the configured
/// shallow stage against the style-augmented prototypes.
pub fn shallow_alignment_terms(
    report: &CentroidReport,
    projection: &ProjectionHead,
    vtp: &PrototypeSet,
    cfg: &AlignmentConfig,
) -> Result<AlignmentTerms> {
    expect_kind(vtp, PrototypeKind::Vtp, "shallow")?;
    if report.stage != cfg.shallow_stage {
        return Err(Error::Validation(format!(
            "shallow alignment is configured for stage {} but the report is from {}",
            cfg.shallow_stage, report.stage
        )));
    }
    alignment_terms(report, projection, &text_targets(vtp), cfg)
}

/// Gradient-carrying deep alignment term: deep-stage centroids against the
/// plain class-name prototypes.
pub fn deep_alignment_terms(
    report: &CentroidReport,
    projection: &ProjectionHead,
    otp: &PrototypeSet,
    cfg: &AlignmentConfig,
) -> Result<AlignmentTerms> {
    expect_kind(otp, PrototypeKind::Otp, "deep")?;
    if report.stage != Stage::S4 {
        return Err(Error::Validation(format!(
            "deep alignment runs on stage s4, got a report from {}",
            report.stage
        )));
    }
    alignment_terms(report, projection, &text_targets(otp), cfg)
}

/// Shallow alignment loss value.
pub fn shallow_alignment_loss(
    report: &CentroidReport,
    projection: &ProjectionHead,
    vtp: &PrototypeSet,
    cfg: &AlignmentConfig,
) -> Result<f64> {
    Ok(shallow_alignment_terms(report, projection, vtp, cfg)?.loss)
}

/// Deep alignment loss value.
pub fn deep_alignment_loss(
    report: &CentroidReport,
    projection: &ProjectionHead,
    otp: &PrototypeSet,
    cfg: &AlignmentConfig,
) -> Result<f64> {
    Ok(deep_alignment_terms(report, projection, otp, cfg)?.loss)
}

/// Combined progressive alignment loss: shallow term plus deep term.
#[allow(clippy::too_many_arguments)]
pub fn progressive_alignment_loss(
    shallow_report: &CentroidReport,
    deep_report: &CentroidReport,
    shallow_projection: &ProjectionHead,
    deep_projection: &ProjectionHead,
    otp: &PrototypeSet,
    vtp: &PrototypeSet,
    cfg: &AlignmentConfig,
) -> Result<f64> {
    let l_as = shallow_alignment_loss(shallow_report, shallow_projection, vtp, cfg)?;
    let l_ad = deep_alignment_loss(deep_report, deep_projection, otp, cfg)?;
    Ok(l_as + l_ad)
}

/// Where baseline objectives take their per-class targets from.
#[derive(Debug, Clone, Copy)]
pub enum PrototypeSource<'a> {
    /// Running EMA bank in prototype space (the naive-prototype baseline).
    Naive(&'a EmaPrototypeBank),
    /// A frozen text prototype set (plain or style-augmented).
    Text(&'a PrototypeSet),
}

impl PrototypeSource<'_> {
    pub fn targets(&self, n_classes: usize) -> Result<Vec<Option<Array1<f64>>>> {
        let targets = match self {
            PrototypeSource::Naive(bank) => bank_targets(bank),
            PrototypeSource::Text(set) => text_targets(set),
        };
        if targets.len() != n_classes {
            return Err(Error::Validation(format!(
                "prototype source covers {} classes, batch reports {n_classes}",
                targets.len()
            )));
        }
        Ok(targets)
    }
}

/// Baseline loss value plus bookkeeping about how much of the batch it
/// could align.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineLossOutcome {
    pub loss: f64,
    pub aligned_classes: usize,
    /// True when classes were present but the source had no prototype for
    /// any of them (e.g. an empty EMA bank early in training).
    pub empty_source: bool,
}

/// Single-stage baseline: one KL alignment at the deep stage only.
pub fn spa_loss(
    report: &CentroidReport,
    source: PrototypeSource<'_>,
    projection: &ProjectionHead,
    cfg: &AlignmentConfig,
) -> Result<BaselineLossOutcome> {
    if report.stage != Stage::S4 {
        return Err(Error::Validation(format!(
            "the single-stage baseline aligns stage s4, got {}",
            report.stage
        )));
    }
    let targets = source.targets(report.per_class.len())?;
    let terms = alignment_terms(report, projection, &targets, cfg)?;
    Ok(BaselineLossOutcome {
        loss: terms.loss,
        aligned_classes: terms.aligned_classes,
        empty_source: report.any_present() && terms.aligned_classes == 0,
    })
}

/// Multi-stage baseline: the same prototype set aligned against every
/// supplied stage, summed. A single stage degenerates to [`spa_loss`].
pub fn mpa_loss(
    reports: &[&CentroidReport],
    projections: &[&ProjectionHead],
    source: PrototypeSource<'_>,
    cfg: &AlignmentConfig,
) -> Result<BaselineLossOutcome> {
    if reports.is_empty() {
        return Err(Error::Validation(
            "the multi-stage baseline needs at least one stage".into(),
        ));
    }
    if reports.len() != projections.len() {
        return Err(Error::Validation(format!(
            "got {} stage reports but {} projections",
            reports.len(),
            projections.len()
        )));
    }
    let mut out = BaselineLossOutcome {
        loss: 0.0,
        aligned_classes: 0,
        empty_source: false,
    };
    let mut any_present = false;
    for (report, projection) in reports.iter().zip(projections) {
        let targets = source.targets(report.per_class.len())?;
        let terms = alignment_terms(report, projection, &targets, cfg)?;
        out.loss += terms.loss;
        out.aligned_classes += terms.aligned_classes;
        any_present |= report.any_present();
    }
    out.empty_source = any_present && out.aligned_classes == 0;
    Ok(out)
}
