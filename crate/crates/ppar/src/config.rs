//! Run configuration: a single JSON document with nested sections tying the
//! pipeline together, plus the hash chain that stamps artifacts.
//!
//! Hashing is layered so each pipeline stage can refuse inputs produced
//! under an incompatible upstream section without caring about unrelated
//! knobs:
//!
//! * `catalog` — class names and ignore index; guards everything.
//! * `factors` — catalog hash + source dataset + texture-operator settings;
//!   stamped into factor tables.
//! * `prototypes` — catalog hash + provider + enabled factors (+ factor
//!   hash when any factor is on); stamped into prototype caches.
//! * `full` — the canonical JSON of the whole document (after CLI
//!   overrides); stamped into checkpoints, metrics, and reports.
//!
//! The document is schema-validated before any work: unknown keys are
//! rejected everywhere, and cross-section consistency (mode toggles versus
//! the reweighting and alignment sections) is checked at resolution time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::AlignmentConfig;
use crate::backbone::BackboneConfig;
use crate::catalog::ClassCatalog;
use crate::error::{Error, Result};
use crate::factors::LbpConfig;
use crate::provider::{StubTextProvider, SubprocessProvider, TextEmbeddingProvider, PROVIDER_WEIGHTS_ENV};
use crate::reweight::ReweightScope;
use crate::train::{PhotometricConfig, TrainConfig, TrainMode};

/// Where the class catalog comes from: inline names or a catalog file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogSection {
    #[serde(default)]
    pub names: Option<Vec<String>>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_ignore_index")]
    pub ignore_index: u8,
}

fn default_ignore_index() -> u8 {
    255
}

/// Text-embedding backend selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProviderSection {
    /// Deterministic built-in provider; no external dependencies.
    Stub {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_embed_dim")]
        dim: usize,
    },
    /// External program speaking the line-JSON embedding protocol.
    Subprocess {
        command: Vec<String>,
        #[serde(default)]
        weights: Option<String>,
    },
}

fn default_embed_dim() -> usize {
    64
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection::Stub {
            seed: 0,
            dim: default_embed_dim(),
        }
    }
}

impl ProviderSection {
    /// Instantiate the provider. For the subprocess backend the weights
    /// location may be overridden through the environment.
    pub fn connect(&self) -> Result<Box<dyn TextEmbeddingProvider>> {
        match self {
            ProviderSection::Stub { seed, dim } => {
                Ok(Box::new(StubTextProvider::new(*seed, *dim)?))
            }
            ProviderSection::Subprocess { command, weights } => {
                let weights = std::env::var(PROVIDER_WEIGHTS_ENV)
                    .ok()
                    .or_else(|| weights.clone());
                Ok(Box::new(SubprocessProvider::connect(command.clone(), weights)?))
            }
        }
    }
}

/// Visual-factor mining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FactorsSection {
    pub lbp: LbpConfig,
}

/// Pixel-reweighting settings for the segmentation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReweightingSection {
    pub enabled: bool,
    pub scope: ReweightScope,
}

impl Default for ReweightingSection {
    fn default() -> Self {
        Self {
            enabled: true,
            scope: ReweightScope::Batch,
        }
    }
}

/// Optimizer, schedule, and mode settings. Alignment and reweighting knobs
/// live in their own sections; this holds the rest of the training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    /// Domain id (key into `datasets`) trained on.
    pub dataset: String,
    pub mode: TrainMode,
    pub alpha_pa: f64,
    pub lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub max_iters: u64,
    pub ema_momentum: f64,
    pub embed_dim: usize,
    pub checkpoint_every: u64,
    pub backbone_widths: [usize; 4],
    pub photometric: PhotometricConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dataset: "source".into(),
            mode: t.mode,
            alpha_pa: t.alpha_pa,
            lr: t.lr,
            lr_power: t.lr_power,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            crop: t.crop,
            max_iters: t.max_iters,
            ema_momentum: t.ema_momentum,
            embed_dim: default_embed_dim(),
            checkpoint_every: t.checkpoint_every,
            backbone_widths: t.backbone.widths,
            photometric: t.photometric,
        }
    }
}

/// Which domains evaluation runs against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub targets: Vec<String>,
}

/// The whole run configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub catalog: CatalogSection,
    /// Domain id → dataset folder.
    pub datasets: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub provider: ProviderSection,
    #[serde(default)]
    pub factors: FactorsSection,
    #[serde(default)]
    pub alignment: AlignmentConfig,
    #[serde(default)]
    pub reweighting: ReweightingSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvalSection,
}

fn default_seed() -> u64 {
    1
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// The four stamped hashes, innermost first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigHashes {
    pub catalog: String,
    pub factors: String,
    pub prototypes: String,
    pub full: String,
}

fn hex_of(h: Sha256) -> String {
    crate::data::hex_string(&h.finalize())
}

fn compute_hashes(run: &RunConfig, catalog: &ClassCatalog) -> Result<ConfigHashes> {
    let mut h = Sha256::new();
    for class in catalog.classes() {
        h.update(class.name.as_bytes());
        h.update([0u8]);
    }
    h.update([catalog.ignore_index()]);
    let catalog_hash = hex_of(h);

    let mut h = Sha256::new();
    h.update(catalog_hash.as_bytes());
    h.update(run.training.dataset.as_bytes());
    h.update([0u8]);
    if let Some(path) = run.datasets.get(&run.training.dataset) {
        h.update(path.to_string_lossy().as_bytes());
    }
    h.update([0u8]);
    h.update(
        serde_json::to_string(&run.factors.lbp)
            .expect("texture settings serialize")
            .as_bytes(),
    );
    let factors_hash = hex_of(h);

    let mut h = Sha256::new();
    h.update(catalog_hash.as_bytes());
    h.update(
        serde_json::to_string(&run.provider)
            .expect("provider section serializes")
            .as_bytes(),
    );
    h.update(
        serde_json::to_string(&run.alignment.enabled_factors)
            .expect("factor set serializes")
            .as_bytes(),
    );
    if run.alignment.enabled_factors.any() {
        h.update(factors_hash.as_bytes());
    }
    let prototypes_hash = hex_of(h);

    let mut h = Sha256::new();
    h.update(
        serde_json::to_string(run)
            .expect("run config serializes")
            .as_bytes(),
    );
    let full = hex_of(h);

    Ok(ConfigHashes {
        catalog: catalog_hash,
        factors: factors_hash,
        prototypes: prototypes_hash,
        full,
    })
}

/// A validated configuration with its catalog loaded, hashes computed, and
/// all paths resolved against the config file's directory.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    /// The document exactly as parsed (post any CLI overrides); hashing
    /// covers this form, so relocating the working directory does not
    /// invalidate artifacts.
    pub run: RunConfig,
    pub catalog: ClassCatalog,
    pub train: TrainConfig,
    pub hashes: ConfigHashes,
    pub output_dir: PathBuf,
    pub datasets: BTreeMap<String, PathBuf>,
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Validate a parsed document, load its catalog, compute hashes, and build
/// the training configuration. `base_dir` anchors relative paths (use the
/// config file's parent directory).
pub fn resolve(run: RunConfig, base_dir: &Path) -> Result<ResolvedConfig> {
    // Catalog: exactly one source.
    let catalog = match (&run.catalog.names, &run.catalog.path) {
        (Some(names), None) => {
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            ClassCatalog::from_names(&refs, run.catalog.ignore_index)?
        }
        (None, Some(path)) => ClassCatalog::load(&resolve_path(base_dir, path))?,
        _ => {
            return Err(Error::Validation(
                "catalog section must set exactly one of 'names' or 'path'".into(),
            ))
        }
    };

    if run.datasets.is_empty() {
        return Err(Error::Validation("datasets section is empty".into()));
    }
    if !run.datasets.contains_key(&run.training.dataset) {
        return Err(Error::Validation(format!(
            "training dataset '{}' is not declared in datasets",
            run.training.dataset
        )));
    }
    for target in &run.evaluation.targets {
        if !run.datasets.contains_key(target) {
            return Err(Error::Validation(format!(
                "evaluation target '{target}' is not declared in datasets"
            )));
        }
    }

    // Cross-section consistency: the mode's toggles are the authority, and
    // the dedicated sections must agree rather than silently diverge.
    match &run.training.mode {
        TrainMode::Ppar { pr, .. } => {
            if *pr != run.reweighting.enabled {
                return Err(Error::Validation(format!(
                    "mode sets pr={pr} but reweighting.enabled={}; make them agree",
                    run.reweighting.enabled
                )));
            }
            if run.training.mode.ppa_active()
                && run.alignment.enabled_factors != run.training.mode.vtp_factors()
            {
                return Err(Error::Validation(
                    "alignment.enabled_factors must match the mode's ppa_c/ppa_lt toggles"
                        .into(),
                ));
            }
        }
        TrainMode::Baseline { .. } => {
            if run.reweighting.enabled {
                return Err(Error::Validation(
                    "baseline modes do not reweight; set reweighting.enabled to false".into(),
                ));
            }
        }
    }

    if let ProviderSection::Stub { dim, .. } = &run.provider {
        if *dim != run.training.embed_dim {
            return Err(Error::Validation(format!(
                "stub provider dim {dim} differs from training.embed_dim {}",
                run.training.embed_dim
            )));
        }
    }

    let t = &run.training;
    let train = TrainConfig {
        alpha_pa: t.alpha_pa,
        lr: t.lr,
        lr_power: t.lr_power,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
        batch_size: t.batch_size,
        crop: t.crop,
        max_iters: t.max_iters,
        seed: run.seed,
        mode: t.mode,
        ema_momentum: t.ema_momentum,
        align: run.alignment.clone(),
        reweight_scope: run.reweighting.scope,
        photometric: t.photometric.clone(),
        backbone: BackboneConfig {
            widths: t.backbone_widths,
            n_classes: catalog.n_classes(),
        },
        embed_dim: t.embed_dim,
        checkpoint_every: t.checkpoint_every,
    };
    train.validate()?;

    let hashes = compute_hashes(&run, &catalog)?;
    let output_dir = resolve_path(base_dir, &run.output_dir);
    let datasets = run
        .datasets
        .iter()
        .map(|(k, v)| (k.clone(), resolve_path(base_dir, v)))
        .collect();

    Ok(ResolvedConfig {
        run,
        catalog,
        train,
        hashes,
        output_dir,
        datasets,
    })
}

/// Parse and resolve a config file in one step.
pub fn load(path: &Path) -> Result<ResolvedConfig> {
    let run = RunConfig::from_file(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    resolve(run, base)
}

impl ResolvedConfig {
    pub fn dataset_path(&self, id: &str) -> Result<&PathBuf> {
        self.datasets.get(id).ok_or_else(|| {
            Error::Validation(format!("dataset '{id}' is not declared in the config"))
        })
    }

    pub fn factor_table_path(&self) -> PathBuf {
        self.output_dir.join("factors.json")
    }

    pub fn otp_path(&self) -> PathBuf {
        self.output_dir.join("otp.json")
    }

    pub fn vtp_path(&self) -> PathBuf {
        self.output_dir.join("vtp.json")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join("metrics.ndjson")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output_dir.join("eval")
    }
}
