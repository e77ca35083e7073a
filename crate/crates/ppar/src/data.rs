//! Datasets: folder-backed image/mask pairs and a synthetic two-domain
//! generator.
//!
//! The on-disk layout is `root/images/<stem>.png` (8-bit RGB) plus
//! `root/masks/<stem>.png` (8-bit single channel, values are class ids or the
//! catalog's ignore index). A `catalog.json` is written next to generated
//! datasets for humans and external tools.
//!
//! The toy generator draws five-class scenes (background, blob, stripe band,
//! disk, frame) whose *geometry* depends only on the seed while the *style*
//! (palette shift, texture frequency, noise, speckle clutter) comes from
//! [`ToyStyleParams`]. Two specs sharing a seed therefore produce pixel-wise
//! identical masks under different appearance — a controlled domain gap.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::catalog::ClassCatalog;
use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// One image/mask pair, fully decoded. Image layout is channel-first
/// `(3, H, W)`; the mask is `(H, W)`.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    pub image: Array3<u8>,
    pub mask: Array2<u8>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }
}

// ---------------------------------------------------------------------------
// image <-> ndarray conversions
// ---------------------------------------------------------------------------

pub fn rgb_to_array(img: &image::RgbImage) -> Array3<u8> {
    let (w, h) = img.dimensions();
    let mut arr = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            arr[(c, y as usize, x as usize)] = px.0[c];
        }
    }
    arr
}

pub fn array_to_rgb(arr: &Array3<u8>) -> image::RgbImage {
    let (c, h, w) = arr.dim();
    assert_eq!(c, 3, "expected channel-first RGB array");
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([
            arr[(0, y as usize, x as usize)],
            arr[(1, y as usize, x as usize)],
            arr[(2, y as usize, x as usize)],
        ])
    })
}

pub fn luma_to_array(img: &image::GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0]
    })
}

pub fn array_to_luma(arr: &Array2<u8>) -> image::GrayImage {
    image::GrayImage::from_fn(arr.ncols() as u32, arr.nrows() as u32, |x, y| {
        image::Luma([arr[(y as usize, x as usize)]])
    })
}

// ---------------------------------------------------------------------------
// Folder dataset
// ---------------------------------------------------------------------------

/// Lazily loading dataset over the `images/` + `masks/` folder layout.
///
/// Sample order is the lexicographic order of file stems, independent of how
/// the directory happens to be iterated.
#[derive(Debug, Clone)]
pub struct FolderDataset {
    root: PathBuf,
    stems: Vec<String>,
    catalog: ClassCatalog,
}

impl FolderDataset {
    pub fn open(root: &Path, catalog: &ClassCatalog) -> Result<Self> {
        let images_dir = root.join("images");
        let masks_dir = root.join("masks");
        if !images_dir.is_dir() {
            return Err(Error::Data(format!(
                "missing images directory: {}",
                images_dir.display()
            )));
        }
        let mut stems = Vec::new();
        let entries = std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&images_dir, e))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Data(format!("unreadable file name: {}", path.display())))?
                .to_string();
            if !masks_dir.join(format!("{stem}.png")).is_file() {
                return Err(Error::Data(format!("missing mask for image '{stem}'")));
            }
            stems.push(stem);
        }
        stems.sort_unstable();
        if stems.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "no image/mask pairs under {}",
                root.display()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            stems,
            catalog: catalog.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    pub fn stems(&self) -> &[String] {
        &self.stems
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Decode and validate one sample. Label values outside the catalog (and
    /// not the ignore index) are rejected with the offending values listed.
    pub fn load(&self, index: usize) -> Result<SegSample> {
        let stem = &self.stems[index];
        let img_path = self.root.join("images").join(format!("{stem}.png"));
        let mask_path = self.root.join("masks").join(format!("{stem}.png"));

        let img = image::open(&img_path)
            .map_err(|e| Error::Data(format!("cannot decode {}: {e}", img_path.display())))?
            .to_rgb8();
        let mask_dyn = image::open(&mask_path)
            .map_err(|e| Error::Data(format!("cannot decode {}: {e}", mask_path.display())))?;
        let mask = match mask_dyn {
            image::DynamicImage::ImageLuma8(m) => m,
            other => {
                return Err(Error::Data(format!(
                    "mask '{stem}' must be 8-bit single channel, got {:?}",
                    other.color()
                )))
            }
        };
        if img.dimensions() != mask.dimensions() {
            return Err(Error::Data(format!(
                "image/mask size mismatch for '{stem}': {:?} vs {:?}",
                img.dimensions(),
                mask.dimensions()
            )));
        }

        let mask_arr = luma_to_array(&mask);
        let mut bad: Vec<u8> = mask_arr
            .iter()
            .copied()
            .filter(|v| !self.catalog.is_known_label(*v))
            .collect();
        bad.sort_unstable();
        bad.dedup();
        if !bad.is_empty() {
            return Err(Error::Data(format!(
                "mask '{stem}' contains label values outside the catalog: {bad:?}"
            )));
        }

        Ok(SegSample {
            id: stem.clone(),
            image: rgb_to_array(&img),
            mask: mask_arr,
        })
    }

    pub fn load_all(&self) -> Result<Vec<SegSample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }

    /// Iterator of lazily loaded samples, in stem order.
    pub fn iter(&self) -> impl Iterator<Item = Result<SegSample>> + '_ {
        (0..self.len()).map(move |i| self.load(i))
    }
}

// ---------------------------------------------------------------------------
// Toy scene generator
// ---------------------------------------------------------------------------

pub const TOY_CLASS_NAMES: [&str; 5] = ["background", "blob", "stripe band", "disk", "frame"];

/// Catalog used by the synthetic benchmark: five classes, ignore index 255.
pub fn toy_catalog() -> ClassCatalog {
    ClassCatalog::from_names(&TOY_CLASS_NAMES, 255).expect("static catalog is valid")
}

/// Mean per-class area fractions the generator produces, measured over 200
/// scenes at 64×64. Tests hold generated datasets to within ±20% of these.
pub const TOY_AREA_TARGETS: [f64; 5] = [0.535, 0.100, 0.148, 0.084, 0.133];

/// Appearance knobs. Geometry never reads these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyStyleParams {
    /// Per-class hue rotation in radians.
    pub hue: [f64; 5],
    /// Per-class brightness multiplier.
    pub brightness: [f64; 5],
    /// Multiplier on every texture's spatial frequency.
    pub texture_freq: f64,
    /// Multiplier on every texture's amplitude.
    pub texture_amp: f64,
    /// Standard deviation of per-channel Gaussian pixel noise (intensity units).
    pub noise_sigma: f64,
    /// Expected number of small random-colored speckle blotches per image.
    /// Speckles perturb appearance only; masks keep the underlying class.
    pub speckle_rate: f64,
}

impl ToyStyleParams {
    /// Neutral appearance: no shifts, mild texture, light noise.
    pub fn neutral() -> Self {
        Self {
            hue: [0.0; 5],
            brightness: [1.0; 5],
            texture_freq: 1.0,
            texture_amp: 1.0,
            noise_sigma: 4.0,
            speckle_rate: 0.0,
        }
    }
}

/// Everything needed to materialize one domain deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDomainSpec {
    pub domain_id: String,
    pub seed: u64,
    pub style: ToyStyleParams,
}

impl ToyDomainSpec {
    /// Source-domain preset of the desk-scale benchmark: neutral palette but
    /// heavy appearance clutter — noise plus frequent random-colored
    /// speckles the masks do not record, i.e. label noise to overfit.
    pub fn benchmark_source(seed: u64) -> Self {
        Self {
            domain_id: "toy-source".into(),
            seed,
            style: ToyStyleParams {
                hue: [0.0; 5],
                brightness: [1.0; 5],
                texture_freq: 1.0,
                texture_amp: 1.0,
                noise_sigma: 8.0,
                speckle_rate: 12.0,
            },
        }
    }

    /// Target-domain preset: per-class palette and brightness shifts plus
    /// denser textures, but clean of clutter.
    pub fn benchmark_target(seed: u64) -> Self {
        Self {
            domain_id: "toy-target".into(),
            seed,
            style: ToyStyleParams {
                hue: [0.9, -0.8, 0.7, -0.9, 0.8],
                brightness: [0.72, 1.25, 0.70, 1.22, 0.74],
                texture_freq: 1.7,
                texture_amp: 1.5,
                noise_sigma: 7.0,
                speckle_rate: 0.0,
            },
        }
    }
}

/// The geometry the texture renderer needs back from mask drawing: the
/// stripe direction and the blob ellipse (both anchor procedural textures).
struct SceneGeom {
    band_horizontal: bool,
    blob: (f64, f64, f64, f64), // (cy, cx, semi_y, semi_x)
}

fn draw_geometry(size: usize, rng: &mut impl Rng) -> (Array2<u8>, SceneGeom) {
    let s = size as i64;
    let mut mask = Array2::<u8>::zeros((size, size));
    // Shape extents scale with the scene so any size ≥ 32 stays drawable;
    // the divisions reproduce the reference ranges exactly at size 64.
    let scaled = |k: usize| (size * k) / 64;

    // Stripe band spans the image along one axis.
    let band_horizontal = rng.gen_bool(0.5);
    let band_thickness = rng.gen_range(scaled(12)..=scaled(20));
    let band_start = rng.gen_range(2..size - band_thickness - 2);
    for i in band_start..band_start + band_thickness {
        for j in 0..size {
            let (y, x) = if band_horizontal { (i, j) } else { (j, i) };
            mask[(y, x)] = 2;
        }
    }

    // Frame: hollow rectangle ring.
    let fh = rng.gen_range(scaled(28)..=scaled(44).min(size - 5));
    let fw = rng.gen_range(scaled(28)..=scaled(44).min(size - 5));
    let ft = rng.gen_range(scaled(5).max(2)..=scaled(8).max(3));
    let top = rng.gen_range(2..size - fh - 2);
    let left = rng.gen_range(2..size - fw - 2);
    for y in top..top + fh {
        for x in left..left + fw {
            let on_border =
                y < top + ft || y >= top + fh - ft || x < left + ft || x >= left + fw - ft;
            if on_border {
                mask[(y, x)] = 4;
            }
        }
    }

    // Blob: axis-aligned ellipse.
    let fscale = size as f64 / 64.0;
    let semi_y = rng.gen_range(9.0 * fscale..=16.0 * fscale);
    let semi_x = rng.gen_range(9.0 * fscale..=16.0 * fscale);
    let bcy = rng.gen_range(semi_y + 2.0..size as f64 - semi_y - 2.0);
    let bcx = rng.gen_range(semi_x + 2.0..size as f64 - semi_x - 2.0);
    for y in 0..s {
        for x in 0..s {
            let dy = (y as f64 + 0.5 - bcy) / semi_y;
            let dx = (x as f64 + 0.5 - bcx) / semi_x;
            if dy * dy + dx * dx <= 1.0 {
                mask[(y as usize, x as usize)] = 1;
            }
        }
    }

    // Disk on top of everything.
    let radius = rng.gen_range(8.0 * fscale..=13.0 * fscale);
    let dcy = rng.gen_range(radius + 2.0..size as f64 - radius - 2.0);
    let dcx = rng.gen_range(radius + 2.0..size as f64 - radius - 2.0);
    for y in 0..s {
        for x in 0..s {
            let dy = y as f64 + 0.5 - dcy;
            let dx = x as f64 + 0.5 - dcx;
            if dy * dy + dx * dx <= radius * radius {
                mask[(y as usize, x as usize)] = 3;
            }
        }
    }

    let geom = SceneGeom {
        band_horizontal,
        blob: (bcy, bcx, semi_y, semi_x),
    };
    (mask, geom)
}

/// Base palette per class, before any style shift.
const TOY_PALETTE: [[f64; 3]; 5] = [
    [88.0, 108.0, 66.0],   // background: mossy green
    [168.0, 62.0, 60.0],   // blob: brick red
    [62.0, 88.0, 168.0],   // stripe band: blue
    [200.0, 178.0, 64.0],  // disk: yellow
    [122.0, 120.0, 126.0], // frame: gray
];

/// Rotate an RGB triple around the gray axis by `angle` radians.
pub(crate) fn hue_rotate(rgb: [f64; 3], angle: f64) -> [f64; 3] {
    const K: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)
    let (sin, cos) = angle.sin_cos();
    let t = (1.0 - cos) / 3.0;
    let m = [
        [cos + t, t - K * sin, t + K * sin],
        [t + K * sin, cos + t, t - K * sin],
        [t - K * sin, t + K * sin, cos + t],
    ];
    let mut out = [0.0; 3];
    for (i, row) in m.iter().enumerate() {
        out[i] = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
    }
    out
}

/// Intensity texture added to all channels before the hue/brightness shift.
#[allow(clippy::too_many_arguments)]
fn texture_value(
    class: u8,
    y: usize,
    x: usize,
    geom: &SceneGeom,
    freq_scale: f64,
    amp_scale: f64,
    band_phase: f64,
    bg_phase: f64,
) -> f64 {
    use std::f64::consts::TAU;
    match class {
        0 => {
            let f = freq_scale / 24.0;
            amp_scale * 10.0 * (TAU * f * (y as f64 + x as f64) * std::f64::consts::FRAC_1_SQRT_2 + bg_phase).sin()
        }
        1 => {
            let (cy, cx, sy, sx) = geom.blob;
            let r = (((y as f64 - cy) / sy).powi(2) + ((x as f64 - cx) / sx).powi(2)).sqrt();
            amp_scale * 12.0 * (TAU * freq_scale * 0.75 * r).cos()
        }
        2 => {
            let along = if geom.band_horizontal { x as f64 } else { y as f64 };
            let f = freq_scale / 6.0;
            amp_scale * 22.0 * (TAU * f * along + band_phase).sin()
        }
        _ => 0.0,
    }
}

/// Render one styled image for a mask produced by [`draw_geometry`].
fn render_image(
    mask: &Array2<u8>,
    geom: &SceneGeom,
    style: &ToyStyleParams,
    rng: &mut impl Rng,
) -> Array3<u8> {
    let size = mask.nrows();
    // Per-image draws happen in a fixed order; the order is part of the
    // format, since changing it changes every generated byte.
    let brightness_jitter: f64 = rng.gen_range(0.93..1.07);
    let hue_jitter: f64 = rng.gen_range(-0.06..0.06);
    let band_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let bg_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

    let noise = Normal::new(0.0, style.noise_sigma.max(1e-12)).expect("sigma is finite");
    let mut img = Array3::<u8>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let n = mask[(y, x)];
            let base = TOY_PALETTE[n as usize];
            let tex = texture_value(
                n,
                y,
                x,
                geom,
                style.texture_freq,
                style.texture_amp,
                band_phase,
                bg_phase,
            );
            let mut rgb = [
                (base[0] + tex) * brightness_jitter,
                (base[1] + tex) * brightness_jitter,
                (base[2] + tex) * brightness_jitter,
            ];
            rgb = hue_rotate(rgb, style.hue[n as usize] + hue_jitter);
            for (c, v) in rgb.iter_mut().enumerate() {
                *v *= style.brightness[n as usize];
                if style.noise_sigma > 0.0 {
                    *v += noise.sample(rng);
                }
                img[(c, y, x)] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    // Speckle clutter: appearance-only outliers the mask does not record.
    let mut n_speckles = style.speckle_rate.floor() as usize;
    if rng.gen::<f64>() < style.speckle_rate.fract() {
        n_speckles += 1;
    }
    for _ in 0..n_speckles {
        let cy = rng.gen_range(0..size) as i64;
        let cx = rng.gen_range(0..size) as i64;
        let r = rng.gen_range(1..=3) as i64;
        let color: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for y in (cy - r).max(0)..(cy + r + 1).min(size as i64) {
            for x in (cx - r).max(0)..(cx + r + 1).min(size as i64) {
                if (y - cy).pow(2) + (x - cx).pow(2) <= r * r {
                    for c in 0..3 {
                        img[(c, y as usize, x as usize)] = color[c];
                    }
                }
            }
        }
    }
    img
}

/// Canonical hash of a toy spec plus count/size, stamped into the manifest so
/// stale directories are regenerated rather than silently reused.
pub fn toy_manifest_hash(spec: &ToyDomainSpec, count: usize, size: usize) -> String {
    let body = serde_json::to_string(spec).expect("spec serializes");
    let mut hasher = Sha256::new();
    hasher.update(body.as_bytes());
    hasher.update((count as u64).to_le_bytes());
    hasher.update((size as u64).to_le_bytes());
    hex_string(&hasher.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToyManifest {
    schema: u32,
    spec: ToyDomainSpec,
    count: usize,
    size: usize,
    spec_hash: String,
}

/// Generate `count` images of `size`×`size` under `root`, deterministically:
/// the same spec always produces byte-identical files.
pub fn generate_toy_domain(
    spec: &ToyDomainSpec,
    count: usize,
    size: usize,
    root: &Path,
) -> Result<FolderDataset> {
    if count == 0 {
        return Err(Error::Validation("toy dataset count must be positive".into()));
    }
    if size < 32 {
        return Err(Error::Validation(
            "toy scenes need at least 32x32 pixels to fit all shapes".into(),
        ));
    }
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    for index in 0..count {
        let mut geom_rng = derive_rng(spec.seed, "toy-geom", index as u64);
        let (mask, geom) = draw_geometry(size, &mut geom_rng);
        let mut style_rng = derive_rng(spec.seed, "toy-style", index as u64);
        let img = render_image(&mask, &geom, &spec.style, &mut style_rng);

        let stem = format!("{index:05}");
        array_to_rgb(&img)
            .save(images_dir.join(format!("{stem}.png")))
            .map_err(|e| Error::Data(format!("writing image {stem}: {e}")))?;
        array_to_luma(&mask)
            .save(masks_dir.join(format!("{stem}.png")))
            .map_err(|e| Error::Data(format!("writing mask {stem}: {e}")))?;
    }

    let catalog = toy_catalog();
    catalog.save(&root.join("catalog.json"))?;
    let manifest = ToyManifest {
        schema: 1,
        spec: spec.clone(),
        count,
        size,
        spec_hash: toy_manifest_hash(spec, count, size),
    };
    let manifest_path = root.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&manifest_path, e))?;

    FolderDataset::open(root, &catalog)
}

/// Open the toy dataset at `root`, generating it first when absent or stale
/// (manifest hash mismatch).
pub fn ensure_toy_domain(
    spec: &ToyDomainSpec,
    count: usize,
    size: usize,
    root: &Path,
) -> Result<FolderDataset> {
    let manifest_path = root.join("manifest.json");
    if manifest_path.is_file() {
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(&manifest_path, e))?;
        if let Ok(manifest) = serde_json::from_str::<ToyManifest>(&text) {
            if manifest.spec_hash == toy_manifest_hash(spec, count, size) {
                return FolderDataset::open(root, &toy_catalog());
            }
        }
    }
    generate_toy_domain(spec, count, size, root)
}
