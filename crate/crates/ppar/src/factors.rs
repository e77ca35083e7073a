//! Per-class visual factor mining: dominant color and dominant local binary
//! pattern (LBP) texture code.
//!
//! The miner streams over a dataset once, accumulating per-class histograms
//! of exact 24-bit RGB colors and of 8-neighbor radius-1 LBP codes, then
//! takes the histogram modes. Ties break toward the numerically smallest
//! value so results never depend on iteration order.
//!
//! LBP convention: each of the 8 neighbors is compared against the center
//! with `neighbor >= center`; bits are collected clockwise starting at the
//! top-left corner, which holds the most significant bit. A constant patch
//! therefore codes to 255. Border pixels have no full neighborhood and are
//! skipped, so a code map is 2 smaller than its source in each dimension.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use crate::catalog::ClassCatalog;
use crate::data::SegSample;
use crate::error::{Error, Result};

pub const FACTOR_TABLE_SCHEMA: u32 = 1;

/// LBP parameters. Only the 8-neighbor, radius-1, `>=` variant is
/// implemented; the struct exists so files are self-describing and loaders
/// can reject anything else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LbpConfig {
    pub neighbors: u8,
    pub radius: u8,
    pub compare: String,
}

impl Default for LbpConfig {
    fn default() -> Self {
        Self {
            neighbors: 8,
            radius: 1,
            compare: "ge".into(),
        }
    }
}

impl LbpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors != 8 || self.radius != 1 || self.compare != "ge" {
            return Err(Error::Validation(format!(
                "unsupported LBP configuration: {self:?} (only 8/1/ge is implemented)"
            )));
        }
        Ok(())
    }
}

/// Neighbor offsets in clockwise order starting at the top-left; index 0 is
/// the most significant bit of the code.
const LBP_OFFSETS: [(i32, i32); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

/// Code for a single 3×3 patch, `patch[(1,1)]` being the center.
pub fn lbp_code(patch: &Array2<u8>) -> Result<u8> {
    if patch.dim() != (3, 3) {
        return Err(Error::Validation(format!(
            "lbp_code expects a 3x3 patch, got {:?}",
            patch.dim()
        )));
    }
    let center = patch[(1, 1)];
    let mut code = 0u8;
    for (i, (dy, dx)) in LBP_OFFSETS.iter().enumerate() {
        let v = patch[((1 + dy) as usize, (1 + dx) as usize)];
        if v >= center {
            code |= 1 << (7 - i);
        }
    }
    Ok(code)
}

/// LBP codes for every interior pixel of `gray`; output is
/// `(H-2) × (W-2)` with `out[(y,x)]` describing `gray[(y+1, x+1)]`.
pub fn lbp_map(gray: &Array2<u8>) -> Result<Array2<u8>> {
    let (h, w) = gray.dim();
    if h < 3 || w < 3 {
        return Err(Error::Validation(format!(
            "lbp_map needs at least 3x3 input, got {h}x{w}"
        )));
    }
    let mut out = Array2::<u8>::zeros((h - 2, w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let center = gray[(y, x)];
            let mut code = 0u8;
            for (i, (dy, dx)) in LBP_OFFSETS.iter().enumerate() {
                let v = gray[((y as i32 + dy) as usize, (x as i32 + dx) as usize)];
                if v >= center {
                    code |= 1 << (7 - i);
                }
            }
            out[(y - 1, x - 1)] = code;
        }
    }
    Ok(out)
}

/// ITU-R BT.601 luma, rounded to the nearest integer.
pub fn rgb_to_gray(image: &Array3<u8>) -> Result<Array2<u8>> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Validation(format!(
            "rgb_to_gray expects (3,H,W), got ({c},{h},{w})"
        )));
    }
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = 0.299 * image[(0, y, x)] as f64
                + 0.587 * image[(1, y, x)] as f64
                + 0.114 * image[(2, y, x)] as f64;
            out[(y, x)] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

fn pack_rgb(r: u8, g: u8, b: u8) -> u32 {
    ((r as u32) << 16) | ((g as u32) << 8) | b as u32
}

fn unpack_rgb(packed: u32) -> (u8, u8, u8) {
    (
        ((packed >> 16) & 0xff) as u8,
        ((packed >> 8) & 0xff) as u8,
        (packed & 0xff) as u8,
    )
}

/// Most frequent exact color among pixels of `class_id`. Returns the color
/// and its pixel count, or `None` when the class is absent. Ties break toward
/// the smallest packed 24-bit value.
pub fn class_color_mode(
    image: &Array3<u8>,
    mask: &Array2<u8>,
    class_id: u8,
) -> Result<Option<((u8, u8, u8), u64)>> {
    let (c, h, w) = image.dim();
    if c != 3 || (h, w) != mask.dim() {
        return Err(Error::Validation(format!(
            "image ({c},{h},{w}) and mask {:?} do not line up",
            mask.dim()
        )));
    }
    let mut hist: HashMap<u32, u64> = HashMap::new();
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] == class_id {
                let key = pack_rgb(image[(0, y, x)], image[(1, y, x)], image[(2, y, x)]);
                *hist.entry(key).or_insert(0) += 1;
            }
        }
    }
    Ok(mode_of_map(&hist).map(|(packed, count)| (unpack_rgb(packed), count)))
}

/// Most frequent LBP code among interior pixels of `class_id`. The mask is
/// cropped by one pixel per side so it lines up with `codes`.
pub fn class_texture_mode(
    codes: &Array2<u8>,
    mask: &Array2<u8>,
    class_id: u8,
) -> Result<Option<(u8, u64)>> {
    let (mh, mw) = mask.dim();
    if mh < 3 || mw < 3 || codes.dim() != (mh - 2, mw - 2) {
        return Err(Error::Validation(format!(
            "code map {:?} does not match mask interior of {:?}",
            codes.dim(),
            mask.dim()
        )));
    }
    let mut hist = [0u64; 256];
    for y in 0..mh - 2 {
        for x in 0..mw - 2 {
            if mask[(y + 1, x + 1)] == class_id {
                hist[codes[(y, x)] as usize] += 1;
            }
        }
    }
    Ok(mode_of_array(&hist))
}

/// Mode with smallest-key tie-break; `None` when the histogram is empty.
fn mode_of_map(hist: &HashMap<u32, u64>) -> Option<(u32, u64)> {
    let mut best: Option<(u32, u64)> = None;
    for (&key, &count) in hist {
        best = match best {
            None => Some((key, count)),
            Some((bk, bc)) => {
                if count > bc || (count == bc && key < bk) {
                    Some((key, count))
                } else {
                    Some((bk, bc))
                }
            }
        };
    }
    best
}

fn mode_of_array(hist: &[u64; 256]) -> Option<(u8, u64)> {
    let mut best: Option<(u8, u64)> = None;
    for (code, &count) in hist.iter().enumerate() {
        if count == 0 {
            continue;
        }
        // Ascending scan + strict '>' keeps the smallest code on ties.
        if best.map_or(true, |(_, bc)| count > bc) {
            best = Some((code as u8, count));
        }
    }
    best
}

/// One class row of a factor table. `color`/`texture` are `None` when no
/// supporting pixel exists; rows are never zero-filled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorRow {
    pub class_id: u8,
    pub color: Option<(u8, u8, u8)>,
    pub color_support: u64,
    pub texture: Option<u8>,
    pub texture_support: u64,
}

impl FactorRow {
    pub fn absent(&self) -> bool {
        self.color_support == 0
    }

    /// `#RRGGBB`, uppercase.
    pub fn color_hex(&self) -> Option<String> {
        self.color
            .map(|(r, g, b)| format!("#{r:02X}{g:02X}{b:02X}"))
    }
}

/// Mined per-class factors plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFactorTable {
    pub dataset_id: String,
    pub config_hash: String,
    pub lbp: LbpConfig,
    pub classes: Vec<FactorRow>,
}

impl VisualFactorTable {
    pub fn row(&self, class_id: u8) -> Option<&FactorRow> {
        self.classes.iter().find(|r| r.class_id == class_id)
    }
}

/// Streaming accumulator; summing histograms is commutative, so the result
/// is independent of sample order.
struct FactorAccumulator {
    color: Vec<HashMap<u32, u64>>,
    texture: Vec<[u64; 256]>,
}

impl FactorAccumulator {
    fn new(n_classes: usize) -> Self {
        Self {
            color: (0..n_classes).map(|_| HashMap::new()).collect(),
            texture: vec![[0u64; 256]; n_classes],
        }
    }

    fn add_sample(&mut self, sample: &SegSample, catalog: &ClassCatalog) -> Result<()> {
        let (c, h, w) = sample.image.dim();
        if c != 3 || (h, w) != sample.mask.dim() {
            return Err(Error::Data(format!(
                "sample '{}' has mismatched image/mask shapes",
                sample.id
            )));
        }
        let mut bad: Vec<u8> = sample
            .mask
            .iter()
            .copied()
            .filter(|v| !catalog.is_known_label(*v))
            .collect();
        bad.sort_unstable();
        bad.dedup();
        if !bad.is_empty() {
            return Err(Error::Validation(format!(
                "sample '{}' contains label values outside the catalog: {bad:?}",
                sample.id
            )));
        }

        for y in 0..h {
            for x in 0..w {
                let label = sample.mask[(y, x)];
                if label == catalog.ignore_index() {
                    continue;
                }
                let key = pack_rgb(
                    sample.image[(0, y, x)],
                    sample.image[(1, y, x)],
                    sample.image[(2, y, x)],
                );
                *self.color[label as usize].entry(key).or_insert(0) += 1;
            }
        }

        if h >= 3 && w >= 3 {
            let gray = rgb_to_gray(&sample.image)?;
            let codes = lbp_map(&gray)?;
            for y in 0..h - 2 {
                for x in 0..w - 2 {
                    let label = sample.mask[(y + 1, x + 1)];
                    if label == catalog.ignore_index() {
                        continue;
                    }
                    self.texture[label as usize][codes[(y, x)] as usize] += 1;
                }
            }
        }
        Ok(())
    }

    fn finish(self, dataset_id: &str, config_hash: &str, lbp: LbpConfig) -> VisualFactorTable {
        let classes = self
            .color
            .into_iter()
            .zip(self.texture)
            .enumerate()
            .map(|(class_id, (color_hist, texture_hist))| {
                let color_support: u64 = color_hist.values().sum();
                let texture_support: u64 = texture_hist.iter().sum();
                FactorRow {
                    class_id: class_id as u8,
                    color: mode_of_map(&color_hist).map(|(p, _)| unpack_rgb(p)),
                    color_support,
                    texture: mode_of_array(&texture_hist).map(|(code, _)| code),
                    texture_support,
                }
            })
            .collect();
        VisualFactorTable {
            dataset_id: dataset_id.to_string(),
            config_hash: config_hash.to_string(),
            lbp,
            classes,
        }
    }
}

/// Scan a dataset once and mine every class's dominant color and texture.
///
/// `config_hash` is provenance stamped into the table (and its file form) so
/// downstream stages can refuse stale tables.
pub fn scan_dataset_factors(
    samples: impl IntoIterator<Item = Result<SegSample>>,
    catalog: &ClassCatalog,
    lbp: &LbpConfig,
    dataset_id: &str,
    config_hash: &str,
) -> Result<VisualFactorTable> {
    lbp.validate()?;
    let mut acc = FactorAccumulator::new(catalog.n_classes());
    let mut n_samples = 0usize;
    for sample in samples {
        acc.add_sample(&sample?, catalog)?;
        n_samples += 1;
    }
    if n_samples == 0 {
        return Err(Error::EmptyDataset(format!(
            "factor scan of '{dataset_id}' saw no samples"
        )));
    }
    Ok(acc.finish(dataset_id, config_hash, lbp.clone()))
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorRowFile {
    class_id: u8,
    color_hex: Option<String>,
    color_rgb: Option<[u8; 3]>,
    texture_code: Option<u8>,
    color_support: u64,
    texture_support: u64,
    absent: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorTableFile {
    schema: u32,
    dataset_id: String,
    config_hash: String,
    lbp: LbpConfig,
    classes: Vec<FactorRowFile>,
}

pub fn save_factor_table(table: &VisualFactorTable, path: &Path) -> Result<()> {
    let file = FactorTableFile {
        schema: FACTOR_TABLE_SCHEMA,
        dataset_id: table.dataset_id.clone(),
        config_hash: table.config_hash.clone(),
        lbp: table.lbp.clone(),
        classes: table
            .classes
            .iter()
            .map(|r| FactorRowFile {
                class_id: r.class_id,
                color_hex: r.color_hex(),
                color_rgb: r.color.map(|(a, b, c)| [a, b, c]),
                texture_code: r.texture,
                color_support: r.color_support,
                texture_support: r.texture_support,
                absent: r.absent(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("factor table serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_factor_table(path: &Path) -> Result<VisualFactorTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: FactorTableFile =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if file.schema != FACTOR_TABLE_SCHEMA {
        return Err(Error::SchemaVersion {
            path: path.display().to_string(),
            found: file.schema,
            expected: FACTOR_TABLE_SCHEMA,
        });
    }
    file.lbp.validate()?;
    let classes = file
        .classes
        .iter()
        .map(|r| {
            let color = r.color_rgb.map(|[a, b, c]| (a, b, c));
            // color_hex is redundant with color_rgb; insist they agree.
            let row = FactorRow {
                class_id: r.class_id,
                color,
                color_support: r.color_support,
                texture: r.texture_code,
                texture_support: r.texture_support,
            };
            if row.color_hex() != r.color_hex {
                return Err(Error::Data(format!(
                    "factor table {}: color_hex and color_rgb disagree for class {}",
                    path.display(),
                    r.class_id
                )));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VisualFactorTable {
        dataset_id: file.dataset_id,
        config_hash: file.config_hash,
        lbp: file.lbp,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    /// Independent per-pixel oracle: explicit neighbor list, explicit powers
    /// of two, no shared code with the implementation.
    fn lbp_oracle(gray: &Array2<u8>, y: usize, x: usize) -> u8 {
        let order = [
            (y - 1, x - 1),
            (y - 1, x),
            (y - 1, x + 1),
            (y, x + 1),
            (y + 1, x + 1),
            (y + 1, x),
            (y + 1, x - 1),
            (y, x - 1),
        ];
        let weights = [128u32, 64, 32, 16, 8, 4, 2, 1];
        let mut code = 0u32;
        for (i, &(ny, nx)) in order.iter().enumerate() {
            if gray[(ny, nx)] >= gray[(y, x)] {
                code += weights[i];
            }
        }
        code as u8
    }

    #[test]
    fn lbp_map_matches_bruteforce_oracle() {
        let mut rng = crate::rng::derive_rng(40, "lbp-test", 0);
        for _ in 0..100 {
            let gray = Array2::from_shape_fn((16, 16), |_| rng.gen::<u8>());
            let codes = lbp_map(&gray).unwrap();
            assert_eq!(codes.dim(), (14, 14));
            for y in 1..15 {
                for x in 1..15 {
                    assert_eq!(codes[(y - 1, x - 1)], lbp_oracle(&gray, y, x));
                }
            }
        }
    }

    #[test]
    fn lbp_constant_patch_codes_to_255() {
        let patch = Array2::from_elem((3, 3), 7u8);
        assert_eq!(lbp_code(&patch).unwrap(), 255);
        let gray = Array2::from_elem((8, 8), 99u8);
        assert!(lbp_map(&gray).unwrap().iter().all(|&c| c == 255));
    }

    #[test]
    fn lbp_alternating_neighbors_give_alternating_bits() {
        // Clockwise from top-left: 9,1,9,1,9,1,9,1 against center 5
        // → bits 1,0,1,0,1,0,1,0 MSB-first = 0b10101010.
        let patch = array![[9u8, 1, 9], [1, 5, 1], [9, 1, 9]];
        assert_eq!(lbp_code(&patch).unwrap(), 0b1010_1010);
    }

    #[test]
    fn lbp_is_invariant_to_monotone_intensity_shift() {
        let mut rng = crate::rng::derive_rng(41, "lbp-shift", 0);
        for _ in 0..50 {
            let gray = Array2::from_shape_fn((12, 12), |_| rng.gen_range(0u8..200));
            let shift: u8 = rng.gen_range(1..55);
            let shifted = gray.mapv(|v| v + shift);
            assert_eq!(lbp_map(&gray).unwrap(), lbp_map(&shifted).unwrap());
        }
    }

    #[test]
    fn gray_conversion_matches_reference_values() {
        let red = Array3::from_shape_fn((3, 1, 1), |(c, _, _)| if c == 0 { 255 } else { 0 });
        assert_eq!(rgb_to_gray(&red).unwrap()[(0, 0)], 76);
        let white = Array3::from_elem((3, 2, 2), 255u8);
        assert_eq!(rgb_to_gray(&white).unwrap()[(0, 0)], 255);
    }

    #[test]
    fn color_mode_counts_and_breaks_ties_downward() {
        // 2x2 image, all class 1: two pixels of A, one of B, one of C.
        let colors = [[10u8, 20, 30], [10, 20, 30], [200, 0, 0], [0, 0, 1]];
        let image = Array3::from_shape_fn((3, 2, 2), |(c, y, x)| colors[y * 2 + x][c]);
        let mask = Array2::from_elem((2, 2), 1u8);
        let ((r, g, b), count) = class_color_mode(&image, &mask, 1).unwrap().unwrap();
        assert_eq!(((r, g, b), count), ((10, 20, 30), 2));

        // Tie between (0,0,1) and (200,0,0): packing favors (0,0,1).
        let colors = [[200u8, 0, 0], [0, 0, 1]];
        let image = Array3::from_shape_fn((3, 1, 2), |(c, _, x)| colors[x][c]);
        let mask = Array2::from_elem((1, 2), 0u8);
        let ((r, g, b), _) = class_color_mode(&image, &mask, 0).unwrap().unwrap();
        assert_eq!((r, g, b), (0, 0, 1));

        assert!(class_color_mode(&image, &mask, 3).unwrap().is_none());
    }

    #[test]
    fn color_mode_matches_counting_oracle_on_random_instances() {
        let mut rng = crate::rng::derive_rng(42, "color-mode", 0);
        for _ in 0..100 {
            // Few distinct colors so ties actually happen.
            let palette: Vec<[u8; 3]> = (0..4).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let mut image = Array3::<u8>::zeros((3, 6, 6));
            for y in 0..6 {
                for x in 0..6 {
                    let p = palette[rng.gen_range(0..4)];
                    for c in 0..3 {
                        image[(c, y, x)] = p[c];
                    }
                }
            }
            let mask = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0u8..3));

            for class_id in 0..3u8 {
                // Oracle: exhaustive count, then scan for (max count, min packed).
                let mut counts: HashMap<(u8, u8, u8), u64> = HashMap::new();
                for y in 0..6 {
                    for x in 0..6 {
                        if mask[(y, x)] == class_id {
                            let key = (image[(0, y, x)], image[(1, y, x)], image[(2, y, x)]);
                            *counts.entry(key).or_insert(0) += 1;
                        }
                    }
                }
                let mut expect: Option<((u8, u8, u8), u64)> = None;
                let mut keys: Vec<_> = counts.keys().copied().collect();
                keys.sort_unstable(); // ascending tuple order == ascending packed order
                for key in keys {
                    let count = counts[&key];
                    if expect.map_or(true, |(_, bc)| count > bc) {
                        expect = Some((key, count));
                    }
                }
                assert_eq!(class_color_mode(&image, &mask, class_id).unwrap(), expect);
            }
        }
    }

    #[test]
    fn texture_mode_matches_counting_oracle_on_random_instances() {
        let mut rng = crate::rng::derive_rng(43, "texture-mode", 0);
        for _ in 0..100 {
            // Tiny value range so LBP codes repeat and tie.
            let gray = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0u8..3));
            let mask = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0u8..2));
            let codes = lbp_map(&gray).unwrap();

            for class_id in 0..2u8 {
                let mut hist = [0u64; 256];
                for y in 0..6 {
                    for x in 0..6 {
                        if mask[(y + 1, x + 1)] == class_id {
                            hist[codes[(y, x)] as usize] += 1;
                        }
                    }
                }
                let mut expect: Option<(u8, u64)> = None;
                for code in 0..256usize {
                    if hist[code] > 0 && expect.map_or(true, |(_, bc)| hist[code] > bc) {
                        expect = Some((code as u8, hist[code]));
                    }
                }
                assert_eq!(class_texture_mode(&codes, &mask, class_id).unwrap(), expect);
            }
        }
    }

    fn tiny_sample(id: &str, image: Array3<u8>, mask: Array2<u8>) -> SegSample {
        SegSample {
            id: id.into(),
            image,
            mask,
        }
    }

    #[test]
    fn scan_is_order_invariant_and_streams_across_images() {
        let catalog = ClassCatalog::from_names(&["a", "b"], 255).unwrap();
        let mut rng = crate::rng::derive_rng(44, "scan", 0);
        let samples: Vec<SegSample> = (0..6)
            .map(|i| {
                let image = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(0u8..4));
                let mask = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0u8..2));
                tiny_sample(&format!("s{i}"), image, mask)
            })
            .collect();

        let forward = scan_dataset_factors(
            samples.iter().cloned().map(Ok),
            &catalog,
            &LbpConfig::default(),
            "d",
            "h",
        )
        .unwrap();
        let reversed = scan_dataset_factors(
            samples.iter().rev().cloned().map(Ok),
            &catalog,
            &LbpConfig::default(),
            "d",
            "h",
        )
        .unwrap();
        assert_eq!(forward, reversed);
        assert!(forward.classes.iter().all(|r| r.color_support > 0));
    }

    #[test]
    fn scan_flags_absent_classes_instead_of_zero_filling() {
        let catalog = ClassCatalog::from_names(&["a", "b", "never"], 255).unwrap();
        let image = Array3::from_elem((3, 8, 8), 9u8);
        let mut mask = Array2::from_elem((8, 8), 0u8);
        mask[(0, 0)] = 1; // class 1 exists only on the border: color yes, texture no
        let table = scan_dataset_factors(
            vec![Ok(tiny_sample("s", image, mask))],
            &catalog,
            &LbpConfig::default(),
            "d",
            "h",
        )
        .unwrap();

        let row1 = table.row(1).unwrap();
        assert!(!row1.absent());
        assert_eq!(row1.color, Some((9, 9, 9)));
        assert_eq!(row1.texture, None);
        assert_eq!(row1.texture_support, 0);

        let row2 = table.row(2).unwrap();
        assert!(row2.absent());
        assert_eq!(row2.color, None);
        assert_eq!(row2.texture, None);
    }

    #[test]
    fn scan_rejects_empty_and_unknown_labels() {
        let catalog = ClassCatalog::from_names(&["a"], 255).unwrap();
        let err =
            scan_dataset_factors(Vec::new(), &catalog, &LbpConfig::default(), "d", "h").unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));

        let image = Array3::from_elem((3, 4, 4), 1u8);
        let mut mask = Array2::from_elem((4, 4), 0u8);
        mask[(2, 2)] = 9;
        mask[(1, 1)] = 7;
        let err = scan_dataset_factors(
            vec![Ok(tiny_sample("bad", image, mask))],
            &catalog,
            &LbpConfig::default(),
            "d",
            "h",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[7, 9]"), "offenders listed in order: {msg}");
    }

    #[test]
    fn factor_table_round_trips_and_rejects_bad_schema() {
        let table = VisualFactorTable {
            dataset_id: "toy".into(),
            config_hash: "cafe".into(),
            lbp: LbpConfig::default(),
            classes: vec![
                FactorRow {
                    class_id: 0,
                    color: Some((0x85, 0x77, 0x5D)),
                    color_support: 12,
                    texture: Some(241),
                    texture_support: 9,
                },
                FactorRow {
                    class_id: 1,
                    color: None,
                    color_support: 0,
                    texture: None,
                    texture_support: 0,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("factors.json");
        save_factor_table(&table, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"#85775D\""), "hex is uppercase RRGGBB");
        assert!(text.contains("\"absent\": true"));

        let back = load_factor_table(&path).unwrap();
        assert_eq!(table, back);

        let hacked = text.replace("\"schema\": 1", "\"schema\": 9");
        std::fs::write(&path, hacked).unwrap();
        assert!(matches!(
            load_factor_table(&path).unwrap_err(),
            Error::SchemaVersion { found: 9, .. }
        ));
    }
}
