//! Per-pixel importance weighting from prototype similarity.
//!
//! The deep features are compared against the plain class-name prototypes:
//! a per-position softmax over class dot products gives a similarity
//! distribution, its entropy measures how ambiguous the position is, and a
//! min–max normalized exponential turns that uncertainty into a weight in
//! `[e⁻¹, 1]`. Confident positions keep weight ≈ 1, ambiguous ones are
//! discounted. The weights are constants in the training objective — no
//! gradient flows back through the similarity pipeline — so the segmentation
//! loss is an ordinary cross-entropy with per-pixel scaling.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::PrototypeSet;

/// Whether weight normalization pools statistics over the whole batch or
/// each image separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReweightScope {
    Batch,
    Image,
}

/// Per-position distributions over classes, shape `(N, H_f, W_f)`; every
/// spatial column is a simplex vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    map: Array3<f64>,
}

impl SimilarityMap {
    /// Validates the simplex invariant on every column.
    pub fn new(map: Array3<f64>) -> Result<Self> {
        let (n, h, w) = map.dim();
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Validation(
                "similarity map must have positive extent".into(),
            ));
        }
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                for c in 0..n {
                    let v = map[(c, y, x)];
                    if !v.is_finite() || v < -1e-9 {
                        return Err(Error::Validation(format!(
                            "similarity at ({y},{x}) has invalid entry {v}"
                        )));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Validation(format!(
                        "similarity column at ({y},{x}) sums to {sum}, not 1"
                    )));
                }
            }
        }
        Ok(Self { map })
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.map
    }

    pub fn n_classes(&self) -> usize {
        self.map.dim().0
    }

    pub fn extent(&self) -> (usize, usize) {
        let (_, h, w) = self.map.dim();
        (h, w)
    }
}

/// Similarity distribution between each feature column and the per-class
/// prototypes: softmax over classes of `prototype_n · f`.
///
/// Feature columns are L2-normalized here; all-zero columns are left as-is
/// and come out uniform.
pub fn class_similarity(features: &Array3<f64>, otp: &PrototypeSet) -> Result<SimilarityMap> {
    let (d, h, w) = features.dim();
    if d != otp.dim {
        return Err(Error::Validation(format!(
            "features have dim {d} but prototypes have {}",
            otp.dim
        )));
    }
    let n = otp.n_classes();
    if n == 0 {
        return Err(Error::Validation("prototype set has no classes".into()));
    }
    let mut map = Array3::<f64>::zeros((n, h, w));
    let mut col = Array1::<f64>::zeros(d);
    let mut dots = vec![0.0f64; n];
    for y in 0..h {
        for x in 0..w {
            for c in 0..d {
                col[c] = features[(c, y, x)];
            }
            let norm = col.dot(&col).sqrt();
            if norm > 1e-12 {
                col.mapv_inplace(|v| v / norm);
            }
            let mut max = f64::NEG_INFINITY;
            for (k, row) in otp.rows.iter().enumerate() {
                dots[k] = row.vector.dot(&col);
                max = max.max(dots[k]);
            }
            let mut sum = 0.0;
            for dk in dots.iter_mut() {
                *dk = (*dk - max).exp();
                sum += *dk;
            }
            for (k, dk) in dots.iter().enumerate() {
                map[(k, y, x)] = dk / sum;
            }
        }
    }
    SimilarityMap::new(map)
}

/// Shannon entropy of each similarity column, with `0·ln 0 = 0`; ranges over
/// `[0, ln N]`.
pub fn pixel_uncertainty(sim: &SimilarityMap) -> Array2<f64> {
    let (n, h, w) = sim.map.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut u = 0.0;
        for c in 0..n {
            let s = sim.map[(c, y, x)];
            if s > 0.0 {
                u -= s * s.ln();
            }
        }
        u
    })
}

fn check_finite(us: &[Array2<f64>]) -> Result<()> {
    for u in us {
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "uncertainty map contains a non-finite value".into(),
            ));
        }
    }
    Ok(())
}

/// Min–max normalized exponential weights for a batch of uncertainty maps:
/// `R = exp(−(U−U_min)/(U_max−U_min))` with the extrema pooled over every
/// position of every map. A constant batch (U_max == U_min) yields all ones.
pub fn reweight_map_batch(us: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    if us.is_empty() {
        return Err(Error::Validation("reweighting needs at least one map".into()));
    }
    check_finite(us)?;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for u in us {
        for &v in u.iter() {
            min = min.min(v);
            max = max.max(v);
        }
    }
    let range = max - min;
    Ok(us
        .iter()
        .map(|u| {
            if range == 0.0 {
                Array2::ones(u.raw_dim())
            } else {
                u.mapv(|v| (-(v - min) / range).exp())
            }
        })
        .collect())
}

/// Single-map weighting: [`reweight_map_batch`] with per-image extrema.
pub fn reweight_map(u: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(reweight_map_batch(std::slice::from_ref(u))?.pop().unwrap())
}

/// Nearest-neighbor resize of a weight map to label resolution; position
/// `i` reads source row `floor((i + 0.5) · H_src / H_dst)`, the same index
/// convention used when labels are pulled down to feature resolution.
pub fn resize_weights_nearest(weights: &Array2<f64>, target: (usize, usize)) -> Result<Array2<f64>> {
    let (h, w) = weights.dim();
    let (th, tw) = target;
    if th == 0 || tw == 0 || h == 0 || w == 0 {
        return Err(Error::Validation("resize extents must be nonzero".into()));
    }
    Ok(Array2::from_shape_fn((th, tw), |(i, j)| {
        let sy = (((i as f64 + 0.5) * h as f64 / th as f64).floor() as usize).min(h - 1);
        let sx = (((j as f64 + 0.5) * w as f64 / tw as f64).floor() as usize).min(w - 1);
        weights[(sy, sx)]
    }))
}

/// Sufficient statistics of one image's weighted cross-entropy, kept
/// unnormalized so a batch can pool them under one denominator.
#[derive(Debug, Clone)]
pub struct CePartials {
    /// Σ over valid positions of `weight · nll`.
    pub weighted_nll_sum: f64,
    /// Number of non-ignored positions.
    pub valid_count: usize,
    /// `weight · (softmax(logits) − onehot(label))` at valid positions,
    /// zero elsewhere. Divide by the pooled valid count to get `dL/dlogits`.
    pub grad_unscaled: Array3<f64>,
}

/// Final loss value plus an empty-batch indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeOutcome {
    pub loss: f64,
    pub valid_count: usize,
    /// True when every position was ignored, making the loss vacuously 0.
    pub all_ignored: bool,
}

/// Per-image weighted cross-entropy statistics with the analytic logits
/// gradient. Weights enter as constants.
pub fn ce_partials(
    logits: &Array3<f64>,
    labels: &Array2<u8>,
    weights: &Array2<f64>,
    ignore_index: u8,
) -> Result<CePartials> {
    let (n, h, w) = logits.dim();
    if labels.dim() != (h, w) || weights.dim() != (h, w) {
        return Err(Error::Validation(format!(
            "logits {h}x{w} need matching labels {:?} and weights {:?}",
            labels.dim(),
            weights.dim()
        )));
    }
    if n == 0 {
        return Err(Error::Validation("logits need at least one class".into()));
    }
    let mut sum = 0.0;
    let mut valid = 0usize;
    let mut grad = Array3::<f64>::zeros((n, h, w));
    for y in 0..h {
        for x in 0..w {
            let label = labels[(y, x)];
            if label == ignore_index {
                continue;
            }
            if label as usize >= n {
                return Err(Error::Validation(format!(
                    "label {label} at ({y},{x}) is outside the {n}-class catalog"
                )));
            }
            let r = weights[(y, x)];
            if !r.is_finite() {
                return Err(Error::NonFinite(format!(
                    "weight at ({y},{x}) is not finite"
                )));
            }
            let mut max = f64::NEG_INFINITY;
            for c in 0..n {
                max = max.max(logits[(c, y, x)]);
            }
            let mut z = 0.0;
            for c in 0..n {
                z += (logits[(c, y, x)] - max).exp();
            }
            let lse = max + z.ln();
            sum += r * (lse - logits[(label as usize, y, x)]);
            for c in 0..n {
                let p = (logits[(c, y, x)] - lse).exp();
                let y_ind = if c == label as usize { 1.0 } else { 0.0 };
                grad[(c, y, x)] = r * (p - y_ind);
            }
            valid += 1;
        }
    }
    Ok(CePartials {
        weighted_nll_sum: sum,
        valid_count: valid,
        grad_unscaled: grad,
    })
}

/// Weighted cross-entropy over one image: mean of `weight · nll` over
/// non-ignored positions; an all-ignored image scores 0 and is flagged.
pub fn reweighted_cross_entropy(
    logits: &Array3<f64>,
    labels: &Array2<u8>,
    weights: &Array2<f64>,
    ignore_index: u8,
) -> Result<CeOutcome> {
    let parts = ce_partials(logits, labels, weights, ignore_index)?;
    Ok(pool_ce(&[parts]))
}

/// Pool per-image statistics under one denominator: the batch loss is the
/// total weighted negative log-likelihood over the total valid-pixel count.
pub fn pool_ce(parts: &[CePartials]) -> CeOutcome {
    let valid: usize = parts.iter().map(|p| p.valid_count).sum();
    let sum: f64 = parts.iter().map(|p| p.weighted_nll_sum).sum();
    CeOutcome {
        loss: if valid == 0 { 0.0 } else { sum / valid as f64 },
        valid_count: valid,
        all_ignored: valid == 0,
    }
}

/// Render a weight map for inspection: `[e⁻¹, 1]` maps linearly onto
/// `[0, 255]`, darker meaning more heavily discounted.
pub fn weights_to_gray(weights: &Array2<f64>) -> Array2<u8> {
    let lo = (-1.0f64).exp();
    weights.mapv(|w| {
        let t = ((w - lo) / (1.0 - lo)).clamp(0.0, 1.0);
        (t * 255.0).round() as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{PrototypeKind, PrototypeRow};
    use ndarray::array;
    use rand::Rng;

    fn proto_set(vectors: Vec<Array1<f64>>) -> PrototypeSet {
        let dim = vectors[0].len();
        let rows = vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let norm = v.dot(&v).sqrt();
                PrototypeRow {
                    class_id: i as u8,
                    name: format!("class{i}"),
                    text: format!("class{i}"),
                    vector: v / norm,
                }
            })
            .collect();
        PrototypeSet {
            kind: PrototypeKind::Otp,
            provider_id: "test".into(),
            dim,
            rows,
        }
    }

    fn random_simplex_map(n: usize, h: usize, w: usize, seed: u64) -> SimilarityMap {
        let mut rng = crate::rng::derive_rng(seed, "simplex-map", 0);
        let mut map = Array3::<f64>::zeros((n, h, w));
        for y in 0..h {
            for x in 0..w {
                let mut col: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = col.iter().sum();
                for (c, v) in col.iter_mut().enumerate() {
                    *v /= sum;
                    map[(c, y, x)] = *v;
                }
            }
        }
        SimilarityMap::new(map).unwrap()
    }

    #[test]
    fn similarity_of_a_prototype_with_orthogonal_classes() {
        let otp = proto_set(vec![array![1.0, 0.0], array![0.0, 1.0]]);
        // Feature equal to prototype 0 (scaled — normalization inside).
        let mut features = Array3::<f64>::zeros((2, 1, 1));
        features[(0, 0, 0)] = 3.0;
        let sim = class_similarity(&features, &otp).unwrap();
        let e = std::f64::consts::E;
        assert!((sim.array()[(0, 0, 0)] - e / (e + 1.0)).abs() < 1e-9);
        assert!((sim.array()[(1, 0, 0)] - 1.0 / (e + 1.0)).abs() < 1e-9);
        assert!((sim.array()[(0, 0, 0)] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn similarity_columns_are_simplexes_and_argmax_tracks_the_prototype() {
        let mut rng = crate::rng::derive_rng(70, "sim-columns", 0);
        let otp = proto_set(
            (0..4)
                .map(|_| Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0)))
                .collect(),
        );
        let features = Array3::from_shape_fn((6, 3, 5), |_| rng.gen_range(-2.0..2.0));
        let sim = class_similarity(&features, &otp).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                let sum: f64 = (0..4).map(|c| sim.array()[(c, y, x)]).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
        // A feature column equal to prototype k makes class k the argmax
        // (its self-similarity is 1, the maximum possible for unit vectors).
        let mut features = Array3::<f64>::zeros((6, 1, 1));
        for c in 0..6 {
            features[(c, 0, 0)] = otp.rows[2].vector[c];
        }
        let sim = class_similarity(&features, &otp).unwrap();
        let best = (0..4).max_by(|&a, &b| {
            sim.array()[(a, 0, 0)].partial_cmp(&sim.array()[(b, 0, 0)]).unwrap()
        });
        assert_eq!(best, Some(2));

        // Dim mismatch is rejected.
        let bad = Array3::<f64>::zeros((5, 1, 1));
        assert!(class_similarity(&bad, &otp).is_err());
    }

    #[test]
    fn zero_feature_columns_come_out_uniform() {
        let otp = proto_set(vec![array![1.0, 0.0], array![0.0, 1.0]]);
        let features = Array3::<f64>::zeros((2, 1, 1));
        let sim = class_similarity(&features, &otp).unwrap();
        assert!((sim.array()[(0, 0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_reference_values() {
        // One-hot column → zero entropy (0·ln 0 treated as 0).
        let mut map = Array3::<f64>::zeros((3, 1, 2));
        map[(0, 0, 0)] = 1.0;
        map[(1, 0, 1)] = 1.0;
        let u = pixel_uncertainty(&SimilarityMap::new(map).unwrap());
        assert_eq!(u[(0, 0)], 0.0);
        assert_eq!(u[(0, 1)], 0.0);

        // Uniform over 19 classes → ln 19.
        let map = Array3::from_elem((19, 1, 1), 1.0 / 19.0);
        let u = pixel_uncertainty(&SimilarityMap::new(map).unwrap());
        assert!((u[(0, 0)] - 19.0f64.ln()).abs() < 1e-9);
        assert!((u[(0, 0)] - 2.944439).abs() < 1e-6);
    }

    #[test]
    fn uncertainty_matches_direct_summation_and_stays_in_range() {
        let sim = random_simplex_map(5, 4, 4, 71);
        let u = pixel_uncertainty(&sim);
        for y in 0..4 {
            for x in 0..4 {
                let mut direct = 0.0;
                for c in 0..5 {
                    let s = sim.array()[(c, y, x)];
                    direct -= s * s.ln();
                }
                assert!((u[(y, x)] - direct).abs() < 1e-9);
                assert!(u[(y, x)] >= 0.0 && u[(y, x)] <= 5.0f64.ln() + 1e-12);
            }
        }
    }

    #[test]
    fn weights_hit_the_documented_endpoints() {
        let u = array![[0.0, 1.0], [2.0, 1.0]];
        let r = reweight_map(&u).unwrap();
        assert!((r[(0, 0)] - 1.0).abs() < 1e-12, "U_min maps to weight 1");
        assert!((r[(1, 0)] - (-1.0f64).exp()).abs() < 1e-12, "U_max maps to e^-1");
        assert!((r[(1, 0)] - 0.36788).abs() < 1e-5);
        assert!((r[(0, 1)] - (-0.5f64).exp()).abs() < 1e-12, "midpoint maps to e^-0.5");
        assert!((r[(0, 1)] - 0.60653).abs() < 1e-5);
        for &v in r.iter() {
            assert!(((-1.0f64).exp()..=1.0).contains(&v));
        }
    }

    #[test]
    fn constant_uncertainty_degenerates_to_unit_weights() {
        let u = Array2::from_elem((3, 3), 1.7);
        let r = reweight_map(&u).unwrap();
        assert!(r.iter().all(|&v| v == 1.0));
        assert!(reweight_map(&array![[f64::NAN]]).is_err());
    }

    #[test]
    fn weights_are_invariant_to_increasing_affine_rescaling() {
        let mut rng = crate::rng::derive_rng(72, "affine", 0);
        let u = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-3.0..3.0));
        let rescaled = u.mapv(|v| 2.5 * v + 7.0);
        let a = reweight_map(&u).unwrap();
        let b = reweight_map(&rescaled).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_scope_pools_extrema_across_images() {
        let u_low = array![[0.0, 0.5]];
        let u_high = array![[1.5, 2.0]];
        let batch = reweight_map_batch(&[u_low.clone(), u_high.clone()]).unwrap();
        // Batch min lives in image 0, batch max in image 1.
        assert!((batch[0][(0, 0)] - 1.0).abs() < 1e-12);
        assert!((batch[1][(0, 1)] - (-1.0f64).exp()).abs() < 1e-12);
        // Image 1's smaller value is discounted relative to the batch range,
        // unlike under per-image scope where it would reset to weight 1.
        assert!(batch[1][(0, 0)] < 1.0);
        let solo = reweight_map(&u_high).unwrap();
        assert!((solo[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_resize_expands_blocks() {
        let w = array![[0.4, 0.6], [0.8, 1.0]];
        let up = resize_weights_nearest(&w, (4, 4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(up[(i, j)], w[(i / 2, j / 2)]);
            }
        }
        assert_eq!(resize_weights_nearest(&w, (2, 2)).unwrap(), w);
        assert!(resize_weights_nearest(&w, (0, 4)).is_err());
    }

    #[test]
    fn unit_weights_reduce_to_plain_mean_cross_entropy() {
        let mut rng = crate::rng::derive_rng(73, "ce-unit", 0);
        for _ in 0..20 {
            let logits = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(-3.0..3.0));
            let labels = Array2::from_shape_fn((4, 4), |_| {
                if rng.gen_bool(0.15) { 255 } else { rng.gen_range(0u8..3) }
            });
            let ones = Array2::ones((4, 4));
            let out = reweighted_cross_entropy(&logits, &labels, &ones, 255).unwrap();

            // Independent oracle: direct softmax + mean NLL loop.
            let mut sum = 0.0;
            let mut count = 0;
            for y in 0..4 {
                for x in 0..4 {
                    let label = labels[(y, x)];
                    if label == 255 {
                        continue;
                    }
                    let exps: Vec<f64> = (0..3).map(|c| logits[(c, y, x)].exp()).collect();
                    let z: f64 = exps.iter().sum();
                    sum -= (exps[label as usize] / z).ln();
                    count += 1;
                }
            }
            if count == 0 {
                assert!(out.all_ignored);
                continue;
            }
            assert!((out.loss - sum / count as f64).abs() < 1e-7);
            assert_eq!(out.valid_count, count);
        }
    }

    #[test]
    fn weighted_loss_matches_hand_summation() {
        let mut rng = crate::rng::derive_rng(74, "ce-weighted", 0);
        let logits = Array3::from_shape_fn((2, 4, 4), |_| rng.gen_range(-2.0..2.0));
        let labels = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0u8..2));
        let weights = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.368..1.0));
        let out = reweighted_cross_entropy(&logits, &labels, &weights, 255).unwrap();

        let mut sum = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let exps: Vec<f64> = (0..2).map(|c| logits[(c, y, x)].exp()).collect();
                let z: f64 = exps.iter().sum();
                sum -= weights[(y, x)] * (exps[labels[(y, x)] as usize] / z).ln();
            }
        }
        assert!((out.loss - sum / 16.0).abs() < 1e-9);
    }

    #[test]
    fn ignored_everything_scores_zero_with_a_flag() {
        let logits = Array3::<f64>::zeros((2, 2, 2));
        let labels = Array2::from_elem((2, 2), 255u8);
        let weights = Array2::ones((2, 2));
        let out = reweighted_cross_entropy(&logits, &labels, &weights, 255).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.all_ignored);

        // Out-of-range labels are rejected outright.
        let bad = Array2::from_elem((2, 2), 7u8);
        assert!(reweighted_cross_entropy(&logits, &bad, &weights, 255).is_err());
    }

    #[test]
    fn raising_a_weight_never_lowers_the_loss() {
        let mut rng = crate::rng::derive_rng(75, "ce-monotone", 0);
        let logits = Array3::from_shape_fn((3, 2, 2), |_| rng.gen_range(-2.0..2.0));
        let labels = Array2::from_shape_fn((2, 2), |_| rng.gen_range(0u8..3));
        let mut weights = Array2::from_elem((2, 2), 0.5);
        let before = reweighted_cross_entropy(&logits, &labels, &weights, 255).unwrap();
        weights[(1, 1)] = 0.9;
        let after = reweighted_cross_entropy(&logits, &labels, &weights, 255).unwrap();
        assert!(after.loss >= before.loss);
    }

    #[test]
    fn batch_pooling_uses_one_global_denominator() {
        let mut rng = crate::rng::derive_rng(76, "ce-pool", 0);
        let make = |h: usize, rng: &mut rand_chacha::ChaCha20Rng| {
            let logits = Array3::from_shape_fn((2, h, 2), |_| rng.gen_range(-2.0..2.0));
            let labels = Array2::from_shape_fn((h, 2), |_| rng.gen_range(0u8..2));
            let weights = Array2::from_shape_fn((h, 2), |_| rng.gen_range(0.4..1.0));
            (logits, labels, weights)
        };
        let (l1, y1, w1) = make(2, &mut rng);
        let (l2, y2, w2) = make(4, &mut rng);
        let p1 = ce_partials(&l1, &y1, &w1, 255).unwrap();
        let p2 = ce_partials(&l2, &y2, &w2, 255).unwrap();
        let pooled = pool_ce(&[p1.clone(), p2.clone()]);
        let want = (p1.weighted_nll_sum + p2.weighted_nll_sum)
            / (p1.valid_count + p2.valid_count) as f64;
        assert!((pooled.loss - want).abs() < 1e-12);
        // Unequal image sizes make "mean of per-image means" a different
        // number; the pooled loss must not be that.
        let mean_of_means = (p1.weighted_nll_sum / p1.valid_count as f64
            + p2.weighted_nll_sum / p2.valid_count as f64)
            / 2.0;
        assert!((pooled.loss - mean_of_means).abs() > 1e-6);
    }

    #[test]
    fn logits_gradient_matches_finite_differences() {
        let mut rng = crate::rng::derive_rng(77, "ce-grad", 0);
        let logits = Array3::from_shape_fn((3, 2, 2), |_| rng.gen_range(-2.0..2.0));
        let mut labels = Array2::from_shape_fn((2, 2), |_| rng.gen_range(0u8..3));
        labels[(1, 0)] = 255;
        let weights = Array2::from_shape_fn((2, 2), |_| rng.gen_range(0.4..1.0));
        let parts = ce_partials(&logits, &labels, &weights, 255).unwrap();
        let scale = 1.0 / parts.valid_count as f64;

        let eps = 1e-6;
        for &(c, y, x) in &[(0usize, 0usize, 0usize), (1, 0, 1), (2, 1, 1), (0, 1, 0)] {
            let mut plus = logits.clone();
            plus[(c, y, x)] += eps;
            let mut minus = logits.clone();
            minus[(c, y, x)] -= eps;
            let lp = reweighted_cross_entropy(&plus, &labels, &weights, 255).unwrap().loss;
            let lm = reweighted_cross_entropy(&minus, &labels, &weights, 255).unwrap().loss;
            let fd = (lp - lm) / (2.0 * eps);
            let an = parts.grad_unscaled[(c, y, x)] * scale;
            assert!((fd - an).abs() < 1e-7, "fd {fd} vs analytic {an}");
        }
        // Ignored positions carry exactly zero gradient.
        for c in 0..3 {
            assert_eq!(parts.grad_unscaled[(c, 1, 0)], 0.0);
        }
    }

    #[test]
    fn gray_rendering_spans_the_weight_range() {
        let w = array![[(-1.0f64).exp(), 1.0], [0.6839397205857212, 0.5]];
        let gray = weights_to_gray(&w);
        assert_eq!(gray[(0, 0)], 0);
        assert_eq!(gray[(0, 1)], 255);
        // Halfway up the [e^-1, 1] range lands mid-gray.
        assert_eq!(gray[(1, 0)], 128);
    }
}
