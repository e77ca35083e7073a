//! A small four-stage convolutional segmentation network with taps.
//!
//! The encoder halves resolution three times (strides 4, 8, 16) and then
//! switches to dilation, so the last two stages share stride 16. Each
//! stage's post-activation map is exposed as a [`FeatureTap`] for the
//! alignment and reweighting paths. The classifier head runs a dilated conv
//! on the deep stage, upsamples to stride 4, folds in a projected skip from
//! the first stage, refines, and emits per-class logits that are bilinearly
//! resized to the input extent.
//!
//! The forward pass records every pre-activation needed by the handwritten
//! backward pass; `backward` consumes those activations plus cotangents for
//! the logits and (optionally) each tap, and returns parameter gradients.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::centroids::{FeatureTap, Stage};
use crate::error::{Error, Result};
use crate::nn::{
    bilinear_resize, bilinear_resize_backward, relu, relu_backward, Conv2d, ConvGrad, SgdConfig,
};
use crate::rng::derive_rng;

/// Declared stage strides; the last two stages trade stride for dilation.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 16];

/// Hard ceiling on model size; the defaults sit far below it.
pub const MAX_PARAMS: usize = 2_000_000;

/// Channel widths per stage plus the class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub widths: [usize; 4],
    pub n_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [16, 24, 32, 32],
            n_classes: 5,
        }
    }
}

/// Map 8-bit RGB to the network's input range `[-1, 1]`.
pub fn normalize_image(img: &Array3<u8>) -> Array3<f64> {
    img.mapv(|v| v as f64 / 255.0 * 2.0 - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBackbone {
    pub cfg: BackboneConfig,
    /// 3 → w1, stride 2.
    pub stem1: Conv2d,
    /// w1 → w1, stride 2; its activation is the S1 tap (stride 4).
    pub stem2: Conv2d,
    /// w1 → w2, stride 2; S2 tap (stride 8).
    pub down2: Conv2d,
    /// w2 → w3, stride 2; S3 tap (stride 16).
    pub down3: Conv2d,
    /// w3 → w4, stride 1, dilation 2; S4 tap (stride 16).
    pub dil4: Conv2d,
    /// Head: dilated context conv on S4.
    pub head: Conv2d,
    /// 1×1 projection of the S1 tap into the head width.
    pub skip: Conv2d,
    /// 3×3 refinement at stride 4 after the skip fusion.
    pub refine: Conv2d,
    /// 1×1 conv to per-class logits at stride 4.
    pub classify: Conv2d,
}

/// Gradient (or momentum) buffers for every backbone parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneGrads {
    pub stem1: ConvGrad,
    pub stem2: ConvGrad,
    pub down2: ConvGrad,
    pub down3: ConvGrad,
    pub dil4: ConvGrad,
    pub head: ConvGrad,
    pub skip: ConvGrad,
    pub refine: ConvGrad,
    pub classify: ConvGrad,
}

impl BackboneGrads {
    fn layers(&self) -> [&ConvGrad; 9] {
        [
            &self.stem1, &self.stem2, &self.down2, &self.down3, &self.dil4, &self.head,
            &self.skip, &self.refine, &self.classify,
        ]
    }

    fn layers_mut(&mut self) -> [&mut ConvGrad; 9] {
        [
            &mut self.stem1, &mut self.stem2, &mut self.down2, &mut self.down3, &mut self.dil4,
            &mut self.head, &mut self.skip, &mut self.refine, &mut self.classify,
        ]
    }

    /// Elementwise accumulate another gradient set (for batch sums).
    pub fn add(&mut self, other: &BackboneGrads) {
        for (mine, theirs) in self.layers_mut().into_iter().zip(other.layers()) {
            mine.w += &theirs.w;
            mine.b += &theirs.b;
        }
    }

    /// Sum of squares over every entry, for gradient-norm reporting.
    pub fn sq_norm(&self) -> f64 {
        self.layers()
            .into_iter()
            .map(|g| g.w.iter().map(|v| v * v).sum::<f64>() + g.b.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct BackboneActs {
    x: Array3<f64>,
    pre1a: Array3<f64>,
    act1a: Array3<f64>,
    pre1b: Array3<f64>,
    s1: Array3<f64>,
    pre2: Array3<f64>,
    s2: Array3<f64>,
    pre3: Array3<f64>,
    s3: Array3<f64>,
    pre4: Array3<f64>,
    s4: Array3<f64>,
    pre_head: Array3<f64>,
    pre_fuse: Array3<f64>,
    r1: Array3<f64>,
    pre_refine: Array3<f64>,
    r2: Array3<f64>,
    low_extent: (usize, usize),
}

/// Forward products: full-resolution logits plus the four stage taps.
#[derive(Debug, Clone)]
pub struct BackboneOut {
    pub logits: Array3<f64>,
    pub taps: Vec<FeatureTap>,
}

impl ToyBackbone {
    pub fn new(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        if cfg.n_classes == 0 {
            return Err(Error::Validation("backbone needs at least one class".into()));
        }
        if cfg.widths.iter().any(|&w| w == 0) {
            return Err(Error::Validation("stage widths must be positive".into()));
        }
        let [w1, w2, w3, w4] = cfg.widths;
        let mut layer = 0u64;
        let mut next = |c_in, c_out, k, s, p, d| {
            let mut rng = derive_rng(seed, "backbone-layer", layer);
            layer += 1;
            Conv2d::new_random(c_in, c_out, k, s, p, d, &mut rng)
        };
        let model = Self {
            cfg: cfg.clone(),
            stem1: next(3, w1, 3, 2, 1, 1),
            stem2: next(w1, w1, 3, 2, 1, 1),
            down2: next(w1, w2, 3, 2, 1, 1),
            down3: next(w2, w3, 3, 2, 1, 1),
            dil4: next(w3, w4, 3, 1, 2, 2),
            head: next(w4, w4, 3, 1, 2, 2),
            skip: next(w1, w4, 1, 1, 0, 1),
            refine: next(w4, w4, 3, 1, 1, 1),
            classify: next(w4, cfg.n_classes, 1, 1, 0, 1),
        };
        if model.param_count() > MAX_PARAMS {
            return Err(Error::Validation(format!(
                "backbone has {} parameters, above the {MAX_PARAMS} ceiling",
                model.param_count()
            )));
        }
        model.verify_contract()?;
        Ok(model)
    }

    /// Dry forward on a reference input, checking every declared tap stride
    /// and that the logits come out finite.
    fn verify_contract(&self) -> Result<()> {
        let probe = 64usize;
        let x = Array3::<f64>::zeros((3, probe, probe));
        let (out, _) = self.forward(&x)?;
        for (tap, (&stride, &width)) in out
            .taps
            .iter()
            .zip(STAGE_STRIDES.iter().zip(&self.cfg.widths))
        {
            let want = probe / stride;
            let (c, h, w) = tap.map.dim();
            if (h, w) != (want, want) || c != width || tap.stride != stride {
                return Err(Error::Validation(format!(
                    "stage {} tap is {c}x{h}x{w} at stride {}, contract wants {width}x{want}x{want} at stride {stride}",
                    tap.stage, tap.stride
                )));
            }
        }
        let (c, h, w) = out.logits.dim();
        if (c, h, w) != (self.cfg.n_classes, probe, probe) {
            return Err(Error::Validation(format!(
                "logits are {c}x{h}x{w}, expected {}x{probe}x{probe}",
                self.cfg.n_classes
            )));
        }
        if out.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dry forward produced non-finite logits".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layer_refs().iter().map(|l| l.param_count()).sum()
    }

    fn layer_refs(&self) -> [&Conv2d; 9] {
        [
            &self.stem1, &self.stem2, &self.down2, &self.down3, &self.dil4, &self.head,
            &self.skip, &self.refine, &self.classify,
        ]
    }

    pub fn zero_grads(&self) -> BackboneGrads {
        BackboneGrads {
            stem1: self.stem1.zero_grad(),
            stem2: self.stem2.zero_grad(),
            down2: self.down2.zero_grad(),
            down3: self.down3.zero_grad(),
            dil4: self.dil4.zero_grad(),
            head: self.head.zero_grad(),
            skip: self.skip.zero_grad(),
            refine: self.refine.zero_grad(),
            classify: self.classify.zero_grad(),
        }
    }

    /// Full forward pass over one normalized image `(3, H, W)`.
    pub fn forward(&self, x: &Array3<f64>) -> Result<(BackboneOut, BackboneActs)> {
        let (_, h, w) = x.dim();
        let pre1a = self.stem1.forward(x)?;
        let act1a = relu(&pre1a);
        let pre1b = self.stem2.forward(&act1a)?;
        let s1 = relu(&pre1b);
        let pre2 = self.down2.forward(&s1)?;
        let s2 = relu(&pre2);
        let pre3 = self.down3.forward(&s2)?;
        let s3 = relu(&pre3);
        let pre4 = self.dil4.forward(&s3)?;
        let s4 = relu(&pre4);

        let pre_head = self.head.forward(&s4)?;
        let ctx = relu(&pre_head);
        let (s1h, s1w) = (s1.dim().1, s1.dim().2);
        let up = bilinear_resize(&ctx, (s1h, s1w))?;
        let skp = self.skip.forward(&s1)?;
        let pre_fuse = up + skp;
        let r1 = relu(&pre_fuse);
        let pre_refine = self.refine.forward(&r1)?;
        let r2 = relu(&pre_refine);
        let low = self.classify.forward(&r2)?;
        let low_extent = (low.dim().1, low.dim().2);
        let logits = bilinear_resize(&low, (h, w))?;

        let taps = vec![
            FeatureTap::new(Stage::S1, s1.clone(), STAGE_STRIDES[0])?,
            FeatureTap::new(Stage::S2, s2.clone(), STAGE_STRIDES[1])?,
            FeatureTap::new(Stage::S3, s3.clone(), STAGE_STRIDES[2])?,
            FeatureTap::new(Stage::S4, s4.clone(), STAGE_STRIDES[3])?,
        ];
        Ok((
            BackboneOut { logits, taps },
            BackboneActs {
                x: x.clone(),
                pre1a,
                act1a,
                pre1b,
                s1,
                pre2,
                s2,
                pre3,
                s3,
                pre4,
                s4,
                pre_head,
                pre_fuse,
                r1,
                pre_refine,
                r2,
                low_extent,
            },
        ))
    }

    /// Logits only, for inference/evaluation.
    pub fn infer(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.forward(x)?.0.logits)
    }

    /// Backward pass for one image. `d_logits` is the cotangent at input
    /// resolution; `d_taps` are optional extra cotangents injected at each
    /// stage's tap (post-activation), in stage order S1..S4.
    pub fn backward(
        &self,
        acts: &BackboneActs,
        d_logits: &Array3<f64>,
        d_taps: [Option<Array3<f64>>; 4],
    ) -> Result<BackboneGrads> {
        let add_tap = |mut base: Array3<f64>, tap: &Option<Array3<f64>>| -> Result<Array3<f64>> {
            if let Some(t) = tap {
                if t.dim() != base.dim() {
                    return Err(Error::Validation(format!(
                        "tap cotangent shape {:?} does not match activation {:?}",
                        t.dim(),
                        base.dim()
                    )));
                }
                base += t;
            }
            Ok(base)
        };

        let d_low = bilinear_resize_backward(d_logits, acts.low_extent)?;
        let (d_r2, g_classify) = self.classify.backward(&acts.r2, &d_low)?;
        let d_pre_refine = relu_backward(&acts.pre_refine, &d_r2);
        let (d_r1, g_refine) = self.refine.backward(&acts.r1, &d_pre_refine)?;
        let d_fuse = relu_backward(&acts.pre_fuse, &d_r1);
        // The fused tensor feeds from both the upsampled context and the
        // skip; the cotangent flows to both unchanged.
        let (d_s1_skip, g_skip) = self.skip.backward(&acts.s1, &d_fuse)?;
        let d_ctx = bilinear_resize_backward(&d_fuse, (acts.s4.dim().1, acts.s4.dim().2))?;
        let d_pre_head = relu_backward(&acts.pre_head, &d_ctx);
        let (d_s4_head, g_head) = self.head.backward(&acts.s4, &d_pre_head)?;

        let d_s4 = add_tap(d_s4_head, &d_taps[3])?;
        let d_pre4 = relu_backward(&acts.pre4, &d_s4);
        let (d_s3_main, g_dil4) = self.dil4.backward(&acts.s3, &d_pre4)?;

        let d_s3 = add_tap(d_s3_main, &d_taps[2])?;
        let d_pre3 = relu_backward(&acts.pre3, &d_s3);
        let (d_s2_main, g_down3) = self.down3.backward(&acts.s2, &d_pre3)?;

        let d_s2 = add_tap(d_s2_main, &d_taps[1])?;
        let d_pre2 = relu_backward(&acts.pre2, &d_s2);
        let (d_s1_main, g_down2) = self.down2.backward(&acts.s1, &d_pre2)?;

        let d_s1 = add_tap(d_s1_main + d_s1_skip, &d_taps[0])?;
        let d_pre1b = relu_backward(&acts.pre1b, &d_s1);
        let (d_act1a, g_stem2) = self.stem2.backward(&acts.act1a, &d_pre1b)?;
        let d_pre1a = relu_backward(&acts.pre1a, &d_act1a);
        let (_, g_stem1) = self.stem1.backward(&acts.x, &d_pre1a)?;

        Ok(BackboneGrads {
            stem1: g_stem1,
            stem2: g_stem2,
            down2: g_down2,
            down3: g_down3,
            dil4: g_dil4,
            head: g_head,
            skip: g_skip,
            refine: g_refine,
            classify: g_classify,
        })
    }

    /// One optimizer step over every layer.
    pub fn sgd_step(
        &mut self,
        grads: &BackboneGrads,
        velocity: &mut BackboneGrads,
        opt: &SgdConfig,
        lr: f64,
    ) {
        self.stem1.sgd(&grads.stem1, &mut velocity.stem1, opt, lr);
        self.stem2.sgd(&grads.stem2, &mut velocity.stem2, opt, lr);
        self.down2.sgd(&grads.down2, &mut velocity.down2, opt, lr);
        self.down3.sgd(&grads.down3, &mut velocity.down3, opt, lr);
        self.dil4.sgd(&grads.dil4, &mut velocity.dil4, opt, lr);
        self.head.sgd(&grads.head, &mut velocity.head, opt, lr);
        self.skip.sgd(&grads.skip, &mut velocity.skip, opt, lr);
        self.refine.sgd(&grads.refine, &mut velocity.refine, opt, lr);
        self.classify.sgd(&grads.classify, &mut velocity.classify, opt, lr);
    }
}

/// Downsampled label masks for every tap of one image, in stage order.
pub fn tap_masks(mask: &Array2<u8>, taps: &[FeatureTap]) -> Result<Vec<Array2<u8>>> {
    taps.iter()
        .map(|t| {
            let (_, h, w) = t.map.dim();
            crate::centroids::downsample_labels(mask, (h, w))
        })
        .collect()
}
