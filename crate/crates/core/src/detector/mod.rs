//! Two-stage detector: strided convolutional backbone, a region proposal
//! network with 3x3 objectness/regression convolutions, and an RoI head with
//! two fully connected hidden layers.
//!
//! Forward passes keep whatever the backward pass needs; gradients accumulate
//! into each [`Param`] until [`Detector::zero_grad`].

mod anchors;
mod checkpoint;
mod layers;
mod losses;
mod optim;
mod roi_align;
mod targets;

pub use anchors::{AnchorConfig, BoxCoder};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{Conv2d, Linear, Param};
pub use losses::{bce_with_logit, sigmoid, smooth_l1, softmax_cross_entropy, softmax_rows};
pub use optim::{Adam, AdamConfig};
pub use roi_align::{roi_align, roi_align_backward, RoiAlignPlan};
pub use targets::{assign_targets, label_candidates, AssignedTarget, TargetAssignment, TargetConfig};

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::geometry::{nms, nms_indices, score_order, Annotation, BoundingBox, ClassLabel, Detection, NmsMode};
use crate::rng::rng_for;
use layers::{relu_backward, relu_inplace, ConvCache};

const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
const BACKBONE_STRIDES: [usize; 4] = [2, 2, 2, 1];
/// Output stride of the backbone.
pub const FEATURE_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub image_size: usize,
    /// Output channels of the four backbone blocks.
    pub backbone_channels: [usize; 4],
    pub rpn_channels: usize,
    pub pool_size: usize,
    pub head_hidden: usize,
    pub anchors: AnchorConfig,
    pub rpn_targets: TargetConfig,
    pub head_targets: TargetConfig,
    /// Leading backbone blocks excluded from training.
    pub frozen_backbone_blocks: usize,
    pub final_nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 128,
            backbone_channels: [8, 16, 32, 64],
            rpn_channels: 32,
            pool_size: 4,
            head_hidden: 256,
            anchors: AnchorConfig::default(),
            rpn_targets: TargetConfig {
                fg_iou: 0.5,
                batch_size: 64,
                fg_fraction: 0.5,
            },
            head_targets: TargetConfig {
                fg_iou: 0.5,
                batch_size: 16,
                fg_fraction: 0.25,
            },
            frozen_backbone_blocks: 0,
            final_nms_iou: 0.5,
            max_detections: 20,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        if self.anchors.stride != FEATURE_STRIDE {
            return Err(Error::Config(format!(
                "anchor stride {} must equal the backbone stride {FEATURE_STRIDE}",
                self.anchors.stride
            )));
        }
        if self.image_size < FEATURE_STRIDE * 2 || !self.image_size.is_multiple_of(FEATURE_STRIDE) {
            return Err(Error::Config(format!(
                "image_size must be a multiple of {FEATURE_STRIDE} and at least {}",
                FEATURE_STRIDE * 2
            )));
        }
        if self.backbone_channels.contains(&0) || self.rpn_channels == 0 || self.head_hidden == 0 || self.pool_size == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        for t in [&self.rpn_targets, &self.head_targets] {
            if t.batch_size == 0 || !(t.fg_fraction > 0.0 && t.fg_fraction <= 1.0) || !(0.0..1.0).contains(&t.fg_iou) {
                return Err(Error::Config("target sampling config out of range".into()));
            }
        }
        if self.frozen_backbone_blocks > 4 {
            return Err(Error::Config("at most 4 backbone blocks can be frozen".into()));
        }
        if !(self.final_nms_iou > 0.0 && self.final_nms_iou < 1.0) {
            return Err(Error::Config("final_nms_iou must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / FEATURE_STRIDE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalMode {
    Train,
    Test,
}

/// Proposals surviving RPN filtering and class-agnostic NMS (the set G).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoIBatch {
    pub rois: Vec<BoundingBox>,
    /// Objectness probability per RoI.
    pub scores: Vec<f64>,
}

impl RoIBatch {
    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }
}

/// Per-RoI class probabilities over `(background, class_1, class_2)` and per-class deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    /// `(K, 4 * classes)`, class-major.
    pub deltas: Array2<f64>,
}

impl ClassScores {
    pub fn from_logits(logits: Array2<f64>, deltas: Array2<f64>) -> Self {
        ClassScores {
            probs: softmax_rows(&logits),
            logits,
            deltas,
        }
    }

    /// Scores given directly as probabilities (no logits available).
    pub fn from_probs(probs: Array2<f64>) -> Self {
        let logits = probs.mapv(|p| p.max(f64::MIN_POSITIVE).ln());
        let deltas = Array2::zeros((probs.nrows(), 4 * ClassLabel::COUNT));
        ClassScores { logits, probs, deltas }
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn class_deltas(&self, row: usize, label: ClassLabel) -> [f64; 4] {
        let c = label.index() * 4;
        [
            self.deltas[[row, c]],
            self.deltas[[row, c + 1]],
            self.deltas[[row, c + 2]],
            self.deltas[[row, c + 3]],
        ]
    }
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    convs: Vec<ConvCache>,
    outputs: Vec<Array3<f64>>,
}

#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// Objectness logit per anchor, anchors in `(row, col, anchor)` order.
    pub objectness: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
    conv_cache: ConvCache,
    hidden: Array3<f64>,
    cls_cache: ConvCache,
    reg_cache: ConvCache,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    plan: RoiAlignPlan,
    pooled: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
}

/// Everything computed for one image by a full forward pass.
#[derive(Debug, Clone)]
pub struct ImageForward {
    pub features: Array3<f64>,
    backbone: BackboneCache,
    pub proposals: RoIBatch,
    pub scores: Option<ClassScores>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StrongLosses {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub head_cls: f64,
    pub head_reg: f64,
}

impl StrongLosses {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.head_cls + self.head_reg
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.rpn_cls, self.rpn_reg, self.head_cls, self.head_reg]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Sampled anchor and RoI targets for one strong image.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongTargets {
    pub rpn: TargetAssignment,
    /// Candidate RoIs (proposals plus the GT box) that `head` indexes into.
    pub candidates: Vec<BoundingBox>,
    pub head: TargetAssignment,
}

#[derive(Debug, Clone)]
pub struct Detector {
    cfg: DetectorConfig,
    backbone: Vec<Conv2d>,
    rpn_conv: Conv2d,
    rpn_cls: Conv2d,
    rpn_reg: Conv2d,
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    bbox: Linear,
    anchors: Vec<BoundingBox>,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, 0xde7ec7);
        let mut in_ch = 1;
        let mut backbone = Vec::with_capacity(4);
        for (i, (&out, &stride)) in cfg.backbone_channels.iter().zip(&BACKBONE_STRIDES).enumerate() {
            backbone.push(Conv2d::new(&format!("backbone.{i}"), in_ch, out, 3, stride, 1, None, &mut rng));
            in_ch = out;
        }
        let a = cfg.anchors.per_cell();
        let r = cfg.rpn_channels;
        let rpn_conv = Conv2d::new("rpn.conv", in_ch, r, 3, 1, 1, None, &mut rng);
        let rpn_cls = Conv2d::new("rpn.cls", r, a, 3, 1, 1, Some(0.01), &mut rng);
        let rpn_reg = Conv2d::new("rpn.reg", r, 4 * a, 3, 1, 1, Some(0.01), &mut rng);
        let pooled = in_ch * cfg.pool_size * cfg.pool_size;
        let fc1 = Linear::new("head.fc1", pooled, cfg.head_hidden, None, &mut rng);
        let fc2 = Linear::new("head.fc2", cfg.head_hidden, cfg.head_hidden, None, &mut rng);
        let cls = Linear::new("head.cls", cfg.head_hidden, ClassLabel::COUNT, Some(0.01), &mut rng);
        let bbox = Linear::new("head.bbox", cfg.head_hidden, 4 * ClassLabel::COUNT, Some(0.001), &mut rng);
        let fs = cfg.feature_size();
        let anchors = cfg.anchors.grid(fs, fs);
        Ok(Detector {
            cfg,
            backbone,
            rpn_conv,
            rpn_cls,
            rpn_reg,
            fc1,
            fc2,
            cls,
            bbox,
            anchors,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn anchors(&self) -> &[BoundingBox] {
        &self.anchors
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.backbone.iter().flat_map(|c| c.params()).collect();
        v.extend(self.rpn_conv.params());
        v.extend(self.rpn_cls.params());
        v.extend(self.rpn_reg.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v.extend(self.cls.params());
        v.extend(self.bbox.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.backbone.iter_mut().flat_map(|c| c.params_mut()).collect();
        v.extend(self.rpn_conv.params_mut());
        v.extend(self.rpn_cls.params_mut());
        v.extend(self.rpn_reg.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v.extend(self.cls.params_mut());
        v.extend(self.bbox.params_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Whether the optimizer may update the named parameter.
    pub fn is_trainable(&self, name: &str) -> bool {
        (0..self.cfg.frozen_backbone_blocks).all(|i| !name.starts_with(&format!("backbone.{i}.")))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn input_tensor(&self, image: &GrayImage) -> Result<Array3<f64>> {
        let n = self.cfg.image_size;
        if image.width() != n || image.height() != n {
            return Err(Error::invalid(format!(
                "expected a {n}x{n} image, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        let data = image.pixels().iter().map(|&p| (p - 0.5) * 4.0).collect();
        Ok(Array3::from_shape_vec((1, n, n), data).expect("image shape"))
    }

    fn backbone_forward(&self, x: &Array3<f64>) -> (Array3<f64>, BackboneCache) {
        let mut convs = Vec::with_capacity(self.backbone.len());
        let mut outputs = Vec::with_capacity(self.backbone.len());
        let mut cur = x.clone();
        for conv in &self.backbone {
            let (mut out, cache) = conv.forward(&cur);
            relu_inplace(&mut out);
            convs.push(cache);
            outputs.push(out.clone());
            cur = out;
        }
        (cur, BackboneCache { convs, outputs })
    }

    fn backbone_backward(&mut self, cache: &BackboneCache, grad_feat: Array3<f64>) {
        let first = self.cfg.frozen_backbone_blocks;
        let mut grad = grad_feat;
        for i in (first..self.backbone.len()).rev() {
            relu_backward(&mut grad, &cache.outputs[i]);
            match self.backbone[i].backward(&cache.convs[i], &grad, i > first) {
                Some(g) => grad = g,
                None => break,
            }
        }
    }

    /// Backbone feature map at stride 8 for a grayscale image of the configured size.
    pub fn extract_features(&self, image: &GrayImage) -> Result<Array3<f64>> {
        Ok(self.backbone_forward(&self.input_tensor(image)?).0)
    }

    pub fn rpn_forward(&self, feat: &Array3<f64>) -> RpnOutput {
        let (mut hidden, conv_cache) = self.rpn_conv.forward(feat);
        relu_inplace(&mut hidden);
        let (cls, cls_cache) = self.rpn_cls.forward(&hidden);
        let (reg, reg_cache) = self.rpn_reg.forward(&hidden);
        let (a, h, w) = cls.dim();
        let mut objectness = Vec::with_capacity(a * h * w);
        let mut deltas = Vec::with_capacity(a * h * w);
        for y in 0..h {
            for x in 0..w {
                for k in 0..a {
                    objectness.push(cls[[k, y, x]]);
                    deltas.push([
                        reg[[4 * k, y, x]],
                        reg[[4 * k + 1, y, x]],
                        reg[[4 * k + 2, y, x]],
                        reg[[4 * k + 3, y, x]],
                    ]);
                }
            }
        }
        RpnOutput {
            objectness,
            deltas,
            conv_cache,
            hidden,
            cls_cache,
            reg_cache,
        }
    }

    fn rpn_backward(&mut self, out: &RpnOutput, grad_obj: &[f64], grad_deltas: &[[f64; 4]]) -> Array3<f64> {
        let a = self.cfg.anchors.per_cell();
        let (_, h, w) = out.hidden.dim();
        let mut g_cls = Array3::<f64>::zeros((a, h, w));
        let mut g_reg = Array3::<f64>::zeros((4 * a, h, w));
        for y in 0..h {
            for x in 0..w {
                for k in 0..a {
                    let i = (y * w + x) * a + k;
                    g_cls[[k, y, x]] = grad_obj[i];
                    for c in 0..4 {
                        g_reg[[4 * k + c, y, x]] = grad_deltas[i][c];
                    }
                }
            }
        }
        let mut g_hidden = self.rpn_cls.backward(&out.cls_cache, &g_cls, true).expect("input grad");
        g_hidden += &self.rpn_reg.backward(&out.reg_cache, &g_reg, true).expect("input grad");
        relu_backward(&mut g_hidden, &out.hidden);
        self.rpn_conv.backward(&out.conv_cache, &g_hidden, true).expect("input grad")
    }

    /// Decodes, clips, filters by objectness and applies class-agnostic NMS.
    pub fn propose(&self, rpn: &RpnOutput, mode: ProposalMode) -> RoIBatch {
        let ac = &self.cfg.anchors;
        let (pre, post) = match mode {
            ProposalMode::Train => (ac.train_pre_nms, ac.train_post_nms),
            ProposalMode::Test => (ac.test_pre_nms, ac.test_post_nms),
        };
        let n = self.cfg.image_size as f64;
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for ((anchor, d), &z) in self.anchors.iter().zip(&rpn.deltas).zip(&rpn.objectness) {
            let Some(b) = BoxCoder::RPN.decode(anchor, *d).and_then(|b| b.clip(n, n)) else {
                continue;
            };
            if b.width() < ac.min_size || b.height() < ac.min_size || !z.is_finite() {
                continue;
            }
            boxes.push(b);
            scores.push(sigmoid(z));
        }
        let top: Vec<usize> = score_order(&scores).into_iter().take(pre).collect();
        let boxes: Vec<BoundingBox> = top.iter().map(|&i| boxes[i]).collect();
        let scores: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
        let kept = nms_indices(&boxes, &scores, None, ac.nms_iou);
        let kept = &kept[..kept.len().min(post)];
        RoIBatch {
            rois: kept.iter().map(|&i| boxes[i]).collect(),
            scores: kept.iter().map(|&i| scores[i]).collect(),
        }
    }

    fn head_forward(&self, feat: &Array3<f64>, rois: &[BoundingBox]) -> (Array2<f64>, Array2<f64>, HeadCache) {
        let (pooled, plan) = roi_align(feat, rois, FEATURE_STRIDE, self.cfg.pool_size);
        let mut h1 = self.fc1.forward(&pooled);
        relu_inplace(&mut h1);
        let mut h2 = self.fc2.forward(&h1);
        relu_inplace(&mut h2);
        let logits = self.cls.forward(&h2);
        let deltas = self.bbox.forward(&h2);
        (logits, deltas, HeadCache { plan, pooled, h1, h2 })
    }

    fn head_backward(&mut self, cache: &HeadCache, g_logits: &Array2<f64>, g_deltas: &Array2<f64>, grad_feat: &mut Array3<f64>) {
        let mut g_h2 = self.cls.backward(&cache.h2, g_logits, true).expect("input grad");
        g_h2 += &self.bbox.backward(&cache.h2, g_deltas, true).expect("input grad");
        relu_backward(&mut g_h2, &cache.h2);
        let mut g_h1 = self.fc2.backward(&cache.h1, &g_h2, true).expect("input grad");
        relu_backward(&mut g_h1, &cache.h1);
        let g_pooled = self.fc1.backward(&cache.pooled, &g_h1, true).expect("input grad");
        roi_align_backward(&cache.plan, &g_pooled, grad_feat);
    }

    /// Class probabilities and per-class deltas for each RoI.
    pub fn roi_head(&self, feat: &Array3<f64>, rois: &[BoundingBox]) -> Result<ClassScores> {
        if rois.is_empty() {
            return Err(Error::NoProposals);
        }
        let (logits, deltas, _) = self.head_forward(feat, rois);
        Ok(ClassScores::from_logits(logits, deltas))
    }

    /// Backbone, proposals and (when any proposal survives) head scores.
    pub fn forward_image(&self, image: &GrayImage, mode: ProposalMode) -> Result<ImageForward> {
        let x = self.input_tensor(image)?;
        let (features, backbone) = self.backbone_forward(&x);
        let rpn = self.rpn_forward(&features);
        let proposals = self.propose(&rpn, mode);
        let scores = if proposals.is_empty() {
            None
        } else {
            Some(self.roi_head(&features, &proposals.rois)?)
        };
        Ok(ImageForward {
            features,
            backbone,
            proposals,
            scores,
        })
    }

    /// Backpropagates logit gradients for selected RoI rows of a previous forward pass.
    pub fn backward_rows(&mut self, fwd: &ImageForward, rows: &[usize], grad_logits: &[[f64; 3]]) {
        assert_eq!(rows.len(), grad_logits.len());
        if rows.is_empty() {
            return;
        }
        let rois: Vec<BoundingBox> = rows.iter().map(|&r| fwd.proposals.rois[r]).collect();
        let (_, _, cache) = self.head_forward(&fwd.features, &rois);
        let g_logits = Array2::from_shape_fn((rows.len(), ClassLabel::COUNT), |(i, j)| grad_logits[i][j]);
        let g_deltas = Array2::zeros((rows.len(), 4 * ClassLabel::COUNT));
        let mut g_feat = Array3::zeros(fwd.features.dim());
        self.head_backward(&cache, &g_logits, &g_deltas, &mut g_feat);
        self.backbone_backward(&fwd.backbone, g_feat);
    }

    /// Samples anchor and RoI targets for a strong image from the current RPN output.
    pub fn strong_targets<R: Rng + ?Sized>(&self, rpn: &RpnOutput, gt: &Annotation, rng: &mut R) -> StrongTargets {
        let anchor_gt = Annotation {
            bbox: gt.bbox,
            label: ClassLabel::Class1,
        };
        let rpn_targets = assign_targets(&self.anchors, &anchor_gt, &BoxCoder::RPN, &self.cfg.rpn_targets, rng);
        let mut candidates = self.propose(rpn, ProposalMode::Train).rois;
        candidates.push(gt.bbox);
        let head = assign_targets(&candidates, gt, &BoxCoder::HEAD, &self.cfg.head_targets, rng);
        StrongTargets {
            rpn: rpn_targets,
            candidates,
            head,
        }
    }

    /// The four strong-image loss terms. With `targets = None` fresh targets are sampled
    /// from `rng`. With `term_weights`, gradients of `sum_i w_i * L_i` are accumulated.
    pub fn strong_pass<R: Rng + ?Sized>(
        &mut self,
        image: &GrayImage,
        gt: &Annotation,
        targets: Option<&StrongTargets>,
        rng: &mut R,
        term_weights: Option<[f64; 4]>,
    ) -> Result<(StrongLosses, StrongTargets)> {
        let x = self.input_tensor(image)?;
        let (feat, bb_cache) = self.backbone_forward(&x);
        let rpn = self.rpn_forward(&feat);
        let targets = match targets {
            Some(t) => t.clone(),
            None => self.strong_targets(&rpn, gt, rng),
        };
        let w = term_weights.unwrap_or([0.0; 4]);
        let mut losses = StrongLosses::default();

        let n_anchor = self.anchors.len();
        let mut g_obj = vec![0.0; n_anchor];
        let mut g_rpn_deltas = vec![[0.0; 4]; n_anchor];
        let n_rpn = targets.rpn.sampled.len().max(1) as f64;
        for t in &targets.rpn.sampled {
            let y = if t.label.is_background() { 0.0 } else { 1.0 };
            let (l, g) = bce_with_logit(rpn.objectness[t.index], y);
            losses.rpn_cls += l / n_rpn;
            g_obj[t.index] += w[0] * g / n_rpn;
            if let Some(reg) = t.regression {
                for c in 0..4 {
                    let (l, g) = smooth_l1(rpn.deltas[t.index][c] - reg[c], SMOOTH_L1_BETA);
                    losses.rpn_reg += l / n_rpn;
                    g_rpn_deltas[t.index][c] += w[1] * g / n_rpn;
                }
            }
        }

        let rois: Vec<BoundingBox> = targets.head.sampled.iter().map(|t| targets.candidates[t.index]).collect();
        let mut g_feat = Array3::<f64>::zeros(feat.dim());
        if !rois.is_empty() {
            let (logits, deltas, head_cache) = self.head_forward(&feat, &rois);
            let n_head = rois.len() as f64;
            let mut g_logits = Array2::<f64>::zeros(logits.dim());
            let mut g_deltas = Array2::<f64>::zeros(deltas.dim());
            for (r, t) in targets.head.sampled.iter().enumerate() {
                let (l, g) = softmax_cross_entropy(logits.row(r), t.label.index());
                losses.head_cls += l / n_head;
                for (c, gv) in g.iter().enumerate() {
                    g_logits[[r, c]] = w[2] * gv / n_head;
                }
                if let Some(reg) = t.regression {
                    let base = t.label.index() * 4;
                    for c in 0..4 {
                        let (l, g) = smooth_l1(deltas[[r, base + c]] - reg[c], SMOOTH_L1_BETA);
                        losses.head_reg += l / n_head;
                        g_deltas[[r, base + c]] = w[3] * g / n_head;
                    }
                }
            }
            if term_weights.is_some() {
                self.head_backward(&head_cache, &g_logits, &g_deltas, &mut g_feat);
            }
        }
        if term_weights.is_some() {
            g_feat += &self.rpn_backward(&rpn, &g_obj, &g_rpn_deltas);
            self.backbone_backward(&bb_cache, g_feat);
        }
        Ok((losses, targets))
    }

    /// Final detections: per-class boxes from every test proposal, score filtered,
    /// per-class NMS, at most `max_detections`, in descending score order.
    pub fn detect(&self, image: &GrayImage, score_threshold: f64) -> Result<Vec<Detection>> {
        let fwd = self.forward_image(image, ProposalMode::Test)?;
        Ok(self.detections_from(&fwd, score_threshold))
    }

    pub fn detections_from(&self, fwd: &ImageForward, score_threshold: f64) -> Vec<Detection> {
        let Some(scores) = &fwd.scores else {
            return Vec::new();
        };
        let n = self.cfg.image_size as f64;
        let mut dets = Vec::new();
        for (r, roi) in fwd.proposals.rois.iter().enumerate() {
            for label in ClassLabel::FOREGROUND {
                let score = scores.probs[[r, label.index()]];
                if !(score >= score_threshold) {
                    continue;
                }
                let decoded = BoxCoder::HEAD
                    .decode(roi, scores.class_deltas(r, label))
                    .and_then(|b| b.clip(n, n));
                if let Some(b) = decoded {
                    if let Ok(d) = Detection::new(b, label, score.clamp(0.0, 1.0)) {
                        dets.push(d);
                    }
                }
            }
        }
        let mut kept = nms(&dets, self.cfg.final_nms_iou, NmsMode::PerClass);
        kept.truncate(self.cfg.max_detections);
        kept
    }

    /// Flat copy of all parameter values, in `params()` order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    /// Sets one scalar parameter addressed by its flat index.
    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for p in self.params_mut() {
            if index < p.len() {
                p.value[index] = value;
                return;
            }
            index -= p.len();
        }
        panic!("flat parameter index out of range");
    }
}
