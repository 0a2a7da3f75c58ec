//! Reference two-stage detector.
//!
//! A stride-2 convolution stack followed by dilated context layers produces
//! the feature map `F`. A dense anchor head on `F` scores objectness and
//! regresses anchor deltas (the region-proposal losses). Proposals are
//! average-pooled from the second-to-last stride-2 stage and from `F` on a
//! fixed bin grid, passed through one hidden layer (the region feature) and
//! then into a `(K + 1)`-way classifier and a class-agnostic box refiner
//! (the region-of-interest losses). Logit 0 is background.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::anchors::{anchor_grid, BoxCoder};
use super::layers::{
    bce_with_logit, linear_backward, linear_forward, relu_backward_inplace, relu_inplace,
    smooth_l1, softmax, Conv2d,
};
use super::params::{ModelParameters, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{iou, match_greedy, nms_indices, BBox, Detection, DetectionSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub num_classes: usize,
    /// Output channels of each stride-2 stage.
    pub stage_channels: Vec<usize>,
    /// Dilations of the stride-1 context layers on top of the last stage.
    pub context_dilations: Vec<usize>,
    /// Channels of `F`, and dimension of every feature embedding.
    pub feature_dim: usize,
    pub anchor_sizes: Vec<f64>,
    /// Width / height ratios.
    pub anchor_ratios: Vec<f64>,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub rpn_nms_iou: f64,
    pub pre_nms_top_n: usize,
    pub post_nms_top_n_train: usize,
    pub post_nms_top_n_infer: usize,
    pub min_proposal_size: f64,
    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
    pub roi_foreground_iou: f64,
    pub pool_size: usize,
    /// Internal score floor applied at inference.
    pub score_floor: f64,
    pub max_detections: usize,
    pub detection_nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_size: 320,
            num_classes: 4,
            stage_channels: vec![8, 16, 32, 32],
            context_dilations: vec![2, 4],
            feature_dim: 32,
            anchor_sizes: vec![32.0, 64.0, 128.0],
            anchor_ratios: vec![1.0, 3.0, 6.0],
            rpn_batch: 128,
            rpn_positive_fraction: 0.5,
            rpn_positive_iou: 0.6,
            rpn_negative_iou: 0.3,
            rpn_nms_iou: 0.7,
            pre_nms_top_n: 300,
            post_nms_top_n_train: 64,
            post_nms_top_n_infer: 64,
            min_proposal_size: 2.0,
            roi_batch: 64,
            roi_positive_fraction: 0.25,
            roi_foreground_iou: 0.5,
            pool_size: 4,
            score_floor: 0.05,
            max_detections: 100,
            detection_nms_iou: 0.5,
        }
    }
}

impl DetectorConfig {
    /// Tiny instantiation (8x8 input, two categories) for gradient checks.
    pub fn micro() -> Self {
        DetectorConfig {
            input_size: 8,
            num_classes: 2,
            stage_channels: vec![3, 4, 4, 4],
            context_dilations: vec![1],
            feature_dim: 4,
            anchor_sizes: vec![4.0, 8.0],
            anchor_ratios: vec![1.0, 2.0],
            rpn_batch: 8,
            pre_nms_top_n: 8,
            post_nms_top_n_train: 4,
            post_nms_top_n_infer: 4,
            min_proposal_size: 0.5,
            roi_batch: 8,
            roi_positive_fraction: 0.5,
            pool_size: 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("detector: {what}")));
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1");
        }
        if self.stage_channels.len() < 2 || self.stage_channels.contains(&0) {
            return bad("need at least two non-empty stride-2 stages");
        }
        if self.feature_dim == 0 || self.context_dilations.contains(&0) {
            return bad("feature_dim and dilations must be positive");
        }
        if self.anchor_sizes.is_empty()
            || self.anchor_ratios.is_empty()
            || self
                .anchor_sizes
                .iter()
                .chain(&self.anchor_ratios)
                .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return bad("anchor sizes and ratios must be positive");
        }
        if self.input_size < 4 {
            return bad("input_size must be at least 4");
        }
        if self.pool_size == 0 || self.rpn_batch == 0 || self.roi_batch == 0 {
            return bad("pool size and batch sizes must be positive");
        }
        for (name, v) in [
            ("rpn_positive_fraction", self.rpn_positive_fraction),
            ("roi_positive_fraction", self.roi_positive_fraction),
            ("rpn_nms_iou", self.rpn_nms_iou),
            ("detection_nms_iou", self.detection_nms_iou),
            ("roi_foreground_iou", self.roi_foreground_iou),
            ("rpn_positive_iou", self.rpn_positive_iou),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(&format!("{name} must lie in (0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return bad("score_floor must lie in [0, 1]");
        }
        if self.rpn_negative_iou > self.rpn_positive_iou {
            return bad("rpn_negative_iou must not exceed rpn_positive_iou");
        }
        Ok(())
    }
}

/// Pooled features of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEmbedding {
    /// Global average of `F`, length `D`.
    pub image: Vec<f64>,
    /// One `D`-vector per region.
    pub regions: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResult {
    pub detections: DetectionSet,
    /// Region features are aligned with `detections`.
    pub features: FeatureEmbedding,
}

/// A supervision box: ground truth or a pseudo label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetBox {
    pub bbox: BBox,
    pub category: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionLosses {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
}

impl DetectionLosses {
    pub fn rpn(&self) -> f64 {
        self.rpn_cls + self.rpn_reg
    }

    pub fn roi(&self) -> f64 {
        self.roi_cls + self.roi_reg
    }

    pub fn total(&self) -> f64 {
        self.rpn() + self.roi()
    }
}

/// Output of the plain supervised step.
#[derive(Clone, Debug)]
pub struct TrainStepOutput {
    pub losses: DetectionLosses,
    /// Student foreground distributions over proposals matched to targets.
    pub soft_outputs: Vec<Vec<f64>>,
    /// Target index each `soft_outputs` row was matched to.
    pub soft_target_index: Vec<usize>,
    /// Image vector plus one region vector per target box.
    pub features: FeatureEmbedding,
    /// Gradient of `losses.total()`.
    pub gradients: ModelParameters,
}

/// Backbone activations for one image, reusable for detection, region
/// pooling and (when produced by the training path) backpropagation.
pub struct FeatureMaps {
    input: Tensor,
    /// Post-ReLU output of every backbone layer.
    acts: Vec<Tensor>,
    cols: Vec<Vec<f64>>,
}

impl FeatureMaps {
    fn top(&self) -> &Tensor {
        self.acts.last().expect("backbone has layers")
    }

    /// Global average of the last backbone map.
    pub fn image_feature(&self) -> Vec<f64> {
        let (c, h, w) = self.top().chw();
        let n = (h * w) as f64;
        (0..c)
            .map(|ci| self.top().data[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / n)
            .collect()
    }
}

struct RpnOut {
    hidden: Tensor,
    hidden_cols: Vec<f64>,
    objectness: Tensor,
    deltas: Tensor,
}

/// Integer cell range `[y0, y1) x [x0, x1)` of one pooling bin.
type Cells = [usize; 4];

struct RoiOut {
    pooled: Vec<f64>,
    bins: Vec<Cells>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    box_deltas: Vec<f64>,
}

/// Everything the student pass needs to backpropagate.
pub struct StudentPass {
    maps: FeatureMaps,
    rpn: RpnOut,
    rpn_obj_grad: Vec<f64>,
    rpn_delta_grad: Vec<(usize, [f64; 4])>,
    proposals: Vec<BBox>,
    rois: Vec<BBox>,
    roi: RoiOut,
    roi_logit_grad: Vec<f64>,
    roi_box_grad: Vec<f64>,
    soft_rows: Vec<usize>,
    target_rows: Vec<usize>,
    pub losses: DetectionLosses,
    /// Foreground logits (length K) of proposals matched to targets.
    pub soft_logits: Vec<Vec<f64>>,
    pub soft_target_index: Vec<usize>,
    pub image_feature: Vec<f64>,
    pub target_regions: Vec<Vec<f64>>,
}

/// Upstream coefficients and gradients for [`Detector::student_backward`].
#[derive(Clone, Debug, Default)]
pub struct Upstream {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    /// d loss / d foreground logits, aligned with `StudentPass::soft_logits`.
    pub soft_logits: Vec<Vec<f64>>,
    pub image_feature: Vec<f64>,
    pub target_regions: Vec<Vec<f64>>,
}

impl StudentPass {
    /// Region proposals the pass sampled from.
    pub fn proposals(&self) -> &[BBox] {
        &self.proposals
    }
}

impl Upstream {
    /// Scale the proposal losses by `rpn` and the region losses by `roi`.
    pub fn detection(rpn: f64, roi: f64) -> Self {
        Upstream {
            rpn_cls: rpn,
            rpn_reg: rpn,
            roi_cls: roi,
            roi_reg: roi,
            ..Default::default()
        }
    }
}

const RPN_CODER: BoxCoder = BoxCoder {
    weights: [1.0, 1.0, 1.0, 1.0],
};
const ROI_CODER: BoxCoder = BoxCoder {
    weights: [10.0, 10.0, 5.0, 5.0],
};
const RPN_SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
const ROI_SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    convs: Vec<Conv2d>,
    rpn_conv: Conv2d,
    rpn_obj: Conv2d,
    rpn_delta: Conv2d,
    /// Index of the backbone layer pooled alongside `F`.
    fine_layer: usize,
    anchors: Vec<BBox>,
    num_anchor_shapes: usize,
    pooled_dim: usize,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut ch = 3;
        for &c in &config.stage_channels {
            convs.push(Conv2d::new(ch, c, 3, 2, 1));
            ch = c;
        }
        for &d in &config.context_dilations {
            convs.push(Conv2d::new(ch, config.feature_dim, 3, 1, d));
            ch = config.feature_dim;
        }
        if ch != config.feature_dim {
            return Err(Error::Config(
                "detector: without context layers the last stage must have feature_dim channels"
                    .into(),
            ));
        }
        let fine_layer = config.stage_channels.len() - 2;
        let mut h = config.input_size;
        for conv in &convs {
            h = conv.out_size(h, h).0;
        }
        let a = config.anchor_sizes.len() * config.anchor_ratios.len();
        let anchors = anchor_grid(
            &config.anchor_sizes,
            &config.anchor_ratios,
            h,
            h,
            config.input_size,
            config.input_size,
        );
        let pooled_dim = config.pool_size
            * config.pool_size
            * (config.stage_channels[fine_layer] + config.feature_dim);
        let d = config.feature_dim;
        Ok(Detector {
            convs,
            rpn_conv: Conv2d::new(d, d, 3, 1, 1),
            rpn_obj: Conv2d::new(d, a, 1, 1, 1),
            rpn_delta: Conv2d::new(d, 4 * a, 1, 1, 1),
            fine_layer,
            anchors,
            num_anchor_shapes: a,
            pooled_dim,
            config,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    fn layer_name(&self, i: usize) -> String {
        let stages = self.config.stage_channels.len();
        if i < stages {
            format!("backbone.stage{i}")
        } else {
            format!("backbone.context{}", i - stages)
        }
    }

    /// Seeded random initialisation.
    pub fn init_params(&self, seed: u64) -> ModelParameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let normal = |shape: &[usize], std: f64, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, std).expect("valid std");
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
        };
        let k = self.config.num_classes;
        let d = self.config.feature_dim;
        let mut convs: Vec<(String, Conv2d, f64)> = self
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| (self.layer_name(i), *c, (2.0 / c.fan_in() as f64).sqrt()))
            .collect();
        convs.push((
            "rpn.conv".into(),
            self.rpn_conv,
            (2.0 / self.rpn_conv.fan_in() as f64).sqrt(),
        ));
        convs.push(("rpn.objectness".into(), self.rpn_obj, 0.01));
        convs.push(("rpn.deltas".into(), self.rpn_delta, 0.01));
        for (name, conv, std) in convs {
            tensors.insert(
                format!("{name}.weight"),
                normal(&conv.weight_shape(), std, &mut rng),
            );
            tensors.insert(format!("{name}.bias"), Tensor::zeros(&[conv.out_ch]));
        }
        for (name, out, inp, std) in [
            ("roi.fc", d, self.pooled_dim, (2.0 / self.pooled_dim as f64).sqrt()),
            ("roi.cls", k + 1, d, 0.01),
            ("roi.box", 4, d, 0.001),
        ] {
            tensors.insert(format!("{name}.weight"), normal(&[out, inp], std, &mut rng));
            tensors.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
        }
        ModelParameters::new(tensors).expect("finite init")
    }

    /// Checks that `params` has exactly this detector's schema.
    pub fn check_params(&self, params: &ModelParameters) -> Result<()> {
        params.check_schema(&self.init_params(0))
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        if image.shape != [3, s, s] {
            return Err(Error::Contract(format!(
                "detector expects a [3, {s}, {s}] image, got {:?}",
                image.shape
            )));
        }
        Ok(())
    }

    pub fn backbone(&self, params: &ModelParameters, image: &Tensor) -> Result<FeatureMaps> {
        self.check_image(image)?;
        let mut x = image.clone();
        x.data.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut cols = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            let name = self.layer_name(i);
            let prev = if i == 0 { &x } else { &acts[i - 1] };
            let (mut y, c) = conv.forward(
                params.get(&format!("{name}.weight")),
                params.get(&format!("{name}.bias")),
                prev,
            );
            relu_inplace(&mut y);
            acts.push(y);
            cols.push(c);
        }
        Ok(FeatureMaps {
            input: x,
            acts,
            cols,
        })
    }

    fn rpn_forward(&self, params: &ModelParameters, maps: &FeatureMaps) -> RpnOut {
        let (mut hidden, hidden_cols) = self.rpn_conv.forward(
            params.get("rpn.conv.weight"),
            params.get("rpn.conv.bias"),
            maps.top(),
        );
        relu_inplace(&mut hidden);
        let (objectness, _) = self.rpn_obj.forward(
            params.get("rpn.objectness.weight"),
            params.get("rpn.objectness.bias"),
            &hidden,
        );
        let (deltas, _) = self.rpn_delta.forward(
            params.get("rpn.deltas.weight"),
            params.get("rpn.deltas.bias"),
            &hidden,
        );
        RpnOut {
            hidden,
            hidden_cols,
            objectness,
            deltas,
        }
    }

    fn anchor_deltas(&self, rpn: &RpnOut, index: usize) -> [f64; 4] {
        let hw = self.anchors.len() / self.num_anchor_shapes;
        let (a, pos) = (index / hw, index % hw);
        std::array::from_fn(|k| rpn.deltas.data[(4 * a + k) * hw + pos])
    }

    fn proposals(&self, rpn: &RpnOut, post_nms: usize) -> Vec<BBox> {
        let s = self.config.input_size as f64;
        let mut cands: Vec<(usize, f64)> = rpn.objectness.data.iter().copied().enumerate().collect();
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut boxes = Vec::new();
        for &(i, score) in &cands {
            if boxes.len() >= self.config.pre_nms_top_n {
                break;
            }
            let b = RPN_CODER
                .decode(&self.anchors[i], self.anchor_deltas(rpn, i))
                .clip(s, s);
            if b.is_valid()
                && b.width() >= self.config.min_proposal_size
                && b.height() >= self.config.min_proposal_size
            {
                boxes.push(Detection {
                    bbox: b,
                    category: 0,
                    score,
                    soft_label: Vec::new(),
                });
            }
        }
        let set = DetectionSet::new(0, boxes);
        nms_indices(&set, self.config.rpn_nms_iou, false)
            .into_iter()
            .take(post_nms)
            .map(|i| set.detections[i].bbox)
            .collect()
    }

    fn pool_cells(&self, b: &BBox, rows: usize, cols: usize) -> Vec<Cells> {
        let p = self.config.pool_size;
        let s = self.config.input_size as f64;
        let (sy, sx) = (rows as f64 / s, cols as f64 / s);
        let (fy0, fy1) = (b.y_min * sy, b.y_max * sy);
        let (fx0, fx1) = (b.x_min * sx, b.x_max * sx);
        let span = |lo: f64, hi: f64, i: usize, limit: usize| -> (usize, usize) {
            let step = (hi - lo) / p as f64;
            let a = (lo + step * i as f64).floor().max(0.0) as usize;
            let a = a.min(limit - 1);
            let e = (lo + step * (i + 1) as f64).ceil() as usize;
            (a, e.clamp(a + 1, limit))
        };
        let mut cells = Vec::with_capacity(p * p);
        for by in 0..p {
            let (y0, y1) = span(fy0, fy1, by, rows);
            for bx in 0..p {
                let (x0, x1) = span(fx0, fx1, bx, cols);
                cells.push([y0, y1, x0, x1]);
            }
        }
        cells
    }

    fn pool_maps<'a>(&self, maps: &'a FeatureMaps) -> [&'a Tensor; 2] {
        [&maps.acts[self.fine_layer], maps.top()]
    }

    fn roi_forward(&self, params: &ModelParameters, maps: &FeatureMaps, rois: &[BBox]) -> RoiOut {
        let p2 = self.config.pool_size * self.config.pool_size;
        let mut pooled = vec![0.0; rois.len() * self.pooled_dim];
        let mut bins = Vec::with_capacity(rois.len() * 2 * p2);
        for (r, b) in rois.iter().enumerate() {
            let mut offset = r * self.pooled_dim;
            for map in self.pool_maps(maps) {
                let (c, h, w) = map.chw();
                let cells = self.pool_cells(b, h, w);
                for ci in 0..c {
                    let plane = &map.data[ci * h * w..(ci + 1) * h * w];
                    for (k, &[y0, y1, x0, x1]) in cells.iter().enumerate() {
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            acc += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                        }
                        pooled[offset + ci * p2 + k] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                    }
                }
                offset += c * p2;
                bins.extend(cells);
            }
        }
        let n = rois.len();
        let mut hidden = linear_forward(
            &pooled,
            n,
            params.get("roi.fc.weight"),
            params.get("roi.fc.bias"),
        );
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let logits = linear_forward(
            &hidden,
            n,
            params.get("roi.cls.weight"),
            params.get("roi.cls.bias"),
        );
        let box_deltas = linear_forward(
            &hidden,
            n,
            params.get("roi.box.weight"),
            params.get("roi.box.bias"),
        );
        RoiOut {
            pooled,
            bins,
            hidden,
            logits,
            box_deltas,
        }
    }

    /// Region features (`D`-vectors) of arbitrary boxes on precomputed maps.
    pub fn region_features(
        &self,
        params: &ModelParameters,
        maps: &FeatureMaps,
        boxes: &[BBox],
    ) -> Vec<Vec<f64>> {
        if boxes.is_empty() {
            return Vec::new();
        }
        let d = self.config.feature_dim;
        self.roi_forward(params, maps, boxes)
            .hidden
            .chunks(d)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Post-NMS detections on precomputed maps.
    pub fn detect(&self, params: &ModelParameters, maps: &FeatureMaps, image_id: u64) -> InferenceResult {
        let cfg = &self.config;
        let (k, d) = (cfg.num_classes, cfg.feature_dim);
        let rpn = self.rpn_forward(params, maps);
        let rois = self.proposals(&rpn, cfg.post_nms_top_n_infer);
        let s = cfg.input_size as f64;
        let mut dets = Vec::new();
        let mut rows = Vec::new();
        if !rois.is_empty() {
            let out = self.roi_forward(params, maps, &rois);
            for (r, roi) in rois.iter().enumerate() {
                let logits = &out.logits[r * (k + 1)..(r + 1) * (k + 1)];
                let probs = softmax(logits);
                let soft_label = softmax(&logits[1..]);
                let category = crate::geometry::argmax(&soft_label);
                let score = probs[category + 1];
                let deltas: [f64; 4] = std::array::from_fn(|i| out.box_deltas[r * 4 + i]);
                let bbox = ROI_CODER.decode(roi, deltas).clip(s, s);
                if score >= cfg.score_floor && bbox.is_valid() && bbox.area() > 0.0 {
                    dets.push(Detection {
                        bbox,
                        category,
                        score,
                        soft_label,
                    });
                    rows.push(r);
                }
            }
            let set = DetectionSet::new(image_id, dets);
            let keep: Vec<usize> = nms_indices(&set, cfg.detection_nms_iou, true)
                .into_iter()
                .take(cfg.max_detections)
                .collect();
            let regions = keep
                .iter()
                .map(|&i| out.hidden[rows[i] * d..(rows[i] + 1) * d].to_vec())
                .collect();
            return InferenceResult {
                detections: DetectionSet::new(
                    image_id,
                    keep.iter().map(|&i| set.detections[i].clone()).collect(),
                ),
                features: FeatureEmbedding {
                    image: maps.image_feature(),
                    regions,
                },
            };
        }
        InferenceResult {
            detections: DetectionSet::empty(image_id),
            features: FeatureEmbedding {
                image: maps.image_feature(),
                regions: Vec::new(),
            },
        }
    }

    pub fn infer(&self, params: &ModelParameters, image: &Tensor) -> Result<InferenceResult> {
        let maps = self.backbone(params, image)?;
        Ok(self.detect(params, &maps, 0))
    }

    fn check_targets(&self, targets: &[TargetBox]) -> Result<()> {
        let s = self.config.input_size as f64;
        for t in targets {
            if t.category >= self.config.num_classes {
                return Err(Error::Contract(format!(
                    "target category {} out of range",
                    t.category
                )));
            }
            let b = &t.bbox;
            if !b.is_valid() || b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > s || b.y_max > s {
                return Err(Error::Contract(format!("target box {b:?} outside the image")));
            }
        }
        Ok(())
    }

    /// Forward pass of the student with losses against `targets`.
    ///
    /// `seed` drives anchor and region sampling only.
    pub fn student_forward(
        &self,
        params: &ModelParameters,
        image: &Tensor,
        targets: &[TargetBox],
        seed: u64,
    ) -> Result<StudentPass> {
        self.student_forward_impl(params, image, targets, seed, None)
    }

    /// [`Self::student_forward`] with the region proposals supplied instead
    /// of derived from the RPN. Proposals are constants to backpropagation,
    /// so this is the function `student_backward` differentiates.
    pub fn student_forward_with_proposals(
        &self,
        params: &ModelParameters,
        image: &Tensor,
        targets: &[TargetBox],
        seed: u64,
        proposals: &[BBox],
    ) -> Result<StudentPass> {
        self.student_forward_impl(params, image, targets, seed, Some(proposals))
    }

    fn student_forward_impl(
        &self,
        params: &ModelParameters,
        image: &Tensor,
        targets: &[TargetBox],
        seed: u64,
        fixed_proposals: Option<&[BBox]>,
    ) -> Result<StudentPass> {
        self.check_targets(targets)?;
        let cfg = &self.config;
        let (k, d) = (cfg.num_classes, cfg.feature_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = self.backbone(params, image)?;
        let rpn = self.rpn_forward(params, &maps);

        // Anchor assignment.
        let n_anchor = self.anchors.len();
        let mut best_iou = vec![0.0f64; n_anchor];
        let mut best_gt = vec![usize::MAX; n_anchor];
        let mut gt_best = vec![0.0f64; targets.len()];
        for (ai, a) in self.anchors.iter().enumerate() {
            for (gi, t) in targets.iter().enumerate() {
                let v = iou(a, &t.bbox);
                if v > best_iou[ai] {
                    best_iou[ai] = v;
                    best_gt[ai] = gi;
                }
                gt_best[gi] = gt_best[gi].max(v);
            }
        }
        let mut label = vec![-1i8; n_anchor];
        for ai in 0..n_anchor {
            if best_iou[ai] < cfg.rpn_negative_iou {
                label[ai] = 0;
            }
            if best_iou[ai] >= cfg.rpn_positive_iou {
                label[ai] = 1;
            }
        }
        for (gi, t) in targets.iter().enumerate() {
            if gt_best[gi] <= 0.0 {
                continue;
            }
            for (ai, a) in self.anchors.iter().enumerate() {
                if iou(a, &t.bbox) == gt_best[gi] {
                    label[ai] = 1;
                    best_gt[ai] = gi;
                }
            }
        }
        let mut pos: Vec<usize> = (0..n_anchor).filter(|&i| label[i] == 1).collect();
        let mut neg: Vec<usize> = (0..n_anchor).filter(|&i| label[i] == 0).collect();
        let n_pos = pos
            .len()
            .min((cfg.rpn_batch as f64 * cfg.rpn_positive_fraction) as usize);
        pos.shuffle(&mut rng);
        pos.truncate(n_pos);
        neg.shuffle(&mut rng);
        neg.truncate(cfg.rpn_batch - n_pos);
        let n_rpn = (pos.len() + neg.len()).max(1) as f64;
        let mut losses = DetectionLosses::default();
        let mut rpn_obj_grad = vec![0.0; n_anchor];
        for (&i, t) in pos.iter().map(|i| (i, 1.0)).chain(neg.iter().map(|i| (i, 0.0))) {
            let (l, g) = bce_with_logit(rpn.objectness.data[i], t);
            losses.rpn_cls += l / n_rpn;
            rpn_obj_grad[i] = g / n_rpn;
        }
        let mut rpn_delta_grad = Vec::with_capacity(pos.len());
        for &i in &pos {
            let target = RPN_CODER.encode(&self.anchors[i], &targets[best_gt[i]].bbox);
            let pred = self.anchor_deltas(&rpn, i);
            let mut g = [0.0; 4];
            for j in 0..4 {
                let (l, dl) = smooth_l1(pred[j] - target[j], RPN_SMOOTH_L1_BETA);
                losses.rpn_reg += l / n_rpn;
                g[j] = dl / n_rpn;
            }
            rpn_delta_grad.push((i, g));
        }

        // Region sampling over proposals plus the targets themselves.
        let proposals = match fixed_proposals {
            Some(p) => p.to_vec(),
            None => self.proposals(&rpn, cfg.post_nms_top_n_train),
        };
        let mut candidates = proposals.clone();
        candidates.extend(targets.iter().map(|t| t.bbox));
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for (ci, c) in candidates.iter().enumerate() {
            let best = targets
                .iter()
                .enumerate()
                .map(|(gi, t)| (gi, iou(c, &t.bbox)))
                .fold(None, |acc: Option<(usize, f64)>, (gi, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((gi, v)),
                });
            match best {
                Some((gi, v)) if v >= cfg.roi_foreground_iou => fg.push((ci, Some(gi))),
                _ => bg.push((ci, None)),
            }
        }
        let n_fg = fg
            .len()
            .min((cfg.roi_batch as f64 * cfg.roi_positive_fraction).round() as usize);
        fg.shuffle(&mut rng);
        fg.truncate(n_fg);
        bg.shuffle(&mut rng);
        bg.truncate(cfg.roi_batch - n_fg);
        let sampled: Vec<(usize, Option<usize>)> = fg.into_iter().chain(bg).collect();
        let n_sampled = sampled.len();

        // Student proposals matched to targets drive the soft outputs.
        let target_set = DetectionSet::new(
            0,
            targets
                .iter()
                .map(|t| Detection::one_hot(t.bbox, t.category, 1.0, k))
                .collect(),
        );
        let proposal_set = DetectionSet::new(
            0,
            proposals
                .iter()
                .map(|b| Detection {
                    bbox: *b,
                    category: 0,
                    score: 1.0,
                    soft_label: Vec::new(),
                })
                .collect(),
        );
        let matching = match_greedy(&target_set, &proposal_set, cfg.roi_foreground_iou, false);

        let mut rois: Vec<BBox> = sampled.iter().map(|&(ci, _)| candidates[ci]).collect();
        let soft_start = rois.len();
        rois.extend(matching.pairs.iter().map(|&(_, pi)| proposals[pi]));
        let target_start = rois.len();
        rois.extend(targets.iter().map(|t| t.bbox));
        let roi = if rois.is_empty() {
            RoiOut {
                pooled: Vec::new(),
                bins: Vec::new(),
                hidden: Vec::new(),
                logits: Vec::new(),
                box_deltas: Vec::new(),
            }
        } else {
            self.roi_forward(params, &maps, &rois)
        };

        let mut roi_logit_grad = vec![0.0; rois.len() * (k + 1)];
        let mut roi_box_grad = vec![0.0; rois.len() * 4];
        let n_roi = n_sampled.max(1) as f64;
        for (r, &(ci, gt)) in sampled.iter().enumerate() {
            let logits = &roi.logits[r * (k + 1)..(r + 1) * (k + 1)];
            let probs = softmax(logits);
            let class = gt.map_or(0, |gi| targets[gi].category + 1);
            losses.roi_cls += -probs[class].max(f64::MIN_POSITIVE).ln() / n_roi;
            for (j, p) in probs.iter().enumerate() {
                roi_logit_grad[r * (k + 1) + j] =
                    (p - if j == class { 1.0 } else { 0.0 }) / n_roi;
            }
            if let Some(gi) = gt {
                let target = ROI_CODER.encode(&candidates[ci], &targets[gi].bbox);
                for j in 0..4 {
                    let (l, dl) = smooth_l1(roi.box_deltas[r * 4 + j] - target[j], ROI_SMOOTH_L1_BETA);
                    losses.roi_reg += l / n_roi;
                    roi_box_grad[r * 4 + j] = dl / n_roi;
                }
            }
        }

        let soft_rows: Vec<usize> = (soft_start..target_start).collect();
        let target_rows: Vec<usize> = (target_start..rois.len()).collect();
        let soft_logits = soft_rows
            .iter()
            .map(|&r| roi.logits[r * (k + 1) + 1..(r + 1) * (k + 1)].to_vec())
            .collect();
        let target_regions = target_rows
            .iter()
            .map(|&r| roi.hidden[r * d..(r + 1) * d].to_vec())
            .collect();
        Ok(StudentPass {
            image_feature: maps.image_feature(),
            maps,
            rpn,
            rpn_obj_grad,
            rpn_delta_grad,
            proposals,
            rois,
            roi,
            roi_logit_grad,
            roi_box_grad,
            soft_rows,
            target_rows,
            losses,
            soft_logits,
            soft_target_index: matching.pairs.iter().map(|&(ti, _)| ti).collect(),
            target_regions,
        })
    }

    /// Gradient of `rpn * L_rpn + roi * L_roi + <aux gradients>` with
    /// respect to every parameter.
    pub fn student_backward(
        &self,
        params: &ModelParameters,
        pass: &StudentPass,
        up: &Upstream,
    ) -> Result<ModelParameters> {
        let cfg = &self.config;
        let (k, d) = (cfg.num_classes, cfg.feature_dim);
        if !up.soft_logits.is_empty() && up.soft_logits.len() != pass.soft_rows.len()
            || !up.target_regions.is_empty() && up.target_regions.len() != pass.target_rows.len()
            || !up.image_feature.is_empty() && up.image_feature.len() != d
        {
            return Err(Error::Contract(
                "upstream gradients do not align with the student pass".into(),
            ));
        }
        let mut grads = params.zeros_like();
        let top_shape = pass.maps.top().shape.clone();
        let mut d_top = Tensor::zeros(&top_shape);
        let fine_shape = pass.maps.acts[self.fine_layer].shape.clone();
        let mut d_fine = Tensor::zeros(&fine_shape);

        // Region head.
        let n = pass.rois.len();
        if n > 0 {
            let mut dlogits: Vec<f64> = pass.roi_logit_grad.iter().map(|g| g * up.roi_cls).collect();
            let dbox: Vec<f64> = pass.roi_box_grad.iter().map(|g| g * up.roi_reg).collect();
            for (row, g) in pass.soft_rows.iter().zip(&up.soft_logits) {
                for j in 0..k {
                    dlogits[row * (k + 1) + 1 + j] += g[j];
                }
            }
            let mut dhidden = {
                let (w, b) = split2(&mut grads, "roi.cls");
                linear_backward(&pass.roi.hidden, n, params.get("roi.cls.weight"), &dlogits, w, b)
            };
            let dh_box = {
                let (w, b) = split2(&mut grads, "roi.box");
                linear_backward(&pass.roi.hidden, n, params.get("roi.box.weight"), &dbox, w, b)
            };
            for (a, b) in dhidden.iter_mut().zip(&dh_box) {
                *a += b;
            }
            for (row, g) in pass.target_rows.iter().zip(&up.target_regions) {
                for j in 0..d {
                    dhidden[row * d + j] += g[j];
                }
            }
            for (g, h) in dhidden.iter_mut().zip(&pass.roi.hidden) {
                if *h <= 0.0 {
                    *g = 0.0;
                }
            }
            let dpooled = {
                let (w, b) = split2(&mut grads, "roi.fc");
                linear_backward(&pass.roi.pooled, n, params.get("roi.fc.weight"), &dhidden, w, b)
            };
            self.pool_backward(&dpooled, &pass.roi.bins, n, &mut d_fine, &mut d_top);
        }

        // Image-level pooled feature.
        if !up.image_feature.is_empty() {
            let (_, h, w) = d_top.chw();
            let inv = 1.0 / (h * w) as f64;
            for (ci, g) in up.image_feature.iter().enumerate() {
                d_top.data[ci * h * w..(ci + 1) * h * w]
                    .iter_mut()
                    .for_each(|v| *v += g * inv);
            }
        }

        // Proposal head.
        if up.rpn_cls != 0.0 || up.rpn_reg != 0.0 {
            let mut d_obj = Tensor::zeros(&pass.rpn.objectness.shape);
            for (o, g) in d_obj.data.iter_mut().zip(&pass.rpn_obj_grad) {
                *o = g * up.rpn_cls;
            }
            let mut d_delta = Tensor::zeros(&pass.rpn.deltas.shape);
            let hw = self.anchors.len() / self.num_anchor_shapes;
            for &(i, g) in &pass.rpn_delta_grad {
                let (a, p) = (i / hw, i % hw);
                for j in 0..4 {
                    d_delta.data[(4 * a + j) * hw + p] += g[j] * up.rpn_reg;
                }
            }
            let hshape = pass.rpn.hidden.chw();
            let mut d_hidden = {
                let (w, b) = split2(&mut grads, "rpn.objectness");
                self.rpn_obj
                    .backward(
                        params.get("rpn.objectness.weight"),
                        hshape,
                        &pass.rpn.hidden.data,
                        &d_obj,
                        w,
                        b,
                        true,
                    )
                    .expect("input grad")
            };
            let d_hidden2 = {
                let (w, b) = split2(&mut grads, "rpn.deltas");
                self.rpn_delta
                    .backward(
                        params.get("rpn.deltas.weight"),
                        hshape,
                        &pass.rpn.hidden.data,
                        &d_delta,
                        w,
                        b,
                        true,
                    )
                    .expect("input grad")
            };
            for (a, b) in d_hidden.data.iter_mut().zip(&d_hidden2.data) {
                *a += b;
            }
            relu_backward_inplace(&mut d_hidden, &pass.rpn.hidden);
            let dt = {
                let (w, b) = split2(&mut grads, "rpn.conv");
                self.rpn_conv
                    .backward(
                        params.get("rpn.conv.weight"),
                        pass.maps.top().chw(),
                        &pass.rpn.hidden_cols,
                        &d_hidden,
                        w,
                        b,
                        true,
                    )
                    .expect("input grad")
            };
            for (a, b) in d_top.data.iter_mut().zip(&dt.data) {
                *a += b;
            }
        }

        // Backbone, top-down.
        let mut grad = d_top;
        for i in (0..self.convs.len()).rev() {
            if i == self.fine_layer {
                for (a, b) in grad.data.iter_mut().zip(&d_fine.data) {
                    *a += b;
                }
            }
            relu_backward_inplace(&mut grad, &pass.maps.acts[i]);
            let name = self.layer_name(i);
            let input_shape = if i == 0 {
                pass.maps.input.chw()
            } else {
                pass.maps.acts[i - 1].chw()
            };
            let next = {
                let (w, b) = split2(&mut grads, &name);
                self.convs[i].backward(
                    params.get(&format!("{name}.weight")),
                    input_shape,
                    &pass.maps.cols[i],
                    &grad,
                    w,
                    b,
                    i > 0,
                )
            };
            match next {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(grads)
    }

    fn pool_backward(
        &self,
        dpooled: &[f64],
        bins: &[Cells],
        n: usize,
        d_fine: &mut Tensor,
        d_top: &mut Tensor,
    ) {
        let p2 = self.config.pool_size * self.config.pool_size;
        let mut offset_bins = 0;
        // Difference arrays make the scatter O(bins) per channel.
        let mut diffs: Vec<Vec<f64>> = [&*d_fine, &*d_top]
            .iter()
            .map(|t| {
                let (c, h, w) = t.chw();
                vec![0.0; c * (h + 1) * (w + 1)]
            })
            .collect();
        let shapes = [d_fine.chw(), d_top.chw()];
        for r in 0..n {
            let mut offset = r * self.pooled_dim;
            for (m, &(c, h, w)) in shapes.iter().enumerate() {
                let cells = &bins[offset_bins..offset_bins + p2];
                let diff = &mut diffs[m];
                for ci in 0..c {
                    let base = ci * (h + 1) * (w + 1);
                    for (kb, &[y0, y1, x0, x1]) in cells.iter().enumerate() {
                        let g = dpooled[offset + ci * p2 + kb] / ((y1 - y0) * (x1 - x0)) as f64;
                        diff[base + y0 * (w + 1) + x0] += g;
                        diff[base + y0 * (w + 1) + x1] -= g;
                        diff[base + y1 * (w + 1) + x0] -= g;
                        diff[base + y1 * (w + 1) + x1] += g;
                    }
                }
                offset += c * p2;
                offset_bins += p2;
            }
        }
        for (m, target) in [d_fine, d_top].into_iter().enumerate() {
            let (c, h, w) = shapes[m];
            let diff = &mut diffs[m];
            for ci in 0..c {
                let base = ci * (h + 1) * (w + 1);
                for y in 0..h {
                    let mut run = 0.0;
                    for x in 0..w {
                        run += diff[base + y * (w + 1) + x];
                        diff[base + y * (w + 1) + x] = run;
                    }
                }
                for x in 0..w {
                    let mut run = 0.0;
                    for y in 0..h {
                        run += diff[base + y * (w + 1) + x];
                        target.data[(ci * h + y) * w + x] += run;
                    }
                }
            }
        }
    }

    /// Supervised step: losses, soft outputs, features and the gradient of
    /// the summed detection losses.
    pub fn train_step(
        &self,
        params: &ModelParameters,
        image: &Tensor,
        targets: &[TargetBox],
        seed: u64,
    ) -> Result<TrainStepOutput> {
        let pass = self.student_forward(params, image, targets, seed)?;
        let gradients = self.student_backward(
            params,
            &pass,
            &Upstream::detection(1.0, 1.0),
        )?;
        let l = pass.losses;
        if ![l.rpn_cls, l.rpn_reg, l.roi_cls, l.roi_reg]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Numeric(format!("non-finite detection loss {l:?}")));
        }
        Ok(TrainStepOutput {
            losses: l,
            soft_outputs: pass.soft_logits.iter().map(|z| softmax(z)).collect(),
            soft_target_index: pass.soft_target_index.clone(),
            features: FeatureEmbedding {
                image: pass.image_feature.clone(),
                regions: pass.target_regions.clone(),
            },
            gradients,
        })
    }
}

fn split2<'a>(grads: &'a mut ModelParameters, name: &str) -> (&'a mut Tensor, &'a mut Tensor) {
    let wname = format!("{name}.weight");
    let bname = format!("{name}.bias");
    let mut w = None;
    let mut b = None;
    for (k, t) in grads.iter_mut() {
        if *k == wname {
            w = Some(t);
        } else if *k == bname {
            b = Some(t);
        }
    }
    (
        w.unwrap_or_else(|| panic!("missing {wname}")),
        b.unwrap_or_else(|| panic!("missing {bname}")),
    )
}
