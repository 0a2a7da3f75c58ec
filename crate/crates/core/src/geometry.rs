//! Axis-aligned boxes, IoU, greedy matching and non-maximum suppression.
//!
//! Coordinates are continuous page pixels with the origin at the top-left.
//! Area is `(x_max - x_min) * (y_max - y_min)`, without the legacy `+1`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Validated constructor: coordinates must be finite and ordered.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Contract(format!("invalid box {b:?}")))
        }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clamp into `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x_min = self.x_min.clamp(0.0, width);
        let y_min = self.y_min.clamp(0.0, height);
        BBox {
            x_min,
            y_min,
            x_max: self.x_max.clamp(x_min, width),
            y_max: self.y_max.clamp(y_min, height),
        }
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }
}

/// Intersection over union. Two degenerate boxes (zero union) yield 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// One predicted layout element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
    /// Probability vector over the K foreground categories.
    pub soft_label: Vec<f64>,
}

impl Detection {
    /// Builds a detection whose category is the argmax of `soft_label`.
    pub fn from_soft_label(bbox: BBox, score: f64, soft_label: Vec<f64>) -> Self {
        let category = argmax(&soft_label);
        Detection {
            bbox,
            category,
            score,
            soft_label,
        }
    }

    /// Detection with a one-hot soft label, used for ground truth and tests.
    pub fn one_hot(bbox: BBox, category: usize, score: f64, num_categories: usize) -> Self {
        let mut soft_label = vec![0.0; num_categories];
        soft_label[category] = 1.0;
        Detection {
            bbox,
            category,
            score,
            soft_label,
        }
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(image_id: u64, detections: Vec<Detection>) -> Self {
        DetectionSet {
            image_id,
            detections,
        }
    }

    pub fn empty(image_id: u64) -> Self {
        Self::new(image_id, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Stable descending sort by score; equal scores keep their input order.
    pub fn sort_by_score(&mut self) {
        self.detections.sort_by(|a, b| by_score_desc(a.score, b.score));
    }

    /// Indices in descending-score order, ties broken by lower index.
    pub fn score_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.detections.len()).collect();
        order.sort_by(|&i, &j| {
            by_score_desc(self.detections[i].score, self.detections[j].score).then(i.cmp(&j))
        });
        order
    }
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Greedy non-maximum suppression.
///
/// Detections are visited in descending score (lower original index first on
/// ties); a detection is suppressed when its IoU with an already kept one
/// exceeds `iou_threshold`. With `per_category` set, only detections of the
/// same category suppress each other.
pub fn nms(dets: &DetectionSet, iou_threshold: f64, per_category: bool) -> DetectionSet {
    DetectionSet::new(
        dets.image_id,
        nms_indices(dets, iou_threshold, per_category)
            .into_iter()
            .map(|i| dets.detections[i].clone())
            .collect(),
    )
}

/// Indices of the detections [`nms`] keeps, in output order.
pub fn nms_indices(dets: &DetectionSet, iou_threshold: f64, per_category: bool) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in dets.score_order() {
        let cand = &dets.detections[i];
        let suppressed = kept.iter().any(|&k| {
            let keeper = &dets.detections[k];
            (!per_category || keeper.category == cand.category)
                && iou(&keeper.bbox, &cand.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Matching {
    /// `(src_index, ref_index)` pairs in the order they were formed.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_src: Vec<usize>,
    pub unmatched_ref: Vec<usize>,
}

/// One-to-one greedy matching of `src` onto `reference`.
///
/// `src` is walked in descending score; each element claims the unconsumed
/// reference element with the highest IoU, provided it reaches
/// `iou_threshold` (and shares the category when required). Equal IoUs go to
/// the lower reference index. Unmatched index lists are ascending.
pub fn match_greedy(
    src: &DetectionSet,
    reference: &DetectionSet,
    iou_threshold: f64,
    require_same_category: bool,
) -> Matching {
    let mut consumed = vec![false; reference.len()];
    let mut src_matched = vec![false; src.len()];
    let mut pairs = Vec::new();
    for i in src.score_order() {
        let s = &src.detections[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, r) in reference.detections.iter().enumerate() {
            if consumed[j] || (require_same_category && r.category != s.category) {
                continue;
            }
            let overlap = iou(&s.bbox, &r.bbox);
            if overlap < iou_threshold {
                continue;
            }
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((j, overlap));
            }
        }
        if let Some((j, _)) = best {
            consumed[j] = true;
            src_matched[i] = true;
            pairs.push((i, j));
        }
    }
    Matching {
        pairs,
        unmatched_src: (0..src.len()).filter(|&i| !src_matched[i]).collect(),
        unmatched_ref: (0..reference.len()).filter(|&j| !consumed[j]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(bx: BBox, category: usize, score: f64) -> Detection {
        Detection::one_hot(bx, category, score, 4)
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        let v = iou(&a, &b(5.0, 5.0, 15.0, 15.0));
        assert!((v - 25.0 / 175.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_degenerate_boxes_is_zero() {
        let p = b(3.0, 3.0, 3.0, 3.0);
        assert_eq!(iou(&p, &p), 0.0);
        let line = b(0.0, 0.0, 10.0, 0.0);
        assert_eq!(iou(&line, &line), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(5.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn nms_duplicate_and_category_isolation() {
        let bx = b(0.0, 0.0, 10.0, 10.0);
        let same = DetectionSet::new(1, vec![det(bx, 1, 0.8), det(bx, 1, 0.9)]);
        let out = nms(&same, 0.5, true);
        assert_eq!(out.len(), 1);
        assert_eq!(out.detections[0].score, 0.9);

        let diff = DetectionSet::new(1, vec![det(bx, 1, 0.9), det(bx, 2, 0.8)]);
        assert_eq!(nms(&diff, 0.5, true).len(), 2);
        assert_eq!(nms(&diff, 0.5, false).len(), 1);
        assert!(nms(&DetectionSet::empty(3), 0.5, true).is_empty());
    }

    #[test]
    fn nms_equal_scores_prefer_lower_index() {
        let bx = b(0.0, 0.0, 10.0, 10.0);
        let mut first = det(bx, 0, 0.5);
        first.soft_label = vec![0.7, 0.1, 0.1, 0.1];
        let set = DetectionSet::new(1, vec![first.clone(), det(bx, 0, 0.5)]);
        let out = nms(&set, 0.5, true);
        assert_eq!(out.detections, vec![first]);
    }

    #[test]
    fn match_identity_and_category_mismatch() {
        let bx = b(0.0, 0.0, 10.0, 10.0);
        let src = DetectionSet::new(1, vec![det(bx, 1, 0.9)]);
        let m = match_greedy(&src, &src, 0.5, true);
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert!(m.unmatched_src.is_empty() && m.unmatched_ref.is_empty());

        let other = DetectionSet::new(1, vec![det(bx, 2, 0.9)]);
        let m = match_greedy(&src, &other, 0.5, true);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_src, vec![0]);
        assert_eq!(m.unmatched_ref, vec![0]);
    }

    #[test]
    fn higher_score_source_claims_first() {
        let r = DetectionSet::new(1, vec![det(b(0.0, 0.0, 10.0, 10.0), 0, 1.0)]);
        let src = DetectionSet::new(
            1,
            vec![
                det(b(0.0, 0.0, 10.0, 10.0), 0, 0.3),
                det(b(1.0, 0.0, 10.0, 10.0), 0, 0.9),
            ],
        );
        let m = match_greedy(&src, &r, 0.5, true);
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.unmatched_src, vec![0]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.0..60.0f64, 0.0..60.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    fn arb_set() -> impl Strategy<Value = DetectionSet> {
        prop::collection::vec((arb_box(), 0usize..3, 0.0..1.0f64), 0..10).prop_map(|v| {
            DetectionSet::new(
                0,
                v.into_iter().map(|(bx, c, s)| det(bx, c, s)).collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let x = iou(&a, &c);
            prop_assert!((x - iou(&c, &a)).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assume!(a.area() > 0.0);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn nms_output_is_clean_subset(set in arb_set(), thr in 0.1..0.9f64) {
            let out = nms(&set, thr, true);
            for d in &out.detections {
                prop_assert!(set.detections.contains(d));
            }
            for (i, a) in out.detections.iter().enumerate() {
                for c in &out.detections[i + 1..] {
                    if a.category == c.category {
                        prop_assert!(iou(&a.bbox, &c.bbox) <= thr);
                    }
                }
            }
            for w in out.detections.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            prop_assert_eq!(nms(&set, thr, true), out);
        }

        #[test]
        fn matching_respects_threshold_and_is_disjoint(
            src in arb_set(), r in arb_set(), thr in 0.1..1.0f64, same in any::<bool>()
        ) {
            let m = match_greedy(&src, &r, thr, same);
            let mut seen_s = std::collections::HashSet::new();
            let mut seen_r = std::collections::HashSet::new();
            for &(i, j) in &m.pairs {
                prop_assert!(iou(&src.detections[i].bbox, &r.detections[j].bbox) >= thr);
                if same {
                    prop_assert_eq!(src.detections[i].category, r.detections[j].category);
                }
                prop_assert!(seen_s.insert(i));
                prop_assert!(seen_r.insert(j));
            }
            prop_assert_eq!(m.pairs.len() + m.unmatched_src.len(), src.len());
            prop_assert_eq!(m.pairs.len() + m.unmatched_ref.len(), r.len());
        }
    }
}
