//! Consensus pseudo-labels from the static and dynamic teachers.
//!
//! Pipeline: match same-category detections across the two teachers → fuse
//! each matched pair into one boosted detection, down-weight the unmatched
//! ones → drop everything under the keep threshold → per-category NMS.

use serde::{Deserialize, Serialize};

use crate::detector::TargetBox;
use crate::error::{Error, Result};
use crate::geometry::{iou, nms_indices, BBox, Detection, DetectionSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    pub match_iou: f64,
    /// Multiplier on the larger teacher score of a matched pair (capped at 1).
    pub boost: f64,
    /// Multiplier on detections only one teacher produced.
    pub penalty: f64,
    pub keep_threshold: f64,
    /// Per-category override of `keep_threshold`, indexed by id; empty
    /// means one shared threshold.
    pub keep_threshold_per_category: Vec<f64>,
    pub nms_iou: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            match_iou: 0.5,
            boost: 1.1,
            penalty: 0.5,
            keep_threshold: 0.6,
            keep_threshold_per_category: Vec::new(),
            nms_iou: 0.5,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.match_iou) || !unit(self.nms_iou) {
            return Err(Error::Config("match_iou and nms_iou must lie in (0, 1)".into()));
        }
        if !(self.penalty >= 0.0 && self.penalty <= 1.0 && 1.0 <= self.boost && self.boost.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= penalty ({}) <= 1 <= boost ({})",
                self.penalty, self.boost
            )));
        }
        let thresholds = std::iter::once(self.keep_threshold)
            .chain(self.keep_threshold_per_category.iter().copied());
        for t in thresholds {
            if !unit(t) {
                return Err(Error::Config(format!("keep threshold {t} outside (0, 1)")));
            }
        }
        Ok(())
    }

    fn threshold_for(&self, category: usize) -> f64 {
        self.keep_threshold_per_category
            .get(category)
            .copied()
            .unwrap_or(self.keep_threshold)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Consensus,
    StaticOnly,
    DynamicOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub detections: DetectionSet,
    /// Parallel to `detections.detections`.
    pub provenance: Vec<Provenance>,
}

impl PseudoLabelSet {
    pub fn empty(image_id: u64) -> Self {
        PseudoLabelSet {
            detections: DetectionSet::empty(image_id),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&q| q == p).count()
    }

    /// Pseudo labels as student training targets.
    pub fn targets(&self) -> Vec<TargetBox> {
        self.detections
            .detections
            .iter()
            .map(|d| TargetBox {
                bbox: d.bbox,
                category: d.category,
            })
            .collect()
    }

    pub fn soft_labels(&self) -> Vec<Vec<f64>> {
        self.detections.detections.iter().map(|d| d.soft_label.clone()).collect()
    }

    /// Keep the candidates that pass `threshold`, then NMS them.
    fn filtered(
        image_id: u64,
        candidates: Vec<(Detection, Provenance)>,
        threshold: impl Fn(&Detection) -> f64,
        nms_iou: f64,
    ) -> Self {
        let (kept, prov): (Vec<_>, Vec<_>) = candidates
            .into_iter()
            .filter(|(d, _)| d.score >= threshold(d))
            .unzip();
        let set = DetectionSet::new(image_id, kept);
        let keep = nms_indices(&set, nms_iou, true);
        PseudoLabelSet {
            provenance: keep.iter().map(|&i| prov[i]).collect(),
            detections: DetectionSet::new(
                image_id,
                keep.into_iter().map(|i| set.detections[i].clone()).collect(),
            ),
        }
    }
}

/// One-to-one same-category matching that does not depend on which teacher
/// is passed first: candidate pairs with IoU ≥ `thr` are taken greedily by
/// larger pair score, then IoU, then smaller pair score.
pub fn match_pairs(a: &DetectionSet, b: &DetectionSet, thr: f64) -> Vec<(usize, usize)> {
    let mut cand = Vec::new();
    for (i, da) in a.detections.iter().enumerate() {
        for (j, db) in b.detections.iter().enumerate() {
            if da.category != db.category {
                continue;
            }
            let v = iou(&da.bbox, &db.bbox);
            if v >= thr {
                cand.push((da.score.max(db.score), v, da.score.min(db.score), i, j));
            }
        }
    }
    cand.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then(y.1.total_cmp(&x.1))
            .then(y.2.total_cmp(&x.2))
            .then((x.3, x.4).cmp(&(y.3, y.4)))
    });
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, _, _, i, j) in cand {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Fuse a matched pair: score-weighted box, boosted max score, mean label.
pub fn fuse_pair(a: &Detection, b: &Detection, boost: f64) -> Detection {
    let total = a.score + b.score;
    let (wa, wb) = if total > 0.0 { (a.score / total, b.score / total) } else { (0.5, 0.5) };
    let bbox = BBox {
        x_min: wa * a.bbox.x_min + wb * b.bbox.x_min,
        y_min: wa * a.bbox.y_min + wb * b.bbox.y_min,
        x_max: wa * a.bbox.x_max + wb * b.bbox.x_max,
        y_max: wa * a.bbox.y_max + wb * b.bbox.y_max,
    };
    let mut soft: Vec<f64> = a.soft_label.iter().zip(&b.soft_label).map(|(x, y)| 0.5 * (x + y)).collect();
    let sum: f64 = soft.iter().sum();
    if sum > 0.0 {
        soft.iter_mut().for_each(|v| *v /= sum);
    }
    Detection {
        bbox,
        category: a.category,
        score: (boost * a.score.max(b.score)).min(1.0),
        soft_label: soft,
    }
}

pub fn fuse(r_static: &DetectionSet, r_dynamic: &DetectionSet, cfg: &ConsensusConfig) -> PseudoLabelSet {
    let pairs = match_pairs(r_static, r_dynamic, cfg.match_iou);
    let mut matched_s = vec![false; r_static.len()];
    let mut matched_d = vec![false; r_dynamic.len()];
    let mut candidates = Vec::with_capacity(r_static.len() + r_dynamic.len());
    for &(i, j) in &pairs {
        matched_s[i] = true;
        matched_d[j] = true;
        candidates.push((
            fuse_pair(&r_static.detections[i], &r_dynamic.detections[j], cfg.boost),
            Provenance::Consensus,
        ));
    }
    let single = |set: &DetectionSet, matched: &[bool], p: Provenance| {
        set.detections
            .iter()
            .zip(matched)
            .filter(|(_, m)| !**m)
            .map(|(d, _)| {
                let mut d = d.clone();
                d.score *= cfg.penalty;
                (d, p)
            })
            .collect::<Vec<_>>()
    };
    candidates.extend(single(r_static, &matched_s, Provenance::StaticOnly));
    candidates.extend(single(r_dynamic, &matched_d, Provenance::DynamicOnly));
    PseudoLabelSet::filtered(
        r_static.image_id,
        candidates,
        |d| cfg.threshold_for(d.category),
        cfg.nms_iou,
    )
}

/// Single-threshold selection over the dynamic teacher alone.
pub fn hard_select(r_dynamic: &DetectionSet, threshold: f64, nms_iou: f64) -> PseudoLabelSet {
    let candidates = r_dynamic
        .detections
        .iter()
        .map(|d| (d.clone(), Provenance::DynamicOnly))
        .collect();
    PseudoLabelSet::filtered(r_dynamic.image_id, candidates, |_| threshold, nms_iou)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: [f64; 4], cat: usize, score: f64) -> Detection {
        Detection::one_hot(BBox::new(b[0], b[1], b[2], b[3]).unwrap(), cat, score, 3)
    }

    #[test]
    fn identical_pair_is_boosted() {
        let a = DetectionSet::new(0, vec![det([0., 0., 10., 10.], 1, 0.8)]);
        let out = fuse(&a, &a, &ConsensusConfig::default());
        assert_eq!(out.provenance, vec![Provenance::Consensus]);
        let d = &out.detections.detections[0];
        assert!((d.score - 0.88).abs() < 1e-12);
        assert_eq!(d.bbox, a.detections[0].bbox);
    }

    #[test]
    fn lone_detection_is_penalised_away() {
        let dynamic = DetectionSet::new(0, vec![det([0., 0., 10., 10.], 1, 0.9)]);
        assert!(fuse(&DetectionSet::empty(0), &dynamic, &ConsensusConfig::default()).is_empty());
        assert!(fuse(&DetectionSet::empty(0), &DetectionSet::empty(0), &ConsensusConfig::default()).is_empty());
    }

    #[test]
    fn category_mismatch_is_not_matched() {
        let s = DetectionSet::new(0, vec![det([0., 0., 10., 10.], 1, 0.95)]);
        let d = DetectionSet::new(0, vec![det([0., 0., 10., 10.], 2, 0.95)]);
        let out = fuse(&s, &d, &ConsensusConfig::default());
        assert_eq!(out.count(Provenance::Consensus), 0);
    }

    #[test]
    fn hard_selection_filters() {
        let set = DetectionSet::new(
            0,
            vec![
                det([0., 0., 10., 10.], 0, 0.95),
                det([20., 0., 30., 10.], 0, 0.7),
                det([40., 0., 50., 10.], 0, 0.4),
            ],
        );
        let out = hard_select(&set, 0.8, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out.detections.detections[0].score, 0.95);
        assert_eq!(hard_select(&set, 1e-9, 0.5).len(), 3);
        assert!(hard_select(&set, 0.99, 0.5).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(ConsensusConfig::default().validate().is_ok());
        let bad = ConsensusConfig {
            boost: 0.9,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
