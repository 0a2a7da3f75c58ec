//! Per-category average precision and mAP at IoU 0.5.
//!
//! Predictions of one category are ranked by descending score across all
//! images (ties: input order). Each one is matched to the highest-IoU ground
//! truth box of the same image and category that is still unmatched and
//! overlaps it by at least the threshold; otherwise it is a false positive.
//! AP is the area under the precision envelope (all-point interpolation).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, DetectionSet};
use crate::labelspace::{Annotation, Taxonomy};

/// Area under the all-point interpolated precision/recall curve, given the
/// TP flag of every ranked prediction and the number of ground-truth boxes.
pub fn ap_from_ranked(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// AP of `category`, or `None` when it has no ground truth.
pub fn average_precision(
    preds: &[DetectionSet],
    gts: &[Annotation],
    category: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let gt: Vec<&Annotation> = gts.iter().filter(|a| a.category == category).collect();
    if gt.is_empty() {
        return None;
    }
    let mut ranked: Vec<(f64, u64, &crate::geometry::BBox)> = preds
        .iter()
        .flat_map(|set| {
            set.detections
                .iter()
                .filter(|d| d.category == category)
                .map(move |d| (d.score, set.image_id, &d.bbox))
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used = vec![false; gt.len()];
    let tp: Vec<bool> = ranked
        .iter()
        .map(|&(_, image, bbox)| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gt.iter().enumerate() {
                if used[gi] || g.image_id != image {
                    continue;
                }
                let v = iou(bbox, &g.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, _)) => {
                    used[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    Some(ap_from_ranked(&tp, gt.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub name: String,
    /// `None` when the category has no ground truth in the evaluated set.
    pub ap: Option<f64>,
    pub gt_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_category: Vec<CategoryAp>,
    pub map50: f64,
}

impl EvalResult {
    pub fn ap_of(&self, name: &str) -> Option<f64> {
        self.per_category.iter().find(|c| c.name == name).and_then(|c| c.ap)
    }

    /// Plain-text table, one row per category plus the mean.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for c in &self.per_category {
            let ap = c.ap.map_or("  absent".to_string(), |v| format!("{:>8.2}", 100.0 * v));
            out.push_str(&format!("{:<16}{ap}  (n={})\n", c.name, c.gt_count));
        }
        out.push_str(&format!("{:<16}{:>8.2}\n", "mAP@0.5", 100.0 * self.map50));
        out
    }
}

/// Per-category AP at IoU 0.5 and their mean over categories with ground truth.
pub fn map50(preds: &[DetectionSet], gts: &[Annotation], taxonomy: &Taxonomy) -> Result<EvalResult> {
    let per_category: Vec<CategoryAp> = taxonomy
        .categories
        .iter()
        .enumerate()
        .map(|(id, name)| CategoryAp {
            name: name.clone(),
            ap: average_precision(preds, gts, id, 0.5),
            gt_count: gts.iter().filter(|a| a.category == id).count(),
        })
        .collect();
    let present: Vec<f64> = per_category.iter().filter_map(|c| c.ap).collect();
    if present.is_empty() {
        return Err(Error::Evaluation("no category has ground truth".into()));
    }
    Ok(EvalResult {
        map50: present.iter().sum::<f64>() / present.len() as f64,
        per_category,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Detection};

    fn gt(image_id: u64, b: [f64; 4], category: usize) -> Annotation {
        Annotation {
            image_id,
            bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            category,
        }
    }

    fn pred(b: [f64; 4], category: usize, score: f64) -> Detection {
        Detection::one_hot(BBox::new(b[0], b[1], b[2], b[3]).unwrap(), category, score, 2)
    }

    #[test]
    fn perfect_and_duplicate() {
        let g = [gt(1, [0., 0., 10., 10.], 0)];
        let one = [DetectionSet::new(1, vec![pred([0., 0., 10., 10.], 0, 0.9)])];
        assert_eq!(average_precision(&one, &g, 0, 0.5), Some(1.0));
        let dup = [DetectionSet::new(
            1,
            vec![pred([0., 0., 10., 10.], 0, 0.9), pred([0., 0., 10., 10.], 0, 0.8)],
        )];
        assert_eq!(average_precision(&dup, &g, 0, 0.5), Some(1.0));
        assert_eq!(average_precision(&dup, &g, 1, 0.5), None);
    }

    #[test]
    fn empty_predictions_and_missing_categories() {
        let tax = Taxonomy::sorted("t", ["a", "b"]).unwrap();
        let g = [gt(1, [0., 0., 10., 10.], 0)];
        let r = map50(&[], &g, &tax).unwrap();
        assert_eq!(r.map50, 0.0);
        assert_eq!(r.per_category[1].ap, None);
        assert!(map50(&[], &[], &tax).is_err());
    }

    #[test]
    fn half_recall() {
        let g = [gt(1, [0., 0., 10., 10.], 0), gt(1, [20., 20., 30., 30.], 0)];
        let p = [DetectionSet::new(1, vec![pred([0., 0., 10., 10.], 0, 0.9)])];
        assert_eq!(average_precision(&p, &g, 0, 0.5), Some(0.5));
    }
}
