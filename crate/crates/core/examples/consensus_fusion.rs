//! Fuse two teachers' detections on one page into pseudo labels and compare
//! with plain confidence thresholding.
//!
//!     cargo run --example consensus_fusion

use dladapt::consensus::{fuse, hard_select, ConsensusConfig, Provenance};
use dladapt::geometry::{BBox, Detection, DetectionSet};

fn det(x0: f64, y0: f64, x1: f64, y1: f64, category: usize, score: f64) -> Detection {
    Detection::one_hot(BBox::new(x0, y0, x1, y1).unwrap(), category, score, 4)
}

fn main() {
    let stat = DetectionSet::new(1, vec![
        det(10.0, 10.0, 200.0, 40.0, 3, 0.80),
        det(10.0, 60.0, 200.0, 300.0, 0, 0.70),
        det(220.0, 60.0, 300.0, 120.0, 1, 0.90),
    ]);
    let dynamic = DetectionSet::new(1, vec![
        det(12.0, 11.0, 198.0, 42.0, 3, 0.75),
        det(14.0, 58.0, 205.0, 290.0, 0, 0.65),
        det(20.0, 320.0, 180.0, 360.0, 0, 0.95),
    ]);
    let cfg = ConsensusConfig::default();
    let fused = fuse(&stat, &dynamic, &cfg);
    println!("consensus pseudo labels ({} kept):", fused.len());
    for (d, p) in fused.detections.detections.iter().zip(&fused.provenance) {
        println!("  {p:?} cat={} score={:.3} box={:?}", d.category, d.score, d.bbox);
    }
    println!(
        "  consensus={} static-only={} dynamic-only={}",
        fused.count(Provenance::Consensus),
        fused.count(Provenance::StaticOnly),
        fused.count(Provenance::DynamicOnly)
    );
    let hard = hard_select(&dynamic, cfg.keep_threshold, cfg.nms_iou);
    println!("hard selection on the dynamic teacher keeps {}", hard.len());
}
