//! Central finite-difference checks of every loss path through the
//! 8x8, two-category detector.

use dladapt::detector::{Detector, DetectorConfig, ModelParameters, Tensor, TargetBox, Upstream};
use dladapt::geometry::BBox;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const REL_TOL: f64 = 1e-3;

fn setup() -> (Detector, ModelParameters, Tensor, Vec<TargetBox>) {
    let det = Detector::new(DetectorConfig::micro()).unwrap();
    let params = det.init_params(11);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = Tensor::from_vec(&[3, 8, 8], (0..192).map(|_| rng.random::<f64>()).collect()).unwrap();
    let targets = vec![
        TargetBox {
            bbox: BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(),
            category: 0,
        },
        TargetBox {
            bbox: BBox::new(1.0, 2.0, 5.0, 5.0).unwrap(),
            category: 1,
        },
    ];
    (det, params, image, targets)
}

/// Scalar objective evaluated through a fresh forward pass with the
/// proposals held fixed (they are constants to backpropagation).
fn objective(
    det: &Detector,
    params: &ModelParameters,
    image: &Tensor,
    targets: &[TargetBox],
    proposals: &[BBox],
    up: &Upstream,
) -> f64 {
    let pass = det
        .student_forward_with_proposals(params, image, targets, 3, proposals)
        .unwrap();
    let l = pass.losses;
    let mut v = up.rpn_cls * l.rpn_cls
        + up.rpn_reg * l.rpn_reg
        + up.roi_cls * l.roi_cls
        + up.roi_reg * l.roi_reg;
    for (row, g) in pass.soft_logits.iter().zip(&up.soft_logits) {
        v += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
    }
    v += pass
        .image_feature
        .iter()
        .zip(&up.image_feature)
        .map(|(a, b)| a * b)
        .sum::<f64>();
    for (row, g) in pass.target_regions.iter().zip(&up.target_regions) {
        v += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
    }
    v
}

fn check(name: &str, up: Upstream) {
    let (det, params, image, targets) = setup();
    let pass = det.student_forward(&params, &image, &targets, 3).unwrap();
    let grads = det.student_backward(&params, &pass, &up).unwrap();
    let analytic: Vec<f64> = grads.values().collect();
    let mut candidates: Vec<usize> = (0..analytic.len())
        .filter(|&i| analytic[i].abs() > 1e-7)
        .collect();
    assert!(!candidates.is_empty(), "{name}: no parameter reaches this loss");
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    candidates.shuffle(&mut rng);
    let mut worst: f64 = 0.0;
    for &i in candidates.iter().take(20) {
        let mut plus = params.clone();
        *plus.value_mut(i) += EPS;
        let mut minus = params.clone();
        *minus.value_mut(i) -= EPS;
        let numeric = (objective(&det, &plus, &image, &targets, pass.proposals(), &up)
            - objective(&det, &minus, &image, &targets, pass.proposals(), &up))
            / (2.0 * EPS);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs());
        worst = worst.max(rel);
        assert!(
            rel < REL_TOL,
            "{name}: {} analytic {} numeric {} rel {rel:e}",
            params.value_name(i),
            analytic[i],
            numeric
        );
    }
    println!("{name}: worst relative error {worst:.2e}");
}

fn random_rows(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

#[test]
fn rpn_classification_gradient() {
    check("rpn_cls", Upstream { rpn_cls: 1.0, ..Default::default() });
}

#[test]
fn rpn_regression_gradient() {
    check("rpn_reg", Upstream { rpn_reg: 1.0, ..Default::default() });
}

#[test]
fn roi_classification_gradient() {
    check("roi_cls", Upstream { roi_cls: 1.0, ..Default::default() });
}

#[test]
fn roi_regression_gradient() {
    check("roi_reg", Upstream { roi_reg: 1.0, ..Default::default() });
}

#[test]
fn auxiliary_paths_gradient() {
    let (det, params, image, targets) = setup();
    let pass = det.student_forward(&params, &image, &targets, 3).unwrap();
    let d = det.feature_dim();
    check(
        "auxiliary",
        Upstream {
            soft_logits: random_rows(pass.soft_logits.len(), 2, 1),
            image_feature: random_rows(1, d, 2).remove(0),
            target_regions: random_rows(targets.len(), d, 3),
            ..Default::default()
        },
    );
}

#[test]
fn soft_outputs_are_normalised() {
    let (det, params, image, targets) = setup();
    let out = det.train_step(&params, &image, &targets, 3).unwrap();
    for row in &out.soft_outputs {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert_eq!(row.len(), 2);
    }
    assert_eq!(out.features.regions.len(), targets.len());
    assert_eq!(out.features.image.len(), det.feature_dim());
}
