//! Behavioural contracts of the detector: untrained outputs, determinism,
//! degenerate supervision and the ability to fit a single page.

use dladapt::detector::{Checkpoint, Detector, DetectorConfig, Optimizer, OptimizerConfig, OptimizerKind, TargetBox};
use dladapt::labelspace::Taxonomy;
use dladapt::raster::GrayPage;
use dladapt::synthdocs::{domain_presets, generate_page};

fn page_targets(seed: u64) -> (dladapt::detector::Tensor, Vec<TargetBox>) {
    let (source, _) = domain_presets();
    let page = generate_page(&source, seed).unwrap();
    let targets = page.annotations.iter().map(|(b, c)| TargetBox { bbox: *b, category: *c }).collect();
    (page.image.to_tensor(), targets)
}

#[test]
fn untrained_model_is_unconfident_on_blank_page() {
    let det = Detector::new(DetectorConfig::default()).unwrap();
    let params = det.init_params(0);
    let size = det.config().input_size;
    let out = det.infer(&params, &GrayPage::filled(size, size, 255).to_tensor()).unwrap();
    assert!(out.detections.detections.iter().all(|d| d.score < 0.9));
}

#[test]
fn inference_and_training_are_deterministic() {
    let det = Detector::new(DetectorConfig::default()).unwrap();
    let params = det.init_params(4);
    let (image, targets) = page_targets(3);
    assert_eq!(det.infer(&params, &image).unwrap().detections, det.infer(&params, &image).unwrap().detections);
    let a = det.train_step(&params, &image, &targets, 9).unwrap();
    let b = det.train_step(&params, &image, &targets, 9).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.gradients, b.gradients);
}

#[test]
fn empty_targets_give_finite_losses() {
    let det = Detector::new(DetectorConfig::default()).unwrap();
    let params = det.init_params(1);
    let (image, _) = page_targets(5);
    let out = det.train_step(&params, &image, &[], 0).unwrap();
    assert!(out.losses.total().is_finite());
    assert!(out.gradients.check_finite().is_ok());
    assert!(out.soft_outputs.is_empty());
}

#[test]
fn out_of_range_targets_are_rejected() {
    let det = Detector::new(DetectorConfig::micro()).unwrap();
    let params = det.init_params(1);
    let image = GrayPage::filled(8, 8, 0).to_tensor();
    let bad = TargetBox { bbox: dladapt::geometry::BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(), category: 7 };
    assert!(det.train_step(&params, &image, &[bad], 0).is_err());
}

#[test]
fn fits_one_page() {
    let det = Detector::new(DetectorConfig::default()).unwrap();
    let mut params = det.init_params(2);
    let (image, targets) = page_targets(11);
    let cfg = OptimizerConfig { kind: OptimizerKind::Adam, learning_rate: 2e-3, ..Default::default() };
    let mut opt = Optimizer::new(cfg.clone(), &params);
    let probe = |p: &_| det.train_step(p, &image, &targets, 1234).unwrap().losses.total();
    let before = probe(&params);
    for step in 0..60 {
        let out = det.train_step(&params, &image, &targets, step).unwrap();
        opt.step(&mut params, &out.gradients, cfg.learning_rate);
    }
    assert!(probe(&params) < 0.7 * before);
}

#[test]
fn checkpoint_round_trip() {
    let det = Detector::new(DetectorConfig::micro()).unwrap();
    let ckpt = Checkpoint {
        params: det.init_params(8),
        detector: DetectorConfig::micro(),
        taxonomy: Taxonomy::new("m", vec!["a".into(), "b".into()]).unwrap(),
        iteration: 3,
        epoch: 1,
        momenta: Some((0.99, 0.6)),
        config_hash: "abc".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
}
