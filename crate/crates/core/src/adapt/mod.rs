//! Source training and the dual-teacher adaptation loop.

mod ablate;
mod config;
mod data;
mod report;

pub use ablate::{ablate, dedup_grid, render_csv, render_table, table5_grid, AblationResult, AblationRow};
pub use config::{
    apply_overrides, config_hash, config_keys, load_config, parse_config, to_toml, AdaptConfig,
    ResultModel, SelectionMode, SourceConfig,
};
pub use data::{LabeledImages, UnlabeledImages};
pub use report::{EpochRecord, PseudoStats, RunReport};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::make_views;
use crate::consensus::{fuse, hard_select, PseudoLabelSet, Provenance};
use crate::detector::{Checkpoint, Detector, DetectorConfig, ModelParameters, Optimizer, Upstream};
use crate::ema::DualTeacherState;
use crate::error::{Error, Result};
use crate::eval::{map50, EvalResult};
use crate::geometry::{BBox, DetectionSet};
use crate::labelspace::Annotation;
use crate::losses::{
    contrastive_grad, entropy_logits, feature_distill_grad, soft_kl_distill_logits, total,
    weight_factor, LossBreakdown, LossParts,
};
use report::LossMeans;

/// Derive an independent stream seed from a base seed and a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Scores a model on a labeled split. The labels stay inside the evaluator.
pub struct Evaluator<'a> {
    data: &'a LabeledImages,
    gts: Vec<Annotation>,
}

impl<'a> Evaluator<'a> {
    pub fn new(data: &'a LabeledImages) -> Self {
        Evaluator {
            gts: data.annotations(),
            data,
        }
    }

    pub fn predictions(&self, det: &Detector, params: &ModelParameters) -> Result<Vec<DetectionSet>> {
        (0..self.data.len())
            .map(|i| {
                let maps = det.backbone(params, &self.data.images.image(i))?;
                Ok(det.detect(params, &maps, self.data.images.ids[i]).detections)
            })
            .collect()
    }

    pub fn evaluate(&self, det: &Detector, params: &ModelParameters) -> Result<EvalResult> {
        map50(&self.predictions(det, params)?, &self.gts, self.data.taxonomy())
    }
}

fn detector_for(cfg: &DetectorConfig, num_classes: usize) -> Result<Detector> {
    Detector::new(DetectorConfig {
        num_classes,
        ..cfg.clone()
    })
}

/// Supervised training on ground truth (region-proposal + region losses).
pub fn train_source(
    data: &LabeledImages,
    config: &SourceConfig,
    holdout: Option<&LabeledImages>,
) -> Result<(Checkpoint, RunReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("source dataset is empty".into()));
    }
    let det = detector_for(&config.detector, data.taxonomy().len())?;
    let hash = config_hash(config);
    let mut params = det.init_params(config.seed);
    let mut opt = Optimizer::new(config.optimizer.clone(), &params);
    let evaluator = holdout.map(Evaluator::new);
    let n = data.len();
    let total_steps = (config.epochs * n) as f64;
    let mut report = RunReport {
        kind: "train-source".into(),
        config_hash: hash.clone(),
        initial_eval: None,
        epochs: Vec::new(),
        final_checkpoint: None,
    };
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1, epoch as u64])));
        let mut means = LossMeans::default();
        let lr = config.optimizer.rate_at(step as f64 / total_steps);
        for &i in &order {
            let lr = config.optimizer.rate_at(step as f64 / total_steps);
            let seed = derive_seed(config.seed, &[2, epoch as u64, i as u64]);
            let out = det.train_step(&params, &data.images.image(i), &data.targets[i], seed)?;
            let l = out.losses;
            if !l.total().is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite detection loss on image {} (epoch {})",
                    data.images.ids[i],
                    epoch + 1
                )));
            }
            means.add(&[
                ("rpn_cls", l.rpn_cls),
                ("rpn_reg", l.rpn_reg),
                ("roi_cls", l.roi_cls),
                ("roi_reg", l.roi_reg),
                ("total", l.total()),
            ]);
            opt.step(&mut params, &out.gradients, lr);
            step += 1;
        }
        params.check_finite()?;
        let eval = evaluator.as_ref().map(|e| e.evaluate(&det, &params)).transpose()?;
        if let Some(e) = &eval {
            log::info!("source epoch {}: held-out mAP@0.5 {:.4}", epoch + 1, e.map50);
        }
        report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            losses: means.means(),
            pseudo: None,
            eval,
        });
    }
    let ckpt = Checkpoint {
        params,
        detector: det.config().clone(),
        taxonomy: data.taxonomy().clone(),
        iteration: step,
        epoch: config.epochs as u64,
        momenta: None,
        config_hash: hash,
    };
    Ok((ckpt, report))
}

/// Everything one adaptation iteration produced, for bookkeeping.
struct StepRecord {
    losses: LossBreakdown,
    pseudo: PseudoLabelSet,
}

fn nonzero_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<usize> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    (0..a.len())
        .filter(|&i| norm(&a[i]) > 1e-24 && norm(&b[i]) > 1e-24)
        .collect()
}

struct Adapter<'a> {
    det: Detector,
    config: &'a AdaptConfig,
    state: DualTeacherState,
    opt: Optimizer,
}

impl Adapter<'_> {
    fn step(&mut self, image_id: u64, image: &crate::detector::Tensor, seed: u64, lr: f64) -> Result<StepRecord> {
        let cfg = self.config;
        let det = &self.det;
        let views = make_views(image, derive_seed(seed, &[0]), &cfg.augment);

        // Teachers see the weak view.
        let stat_maps = det.backbone(&self.state.static_params, &views.weak)?;
        let r_stat = det.detect(&self.state.static_params, &stat_maps, image_id);
        drop(stat_maps);
        let dyn_maps = det.backbone(&self.state.dynamic_params, &views.weak)?;
        let r_dyn = det.detect(&self.state.dynamic_params, &dyn_maps, image_id);

        let pseudo = match cfg.selection_mode {
            SelectionMode::Consensus => fuse(&r_stat.detections, &r_dyn.detections, &cfg.consensus),
            SelectionMode::Hard => hard_select(&r_dyn.detections, cfg.hard_threshold, cfg.consensus.nms_iou),
        };
        let targets = pseudo.targets();
        let boxes: Vec<BBox> = targets.iter().map(|t| t.bbox).collect();
        let teacher_regions = if cfg.use_auxiliary {
            det.region_features(&self.state.dynamic_params, &dyn_maps, &boxes)
        } else {
            Vec::new()
        };
        drop(dyn_maps);

        // Student sees the strong view.
        let student = &self.state.student_params;
        let pass = det.student_forward(student, &views.strong, &targets, derive_seed(seed, &[1]))?;
        let w = &cfg.weights;
        let dyn_soft: Vec<Vec<f64>> = r_dyn.detections.detections.iter().map(|d| d.soft_label.clone()).collect();
        let factor = weight_factor(&dyn_soft, pseudo.len(), w);

        let k = det.num_classes();
        let mut soft_grad = vec![vec![0.0; k]; pass.soft_logits.len()];
        let mut parts = LossParts {
            rpn: pass.losses.rpn(),
            roi: pass.losses.roi(),
            ..Default::default()
        };
        if cfg.use_kl {
            let pseudo_soft: Vec<Vec<f64>> = pass
                .soft_target_index
                .iter()
                .map(|&ti| pseudo.detections.detections[ti].soft_label.clone())
                .collect();
            let (v, g) = soft_kl_distill_logits(&pass.soft_logits, &pseudo_soft, w.kl_direction)?;
            parts.kl_distill = v;
            for (row, gr) in soft_grad.iter_mut().zip(g) {
                row.iter_mut().zip(gr).for_each(|(a, b)| *a += factor * w.kl_distill * b);
            }
        }
        let mut image_grad = Vec::new();
        let mut region_grad = Vec::new();
        if cfg.use_auxiliary {
            let (v, g) = feature_distill_grad(&r_dyn.features.image, &pass.image_feature)?;
            parts.feature_distill = v;
            image_grad = g.into_iter().map(|x| factor * w.feature_distill * x).collect();

            let (v, g) = entropy_logits(&pass.soft_logits);
            parts.entropy = v;
            for (row, gr) in soft_grad.iter_mut().zip(g) {
                row.iter_mut().zip(gr).for_each(|(a, b)| *a += factor * w.entropy * b);
            }

            // Regions whose (post-ReLU) feature vanished in either model
            // have no direction and are left out of the contrastive term.
            let keep = nonzero_rows(&teacher_regions, &pass.target_regions);
            let t: Vec<Vec<f64>> = keep.iter().map(|&i| teacher_regions[i].clone()).collect();
            let s: Vec<Vec<f64>> = keep.iter().map(|&i| pass.target_regions[i].clone()).collect();
            let (v, g) = contrastive_grad(&t, &s, w.temperature)?;
            parts.contrastive = v;
            region_grad = vec![vec![0.0; det.feature_dim()]; pass.target_regions.len()];
            for (&i, gr) in keep.iter().zip(g) {
                region_grad[i] = gr.into_iter().map(|x| factor * w.contrastive * x).collect();
            }
        }
        let losses = total(&parts, factor, w)
            .map_err(|e| Error::Numeric(format!("image {image_id}: {e}")))?;

        let up = Upstream {
            rpn_cls: factor * w.rpn,
            rpn_reg: factor * w.rpn,
            roi_cls: factor * w.roi,
            roi_reg: factor * w.roi,
            soft_logits: soft_grad,
            image_feature: image_grad,
            target_regions: region_grad,
        };
        let grads = det.student_backward(student, &pass, &up)?;
        self.opt.step(&mut self.state.student_params, &grads, lr);
        if self.state.student_params.check_finite().is_err() {
            return Err(Error::Numeric(format!("student parameters diverged on image {image_id}")));
        }
        Ok(StepRecord { losses, pseudo })
    }

    fn result_params(&self) -> &ModelParameters {
        match self.config.result_model {
            ResultModel::Student => &self.state.student_params,
            ResultModel::DynamicTeacher => &self.state.dynamic_params,
            ResultModel::StaticTeacher => &self.state.static_params,
        }
    }
}

/// Adapt `source` to the unlabeled `target` images.
///
/// The loop sees pixels only. `evaluator`, when given, scores the result
/// model after evaluated epochs; its labels never reach the loop.
pub fn adapt(
    source: &Checkpoint,
    target: &UnlabeledImages,
    config: &AdaptConfig,
    evaluator: Option<&Evaluator>,
) -> Result<(Checkpoint, RunReport)> {
    config.validate()?;
    if !source.taxonomy.same_categories(&target.taxonomy) {
        return Err(Error::Config(format!(
            "checkpoint categories {:?} do not match target categories {:?}",
            source.taxonomy.categories, target.taxonomy.categories
        )));
    }
    if target.is_empty() {
        return Err(Error::Config("target image set is empty".into()));
    }
    let det = Detector::new(source.detector.clone())?;
    det.check_params(&source.params)?;
    let hash = config_hash(config);
    let n = target.len();
    let n_update = config.schedule.update_interval(n);
    let total_steps = (config.epochs * n) as f64;
    let mut adapter = Adapter {
        config,
        state: DualTeacherState::new(&source.params),
        opt: Optimizer::new(config.optimizer.clone(), &source.params),
        det,
    };
    let mut report = RunReport {
        kind: "adapt".into(),
        config_hash: hash.clone(),
        initial_eval: evaluator.map(|e| e.evaluate(&adapter.det, &source.params)).transpose()?,
        epochs: Vec::new(),
        final_checkpoint: None,
    };
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[3, epoch as u64])));
        let mut means = LossMeans::default();
        let mut stats = PseudoStats::default();
        let lr = config.optimizer.rate_at(epoch as f64 / config.epochs as f64);
        for (pos, &i) in order.iter().enumerate() {
            let step = (epoch * n + pos) as f64;
            let lr = config.optimizer.rate_at(step / total_steps);
            let seed = derive_seed(config.seed, &[4, epoch as u64, i as u64]);
            let rec = adapter.step(target.ids[i], &target.image(i), seed, lr)?;
            let b = rec.losses;
            means.add(&[
                ("rpn", b.rpn),
                ("roi", b.roi),
                ("kl_distill", b.kl_distill),
                ("feature_distill", b.feature_distill),
                ("entropy", b.entropy),
                ("contrastive", b.contrastive),
                ("factor", b.factor),
                ("total", b.total),
            ]);
            stats.images += 1;
            stats.labels += rec.pseudo.len();
            stats.consensus += rec.pseudo.count(Provenance::Consensus);
            stats.score_sum += rec.pseudo.detections.detections.iter().map(|d| d.score).sum::<f64>();
            stats.empty_images += rec.pseudo.is_empty() as usize;
            adapter.state.tick(&config.schedule, n_update, pos + 1 == n)?;
        }
        let last = epoch + 1 == config.epochs;
        let due = config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || last);
        let eval = match evaluator {
            Some(e) if due => Some(e.evaluate(&adapter.det, adapter.result_params())?),
            _ => None,
        };
        log::info!(
            "adapt epoch {}: loss {:.4}, {:.2} pseudo labels/image ({:.0}% consensus){}",
            epoch + 1,
            means.means().get("total").copied().unwrap_or(0.0),
            stats.per_image(),
            100.0 * stats.consensus_fraction(),
            eval.as_ref().map(|e| format!(", mAP@0.5 {:.4}", e.map50)).unwrap_or_default()
        );
        report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            losses: means.means(),
            pseudo: Some(stats),
            eval,
        });
    }
    let ckpt = Checkpoint {
        params: adapter.result_params().clone(),
        detector: adapter.det.config().clone(),
        taxonomy: source.taxonomy.clone(),
        iteration: adapter.state.iteration,
        epoch: adapter.state.epoch,
        momenta: Some((config.schedule.pi_dynamic, config.schedule.pi_static)),
        config_hash: hash,
    };
    Ok((ckpt, report))
}
