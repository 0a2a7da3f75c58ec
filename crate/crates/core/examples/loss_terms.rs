//! Evaluate the distillation and regularisation terms and the adaptive
//! weight factor on a toy batch of region predictions.
//!
//!     cargo run --example loss_terms

use dladapt::losses::{
    contrastive_loss, entropy_loss, feature_distill, soft_kl_distill, total, weight_factor, LossParts, LossWeights,
};

fn main() -> dladapt::Result<()> {
    let w = LossWeights::default();
    let student = vec![vec![0.7, 0.1, 0.1, 0.1], vec![0.2, 0.5, 0.2, 0.1]];
    let pseudo = vec![vec![0.9, 0.05, 0.05, 0.0], vec![0.1, 0.8, 0.05, 0.05]];
    let teacher_regions = vec![vec![1.0, 0.0, 0.5], vec![0.0, 1.0, 0.2]];
    let student_regions = vec![vec![0.9, 0.1, 0.4], vec![0.1, 0.8, 0.3]];

    let parts = LossParts {
        rpn: 0.4,
        roi: 0.6,
        kl_distill: soft_kl_distill(&student, &pseudo)?,
        feature_distill: feature_distill(&[0.2, 0.4, 0.1], &[0.25, 0.3, 0.1])?,
        entropy: entropy_loss(&student)?,
        contrastive: contrastive_loss(&teacher_regions, &student_regions, w.temperature)?,
    };
    let factor = weight_factor(&student, pseudo.len(), &w);
    let b = total(&parts, factor, &w)?;
    println!("{parts:#?}");
    println!("factor {factor:.4}, total {:.4}", b.total);
    Ok(())
}
