//! Train on source pages, then adapt to unlabeled target pages and report
//! target mAP before and after.
//!
//!     cargo run --release --example adapt_target -- [target_pages] [seed] [key=value ...]

use dladapt::adapt::{adapt, apply_overrides, train_source, AdaptConfig, Evaluator, LabeledImages, SourceConfig, UnlabeledImages};
use dladapt::synthdocs::{domain_presets, generate_dataset};

fn main() -> dladapt::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n_target: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(100);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let overrides: Vec<String> = args.iter().skip(2).cloned().collect();

    let tmp = std::env::temp_dir().join(format!("dladapt_adapt_{}", std::process::id()));
    let (source, target) = domain_presets();
    let src_cfg = SourceConfig {
        seed,
        ..Default::default()
    };
    let size = src_cfg.detector.input_size;
    let train = LabeledImages::from_dataset(&generate_dataset(&source, 200, 1_000, &tmp.join("train"))?, size)?;
    let (ckpt, _) = train_source(&train, &src_cfg, None)?;

    // The adaptation loop gets pixels only; labels are kept for scoring.
    let target_ds = generate_dataset(&target, n_target, 500_000, &tmp.join("target"))?;
    let unlabeled = UnlabeledImages::from_dataset(&target_ds.without_annotations(), size)?;
    let held_out = LabeledImages::from_dataset(&generate_dataset(&target, 50, 800_000, &tmp.join("eval"))?, size)?;
    let evaluator = Evaluator::new(&held_out);

    let cfg = apply_overrides(&AdaptConfig { seed, ..Default::default() }, &overrides)?;
    let start = std::time::Instant::now();
    let (_, report) = adapt(&ckpt, &unlabeled, &cfg, Some(&evaluator))?;
    let before = report.initial_eval.as_ref().map(|e| e.map50).unwrap_or(f64::NAN);
    let after = report.final_map50().unwrap_or(f64::NAN);
    println!(
        "adapted on {n_target} pages in {:.1}s: target mAP@0.5 {:.2} -> {:.2} ({:+.2})",
        start.elapsed().as_secs_f64(),
        100.0 * before,
        100.0 * after,
        100.0 * (after - before)
    );
    std::fs::remove_dir_all(&tmp).ok();
    Ok(())
}
