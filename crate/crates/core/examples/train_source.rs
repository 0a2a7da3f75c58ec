//! Train a detector on synthetic source pages and score it on held-out
//! source pages and on the shifted target domain.
//!
//!     cargo run --release --example train_source -- [pages] [epochs] [seed]

use std::path::Path;

use dladapt::adapt::{train_source, Evaluator, LabeledImages, SourceConfig};
use dladapt::detector::Detector;
use dladapt::synthdocs::{domain_presets, generate_dataset};

fn labeled(spec: &dladapt::synthdocs::DomainSpec, n: usize, seed: u64, dir: &Path, size: usize) -> dladapt::Result<LabeledImages> {
    let ds = generate_dataset(spec, n, seed, dir)?;
    LabeledImages::from_dataset(&ds, size)
}

fn main() -> dladapt::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (pages, epochs, seed) = (arg(1, 200) as usize, arg(2, 8) as usize, arg(3, 0));

    let tmp = std::env::temp_dir().join(format!("dladapt_train_source_{}", std::process::id()));
    let (source, target) = domain_presets();
    let config = SourceConfig {
        epochs,
        seed,
        ..Default::default()
    };
    let size = config.detector.input_size;
    let train = labeled(&source, pages, 1_000, &tmp.join("train"), size)?;
    let held_out = labeled(&source, 50, 900_000, &tmp.join("held_out"), size)?;
    let target_eval = labeled(&target, 50, 800_000, &tmp.join("target"), size)?;

    let start = std::time::Instant::now();
    let (ckpt, _) = train_source(&train, &config, Some(&held_out))?;
    println!("trained {} pages x {} epochs in {:.1}s", pages, epochs, start.elapsed().as_secs_f64());

    let det = Detector::new(ckpt.detector.clone())?;
    let src = Evaluator::new(&held_out).evaluate(&det, &ckpt.params)?;
    let tgt = Evaluator::new(&target_eval).evaluate(&det, &ckpt.params)?;
    println!("source domain\n{}", src.table());
    println!("target domain\n{}", tgt.table());
    println!("gap: {:.2} points", 100.0 * (src.map50 - tgt.map50));
    std::fs::remove_dir_all(&tmp).ok();
    Ok(())
}
