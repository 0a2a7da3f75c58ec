//! Run the component ablation on a small budget and print the table.
//!
//!     cargo run --release --example ablation_grid -- [source_pages] [target_pages]

use dladapt::adapt::{ablate, render_table, table5_grid, train_source, AdaptConfig, Evaluator, LabeledImages, SourceConfig, UnlabeledImages};
use dladapt::synthdocs::{domain_presets, generate_dataset};

fn main() -> dladapt::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let (n_src, n_tgt) = (args.first().copied().unwrap_or(100), args.get(1).copied().unwrap_or(40));
    let tmp = tempfile::tempdir().map_err(|e| dladapt::Error::io(std::env::temp_dir(), e))?;
    let (source, target) = domain_presets();
    let cfg = SourceConfig::default();
    let size = cfg.detector.input_size;
    let train = LabeledImages::from_dataset(&generate_dataset(&source, n_src, 1_000, &tmp.path().join("s"))?, size)?;
    let (ckpt, _) = train_source(&train, &cfg, None)?;
    let t = generate_dataset(&target, n_tgt, 500_000, &tmp.path().join("t"))?;
    let unlabeled = UnlabeledImages::from_dataset(&t.without_annotations(), size)?;
    let held_out = LabeledImages::from_dataset(&generate_dataset(&target, 30, 800_000, &tmp.path().join("e"))?, size)?;
    let rows = ablate(&ckpt, &unlabeled, &AdaptConfig::default(), &table5_grid(), &[0], &Evaluator::new(&held_out))?;
    print!("{}", render_table(&rows));
    Ok(())
}
