//! Render a few pages from each domain preset and print their annotations.
//!
//!     cargo run --example synth_pages -- /tmp/pages

use std::path::PathBuf;

use dladapt::synthdocs::{domain_presets, generate_dataset};

fn main() -> dladapt::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_pages".into()));
    let (source, target) = domain_presets();
    for spec in [source, target] {
        let ds = generate_dataset(&spec, 3, 100, &out.join(&spec.name))?;
        let hist = ds.category_histogram();
        println!("{}: {} pages in {}", spec.name, ds.images.len(), out.join(&spec.name).display());
        for (name, n) in ds.taxonomy.categories.iter().zip(hist) {
            println!("  {name:<8} {n}");
        }
    }
    Ok(())
}
