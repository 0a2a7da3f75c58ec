//! Project a dataset onto a shared label space with a built-in mapping.
//!
//!     cargo run --example remap_taxonomy

use dladapt::labelspace::{builtin_mapping, remap, BUILTIN_MAPPINGS};
use dladapt::synthdocs::{domain_presets, generate_dataset};

fn main() -> dladapt::Result<()> {
    for name in BUILTIN_MAPPINGS {
        let m = builtin_mapping(name)?;
        println!("{name}: {} -> {}", m.source.name, m.target.name);
        print!("{}", m.to_map_text());
    }
    let tmp = tempfile::tempdir().map_err(|e| dladapt::Error::io(std::env::temp_dir(), e))?;
    let (source, _) = domain_presets();
    let ds = generate_dataset(&source, 2, 0, tmp.path())?;
    let same = remap(&ds, &dladapt::labelspace::CategoryMapping::identity(&ds.taxonomy))?;
    println!("identity remap keeps {} of {} boxes", same.annotations.len(), ds.annotations.len());
    Ok(())
}
