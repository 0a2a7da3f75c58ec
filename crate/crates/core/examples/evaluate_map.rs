//! Score hand-written predictions against ground truth and print the
//! per-category AP table.
//!
//!     cargo run --example evaluate_map

use dladapt::eval::map50;
use dladapt::geometry::{BBox, Detection, DetectionSet};
use dladapt::labelspace::{Annotation, Taxonomy};

fn main() -> dladapt::Result<()> {
    let tax = Taxonomy::common4();
    let b = |x0, y0, x1, y1| BBox::new(x0, y0, x1, y1).unwrap();
    let gts = vec![
        Annotation { image_id: 1, bbox: b(0.0, 0.0, 100.0, 20.0), category: 3 },
        Annotation { image_id: 1, bbox: b(0.0, 30.0, 100.0, 200.0), category: 2 },
        Annotation { image_id: 2, bbox: b(10.0, 10.0, 90.0, 90.0), category: 0 },
        Annotation { image_id: 2, bbox: b(10.0, 100.0, 90.0, 160.0), category: 1 },
    ];
    let preds = vec![
        DetectionSet::new(1, vec![
            Detection::one_hot(b(2.0, 0.0, 98.0, 22.0), 3, 0.9, tax.len()),
            Detection::one_hot(b(0.0, 35.0, 100.0, 190.0), 2, 0.8, tax.len()),
            Detection::one_hot(b(0.0, 120.0, 50.0, 200.0), 2, 0.3, tax.len()),
        ]),
        DetectionSet::new(2, vec![
            Detection::one_hot(b(12.0, 8.0, 92.0, 88.0), 1, 0.7, tax.len()),
            Detection::one_hot(b(10.0, 100.0, 90.0, 160.0), 1, 0.6, tax.len()),
        ]),
    ];
    let r = map50(&preds, &gts, &tax)?;
    println!("{}", r.table());
    Ok(())
}
