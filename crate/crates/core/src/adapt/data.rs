//! In-memory views of a dataset at the detector's input resolution.
//!
//! [`UnlabeledImages`] carries pixels and ids only; it is the sole input the
//! adaptation loop receives, so target labels are out of its reach by type.

use crate::detector::{TargetBox, Tensor};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::labelspace::{Annotation, Dataset, Taxonomy};
use crate::raster::RgbPage;

fn load_pages(dataset: &Dataset, input_size: usize) -> Result<(Vec<RgbPage>, Vec<(f64, f64)>)> {
    let mut pages = Vec::with_capacity(dataset.images.len());
    let mut scales = Vec::with_capacity(dataset.images.len());
    for (i, rec) in dataset.images.iter().enumerate() {
        let page = RgbPage::load(&dataset.image_path(i))?;
        if (page.width, page.height) != (rec.width as usize, rec.height as usize) {
            return Err(Error::Ingestion(format!(
                "image {}: file is {}x{}, annotation file says {}x{}",
                rec.id, page.width, page.height, rec.width, rec.height
            )));
        }
        scales.push((
            input_size as f64 / page.width as f64,
            input_size as f64 / page.height as f64,
        ));
        pages.push(page.resized(input_size, input_size));
    }
    Ok((pages, scales))
}

/// Pixels of a dataset, resized to the detector's square input.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledImages {
    pub taxonomy: Taxonomy,
    pub ids: Vec<u64>,
    pages: Vec<RgbPage>,
}

impl UnlabeledImages {
    /// Reads only the image list of `dataset`; annotations are never touched.
    pub fn from_dataset(dataset: &Dataset, input_size: usize) -> Result<Self> {
        let (pages, _) = load_pages(dataset, input_size)?;
        Ok(UnlabeledImages {
            taxonomy: dataset.taxonomy.clone(),
            ids: dataset.images.iter().map(|r| r.id).collect(),
            pages,
        })
    }

    pub fn from_pages(taxonomy: Taxonomy, ids: Vec<u64>, pages: Vec<RgbPage>) -> Result<Self> {
        if ids.len() != pages.len() {
            return Err(Error::Contract("ids and pages differ in length".into()));
        }
        Ok(UnlabeledImages { taxonomy, ids, pages })
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn image(&self, index: usize) -> Tensor {
        self.pages[index].to_tensor()
    }
}

/// Pixels plus ground-truth boxes in input coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: UnlabeledImages,
    pub targets: Vec<Vec<TargetBox>>,
}

impl LabeledImages {
    pub fn from_dataset(dataset: &Dataset, input_size: usize) -> Result<Self> {
        let (pages, scales) = load_pages(dataset, input_size)?;
        let mut targets = Vec::with_capacity(pages.len());
        for (rec, (sx, sy)) in dataset.images.iter().zip(&scales) {
            let mut boxes = Vec::new();
            for a in dataset.annotations_for(rec.id) {
                let b = &a.bbox;
                let bbox = BBox::new(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy)?;
                boxes.push(TargetBox {
                    bbox,
                    category: a.category,
                });
            }
            targets.push(boxes);
        }
        Ok(LabeledImages {
            images: UnlabeledImages {
                taxonomy: dataset.taxonomy.clone(),
                ids: dataset.images.iter().map(|r| r.id).collect(),
                pages,
            },
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.images.taxonomy
    }

    /// Ground truth as evaluator annotations.
    pub fn annotations(&self) -> Vec<Annotation> {
        self.images
            .ids
            .iter()
            .zip(&self.targets)
            .flat_map(|(&id, ts)| {
                ts.iter().map(move |t| Annotation {
                    image_id: id,
                    bbox: t.bbox,
                    category: t.category,
                })
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImages {
        LabeledImages {
            images: UnlabeledImages {
                taxonomy: self.images.taxonomy.clone(),
                ids: indices.iter().map(|&i| self.images.ids[i]).collect(),
                pages: indices.iter().map(|&i| self.images.pages[i].clone()).collect(),
            },
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }
}
