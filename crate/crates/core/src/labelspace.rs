//! Category taxonomies, cross-dataset label unification and COCO ingestion.
//!
//! Category ids are always contiguous from 0 and, for anything loaded from a
//! file, assigned in name order so that the same class set yields the same
//! ids regardless of how the source file numbered them.
//!
//! Mapping files are flat text, one `source = target` or `source = DROP`
//! pair per line; `#` starts a comment. The target taxonomy is the sorted set
//! of non-DROP targets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub name: String,
    pub categories: Vec<String>,
}

impl Taxonomy {
    pub fn new(name: impl Into<String>, categories: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &categories {
            if c.is_empty() || !seen.insert(c.as_str()) {
                return Err(Error::Config(format!(
                    "taxonomy categories must be unique and non-empty, got {c:?}"
                )));
            }
        }
        Ok(Taxonomy {
            name: name.into(),
            categories,
        })
    }

    /// Taxonomy whose ids follow the sorted order of `names`.
    pub fn sorted<I, S>(name: impl Into<String>, names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut cats: Vec<String> = names.into_iter().map(Into::into).collect();
        cats.sort();
        Self::new(name, cats)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.categories.get(id).map(String::as_str)
    }

    /// Same category list (the taxonomy's display name is ignored).
    pub fn same_categories(&self, other: &Taxonomy) -> bool {
        self.categories == other.categories
    }

    /// The four classes shared by PubLayNet and DocLayNet; also the
    /// synthetic benchmark's label space.
    pub fn common4() -> Taxonomy {
        Self::sorted("common4", ["figure", "table", "text", "title"]).expect("static taxonomy")
    }

    pub fn common10() -> Taxonomy {
        Self::sorted(
            "common10",
            [
                "caption",
                "footnote",
                "formula",
                "page-footer",
                "page-header",
                "picture",
                "section-header",
                "table",
                "text",
                "title",
            ],
        )
        .expect("static taxonomy")
    }

    pub fn publaynet() -> Taxonomy {
        Self::sorted("publaynet", ["text", "title", "list", "table", "figure"])
            .expect("static taxonomy")
    }

    pub fn doclaynet() -> Taxonomy {
        Self::sorted(
            "doclaynet",
            [
                "Caption",
                "Footnote",
                "Formula",
                "List-item",
                "Page-footer",
                "Page-header",
                "Picture",
                "Section-header",
                "Table",
                "Text",
                "Title",
            ],
        )
        .expect("static taxonomy")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMapping {
    pub source: Taxonomy,
    pub target: Taxonomy,
    /// One entry per source category, in source id order; `None` = DROP.
    pub pairs: Vec<(String, Option<String>)>,
}

pub const BUILTIN_MAPPINGS: [&str; 4] = ["pln4", "dln4", "dln10", "m6doc10"];

impl CategoryMapping {
    pub fn identity(taxonomy: &Taxonomy) -> Self {
        CategoryMapping {
            source: taxonomy.clone(),
            target: taxonomy.clone(),
            pairs: taxonomy
                .categories
                .iter()
                .map(|c| (c.clone(), Some(c.clone())))
                .collect(),
        }
    }

    /// Parse the flat `source = target|DROP` format.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, Option<String>> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (src, dst) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "mapping {name}, line {}: expected `source = target|DROP`",
                    lineno + 1
                ))
            })?;
            let (src, dst) = (src.trim(), dst.trim());
            if src.is_empty() || dst.is_empty() {
                return Err(Error::Config(format!(
                    "mapping {name}, line {}: empty category name",
                    lineno + 1
                )));
            }
            let target = (dst != "DROP").then(|| dst.to_string());
            if pairs.insert(src.to_string(), target).is_some() {
                return Err(Error::Config(format!(
                    "mapping {name}: source category {src:?} listed twice"
                )));
            }
        }
        if pairs.is_empty() {
            return Err(Error::Config(format!("mapping {name} is empty")));
        }
        let source = Taxonomy::new(format!("{name}:source"), pairs.keys().cloned().collect())?;
        let targets: BTreeSet<&String> = pairs.values().flatten().collect();
        let target = Taxonomy::new(
            format!("{name}:target"),
            targets.into_iter().cloned().collect(),
        )?;
        Ok(CategoryMapping {
            source,
            target,
            pairs: pairs.into_iter().collect(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "mapping".into());
        Self::parse(&name, &text)
    }

    pub fn to_map_text(&self) -> String {
        let mut out = String::new();
        for (src, dst) in &self.pairs {
            out.push_str(src);
            out.push_str(" = ");
            out.push_str(dst.as_deref().unwrap_or("DROP"));
            out.push('\n');
        }
        out
    }

    /// `source id -> Some(target id)` or `None` for dropped categories.
    pub fn id_table(&self) -> Vec<Option<usize>> {
        self.source
            .categories
            .iter()
            .map(|src| {
                self.pairs
                    .iter()
                    .find(|(s, _)| s == src)
                    .and_then(|(_, dst)| dst.as_deref())
                    .and_then(|dst| self.target.id_of(dst))
            })
            .collect()
    }
}

/// Look up one of the shipped unification mappings.
pub fn builtin_mapping(name: &str) -> Result<CategoryMapping> {
    let text = match name {
        "pln4" => include_str!("../mappings/pln4.map"),
        "dln4" => include_str!("../mappings/dln4.map"),
        "dln10" => include_str!("../mappings/dln10.map"),
        "m6doc10" => include_str!("../mappings/m6doc10.map"),
        other => {
            return Err(Error::Config(format!(
                "unknown mapping {other:?}; valid options: {}",
                BUILTIN_MAPPINGS.join(", ")
            )))
        }
    };
    CategoryMapping::parse(name, text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u64,
    pub bbox: BBox,
    pub category: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Directory that image `file_name`s are relative to.
    pub base_dir: PathBuf,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub taxonomy: Taxonomy,
}

impl Dataset {
    pub fn image_path(&self, index: usize) -> PathBuf {
        self.base_dir.join(&self.images[index].file_name)
    }

    pub fn annotations_for(&self, image_id: u64) -> impl Iterator<Item = &Annotation> {
        self.annotations
            .iter()
            .filter(move |a| a.image_id == image_id)
    }

    /// Annotations grouped by image id, in image order.
    pub fn grouped_annotations(&self) -> Vec<Vec<Annotation>> {
        let mut by_id: HashMap<u64, Vec<Annotation>> = HashMap::new();
        for a in &self.annotations {
            by_id.entry(a.image_id).or_default().push(a.clone());
        }
        self.images
            .iter()
            .map(|im| by_id.remove(&im.id).unwrap_or_default())
            .collect()
    }

    /// The same images with every annotation removed.
    pub fn without_annotations(&self) -> Dataset {
        Dataset {
            annotations: Vec::new(),
            ..self.clone()
        }
    }

    /// Keep the images at `indices` (and their annotations).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let images: Vec<ImageRecord> = indices.iter().map(|&i| self.images[i].clone()).collect();
        let ids: BTreeSet<u64> = images.iter().map(|im| im.id).collect();
        Dataset {
            base_dir: self.base_dir.clone(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| ids.contains(&a.image_id))
                .cloned()
                .collect(),
            images,
            taxonomy: self.taxonomy.clone(),
        }
    }

    pub fn category_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.taxonomy.len()];
        for a in &self.annotations {
            h[a.category] += 1;
        }
        h
    }
}

#[derive(Deserialize, Serialize)]
struct CocoFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    info: Option<CocoInfo>,
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Only the taxonomy name is read back; other `info` keys are ignored.
#[derive(Deserialize, Serialize)]
struct CocoInfo {
    #[serde(default)]
    taxonomy: Option<String>,
}

#[derive(Deserialize, Serialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize, Serialize)]
struct CocoAnnotation {
    id: Option<u64>,
    image_id: u64,
    category_id: u64,
    bbox: Vec<f64>,
}

#[derive(Deserialize, Serialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Read a COCO-style annotation file (images, annotations with `[x, y, w, h]`
/// boxes, categories). Boxes are clipped to their image.
pub fn load_coco(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let coco: CocoFile = serde_json::from_str(&text)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    from_coco(coco, base_dir)
}

fn from_coco(coco: CocoFile, base_dir: PathBuf) -> Result<Dataset> {
    let name = coco
        .info
        .as_ref()
        .and_then(|i| i.taxonomy.clone())
        .unwrap_or_else(|| "coco".to_string());
    let taxonomy = Taxonomy::sorted(name, coco.categories.iter().map(|c| c.name.clone()))
        .map_err(|e| Error::Ingestion(format!("categories block: {e}")))?;
    let mut cat_ids = HashMap::new();
    for c in &coco.categories {
        if cat_ids
            .insert(c.id, taxonomy.id_of(&c.name).expect("present"))
            .is_some()
        {
            return Err(Error::Ingestion(format!("duplicate category id {}", c.id)));
        }
    }
    let mut sizes = HashMap::new();
    for im in &coco.images {
        if sizes.insert(im.id, (im.width, im.height)).is_some() {
            return Err(Error::Ingestion(format!("duplicate image id {}", im.id)));
        }
    }
    let mut annotations = Vec::with_capacity(coco.annotations.len());
    for (idx, a) in coco.annotations.iter().enumerate() {
        let rid = a
            .id
            .map(|i| format!("annotation id {i}"))
            .unwrap_or_else(|| format!("annotation #{idx}"));
        let &(w, h) = sizes
            .get(&a.image_id)
            .ok_or_else(|| Error::Ingestion(format!("{rid}: unknown image id {}", a.image_id)))?;
        let category = *cat_ids.get(&a.category_id).ok_or_else(|| {
            Error::Ingestion(format!("{rid}: unknown category id {}", a.category_id))
        })?;
        if a.bbox.len() != 4 || a.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::Ingestion(format!("{rid}: malformed bbox {:?}", a.bbox)));
        }
        let [x, y, bw, bh] = [a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]];
        if bw < 0.0 || bh < 0.0 {
            return Err(Error::Ingestion(format!(
                "{rid}: negative bbox extent {:?}",
                a.bbox
            )));
        }
        let bbox = BBox::from_xywh(x, y, bw, bh)
            .map_err(|e| Error::Ingestion(format!("{rid}: {e}")))?
            .clip(w as f64, h as f64);
        annotations.push(Annotation {
            image_id: a.image_id,
            bbox,
            category,
        });
    }
    Ok(Dataset {
        base_dir,
        images: coco
            .images
            .into_iter()
            .map(|im| ImageRecord {
                id: im.id,
                file_name: im.file_name,
                width: im.width,
                height: im.height,
            })
            .collect(),
        annotations,
        taxonomy,
    })
}

/// Write the COCO subset understood by [`load_coco`]. Category ids are
/// written 1-based in taxonomy order.
pub fn write_coco(dataset: &Dataset, path: &Path) -> Result<()> {
    let coco = CocoFile {
        info: Some(CocoInfo {
            taxonomy: Some(dataset.taxonomy.name.clone()),
        }),
        images: dataset
            .images
            .iter()
            .map(|im| CocoImage {
                id: im.id,
                file_name: im.file_name.clone(),
                width: im.width,
                height: im.height,
            })
            .collect(),
        annotations: dataset
            .annotations
            .iter()
            .enumerate()
            .map(|(i, a)| CocoAnnotation {
                id: Some(i as u64 + 1),
                image_id: a.image_id,
                category_id: a.category as u64 + 1,
                bbox: a.bbox.to_xywh().to_vec(),
            })
            .collect(),
        categories: dataset
            .taxonomy
            .categories
            .iter()
            .enumerate()
            .map(|(i, name)| CocoCategory {
                id: i as u64 + 1,
                name: name.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&coco)
        .map_err(|e| Error::Ingestion(format!("serializing {}: {e}", path.display())))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Translate a dataset into the mapping's target label space.
pub fn remap(dataset: &Dataset, mapping: &CategoryMapping) -> Result<Dataset> {
    if !dataset.taxonomy.same_categories(&mapping.source) {
        return Err(Error::Config(format!(
            "dataset taxonomy {:?} does not match mapping source {:?}",
            dataset.taxonomy.categories, mapping.source.categories
        )));
    }
    let table = mapping.id_table();
    Ok(Dataset {
        base_dir: dataset.base_dir.clone(),
        images: dataset.images.clone(),
        annotations: dataset
            .annotations
            .iter()
            .filter_map(|a| {
                table[a.category].map(|category| Annotation {
                    category,
                    ..a.clone()
                })
            })
            .collect(),
        taxonomy: mapping.target.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dataset(tax: Taxonomy, anns: Vec<(u64, [f64; 4], usize)>) -> Dataset {
        Dataset {
            base_dir: PathBuf::new(),
            images: vec![
                ImageRecord {
                    id: 1,
                    file_name: "a.png".into(),
                    width: 100,
                    height: 100,
                },
                ImageRecord {
                    id: 2,
                    file_name: "b.png".into(),
                    width: 100,
                    height: 100,
                },
            ],
            annotations: anns
                .into_iter()
                .map(|(image_id, b, category)| Annotation {
                    image_id,
                    bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
                    category,
                })
                .collect(),
            taxonomy: tax,
        }
    }

    #[test]
    fn pln4_drops_list_only() {
        let m = builtin_mapping("pln4").unwrap();
        assert!(m.source.same_categories(&Taxonomy::publaynet()));
        assert!(m.target.same_categories(&Taxonomy::common4()));
        let dropped: Vec<&str> = m
            .pairs
            .iter()
            .filter(|(_, d)| d.is_none())
            .map(|(s, _)| s.as_str())
            .collect();
        assert_eq!(dropped, vec!["list"]);
    }

    #[test]
    fn dln10_targets_are_the_ten_shared_classes() {
        let m = builtin_mapping("dln10").unwrap();
        assert_eq!(
            m.target.categories,
            vec![
                "caption",
                "footnote",
                "formula",
                "page-footer",
                "page-header",
                "picture",
                "section-header",
                "table",
                "text",
                "title"
            ]
        );
        assert!(m.source.same_categories(&Taxonomy::doclaynet()));
        assert!(builtin_mapping("dln4")
            .unwrap()
            .target
            .same_categories(&Taxonomy::common4()));
        assert!(builtin_mapping("m6doc10")
            .unwrap()
            .target
            .same_categories(&Taxonomy::common10()));
    }

    #[test]
    fn unknown_mapping_names_options() {
        let err = builtin_mapping("pln5").unwrap_err().to_string();
        for name in BUILTIN_MAPPINGS {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn map_text_round_trips() {
        let m = builtin_mapping("m6doc10").unwrap();
        assert_eq!(CategoryMapping::parse("m6doc10", &m.to_map_text()).unwrap(), m);
        assert!(CategoryMapping::parse("x", "a = b\na = c").is_err());
        assert!(CategoryMapping::parse("x", "a b").is_err());
    }

    #[test]
    fn remap_removes_list_annotations() {
        let tax = Taxonomy::publaynet();
        let list = tax.id_of("list").unwrap();
        let text = tax.id_of("text").unwrap();
        let d = dataset(
            tax,
            vec![
                (1, [0.0, 0.0, 10.0, 10.0], list),
                (1, [20.0, 0.0, 30.0, 10.0], text),
            ],
        );
        let out = remap(&d, &builtin_mapping("pln4").unwrap()).unwrap();
        assert_eq!(out.annotations.len(), 1);
        assert_eq!(out.taxonomy.name_of(out.annotations[0].category), Some("text"));
        assert_eq!(out.images, d.images);
    }

    #[test]
    fn remap_full_drop_and_mismatch() {
        let tax = Taxonomy::sorted("t", ["junk"]).unwrap();
        let d = dataset(tax, vec![(1, [0.0, 0.0, 5.0, 5.0], 0)]);
        let m = CategoryMapping::parse("m", "junk = DROP\nkeep = keep").unwrap();
        assert!(remap(&d, &m).is_err());
        let m = CategoryMapping::parse("m", "junk = DROP").unwrap();
        let out = remap(&d, &m).unwrap();
        assert!(out.annotations.is_empty());
        assert_eq!(out.images.len(), 2);
    }

    #[test]
    fn coco_bbox_conversion_and_empty_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.json");
        fs::write(
            &path,
            r#"{"images":[{"id":7,"file_name":"p.png","width":100,"height":100}],
                "annotations":[{"id":1,"image_id":7,"category_id":3,"bbox":[10,20,30,40]}],
                "categories":[{"id":3,"name":"text"},{"id":1,"name":"figure"}]}"#,
        )
        .unwrap();
        let d = load_coco(&path).unwrap();
        assert_eq!(d.taxonomy.categories, vec!["figure", "text"]);
        assert_eq!(d.annotations[0].bbox, BBox::new(10.0, 20.0, 40.0, 60.0).unwrap());
        assert_eq!(d.annotations[0].category, 1);

        fs::write(
            &path,
            r#"{"images":[{"id":7,"file_name":"p.png","width":100,"height":100}],
                "annotations":[], "categories":[{"id":1,"name":"figure"}]}"#,
        )
        .unwrap();
        let d = load_coco(&path).unwrap();
        assert_eq!(d.images.len(), 1);
        assert!(d.annotations.is_empty());
    }

    #[test]
    fn coco_errors_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.json");
        fs::write(
            &path,
            r#"{"images":[{"id":7,"file_name":"p.png","width":100,"height":100}],
                "annotations":[{"id":42,"image_id":7,"category_id":1,"bbox":[10,20,30]}],
                "categories":[{"id":1,"name":"figure"}]}"#,
        )
        .unwrap();
        let err = load_coco(&path).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)));
        assert!(err.to_string().contains("42"), "{err}");

        fs::write(&path, r#"{"images":[]}"#).unwrap();
        assert!(matches!(load_coco(&path), Err(Error::Ingestion(_))));
        assert!(matches!(
            load_coco(&dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        prop::collection::vec(
            (1u64..3, 0u32..60, 0u32..60, 0u32..40, 0u32..40, 0usize..4),
            0..12,
        )
        .prop_map(|v| {
            dataset(
                Taxonomy::common4(),
                v.into_iter()
                    .map(|(im, x, y, w, h, c)| {
                        let (x, y) = (x as f64, y as f64);
                        (im, [x, y, x + w as f64, y + h as f64], c)
                    })
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn identity_remap_is_noop_and_idempotent(d in arb_dataset()) {
            let id = CategoryMapping::identity(&d.taxonomy);
            let once = remap(&d, &id).unwrap();
            prop_assert_eq!(&once, &d);
            prop_assert_eq!(remap(&once, &id).unwrap(), once);
        }

        #[test]
        fn remap_never_adds_annotations(d in arb_dataset(), drop_mask in prop::collection::vec(any::<bool>(), 4)) {
            let text: String = d.taxonomy.categories.iter().zip(&drop_mask)
                .map(|(c, drop)| format!("{c} = {}\n", if *drop { "DROP" } else { c }))
                .collect();
            prop_assume!(drop_mask.iter().any(|d| !d));
            let m = CategoryMapping::parse("m", &text).unwrap();
            let out = remap(&d, &m).unwrap();
            prop_assert!(out.annotations.len() <= d.annotations.len());
            prop_assert_eq!(out.images.len(), d.images.len());
        }

        #[test]
        fn coco_write_load_fixed_point(d in arb_dataset()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("a.json");
            write_coco(&d, &path).unwrap();
            let loaded = load_coco(&path).unwrap();
            let expected = Dataset { base_dir: dir.path().to_path_buf(), taxonomy: loaded.taxonomy.clone(), ..d.clone() };
            prop_assert_eq!(&loaded, &expected);
            write_coco(&loaded, &path).unwrap();
            prop_assert_eq!(load_coco(&path).unwrap(), loaded);
        }
    }
}
