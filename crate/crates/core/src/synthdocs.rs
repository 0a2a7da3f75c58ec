//! Deterministic synthetic document pages for a controllable domain shift.
//!
//! A page is laid out by flowing elements down one or two columns. Each
//! category has its own texture so the detector has something to learn:
//! text is a bundle of horizontal word strokes, a title a solid bar, a figure
//! a hatched box and a table a grid lattice. Annotations are the tight
//! bounding box of the ink actually drawn for each element.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::labelspace::{write_coco, Annotation, Dataset, ImageRecord, Taxonomy};
use crate::raster::GrayPage;

/// Ids of the four synthetic categories in [`Taxonomy::common4`].
pub const FIGURE: usize = 0;
pub const TABLE: usize = 1;
pub const TEXT: usize = 2;
pub const TITLE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    LineBundle,
    Bar,
    Hatched,
    Grid,
}

/// One value per synthetic category.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerCategory<T> {
    pub figure: T,
    pub table: T,
    pub text: T,
    pub title: T,
}

impl<T: Copy> PerCategory<T> {
    /// Values in category-id order.
    pub fn to_array(&self) -> [T; 4] {
        [self.figure, self.table, self.text, self.title]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    /// Base stroke thickness in pixels; line and border widths scale with it.
    pub stroke: usize,
    pub background: u8,
    pub ink: u8,
    pub textures: PerCategory<Texture>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Pages are square, `page_size` pixels a side.
    pub page_size: usize,
    pub columns: usize,
    pub weights: PerCategory<f64>,
    pub style: RenderStyle,
    /// Inclusive range of elements attempted per page.
    pub elements: (usize, usize),
    pub margin: usize,
    pub gutter: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights.to_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(format!(
                "{}: category weights must be non-negative with at least one positive",
                self.name
            )));
        }
        if !(1..=2).contains(&self.columns) {
            return Err(Error::Config(format!("{}: columns must be 1 or 2", self.name)));
        }
        if self.page_size < 128 {
            return Err(Error::Config(format!("{}: page_size must be at least 128", self.name)));
        }
        if self.elements.0 > self.elements.1 {
            return Err(Error::Config(format!("{}: element range is empty", self.name)));
        }
        if self.style.stroke == 0 || self.style.stroke > 6 {
            return Err(Error::Config(format!("{}: stroke must be in 1..=6", self.name)));
        }
        if self.column_width() < 48 {
            return Err(Error::Config(format!("{}: columns too narrow", self.name)));
        }
        Ok(())
    }

    pub fn column_width(&self) -> usize {
        let used = 2 * self.margin + self.gutter * (self.columns.saturating_sub(1));
        self.page_size.saturating_sub(used) / self.columns.max(1)
    }

    pub fn taxonomy(&self) -> Taxonomy {
        Taxonomy::common4()
    }
}

/// Source and target presets: a two-column, text-heavy page versus a
/// one-column, table/figure-heavy page with fewer, wider elements. Both are
/// rendered in the same crisp style, so the shift is layout and label mix.
pub fn domain_presets() -> (DomainSpec, DomainSpec) {
    let textures = PerCategory {
        figure: Texture::Hatched,
        table: Texture::Grid,
        text: Texture::LineBundle,
        title: Texture::Bar,
    };
    let source = DomainSpec {
        name: "source".into(),
        page_size: 320,
        columns: 2,
        weights: PerCategory {
            figure: 0.15,
            table: 0.1,
            text: 0.5,
            title: 0.25,
        },
        style: RenderStyle {
            stroke: 1,
            background: 255,
            ink: 0,
            textures,
        },
        elements: (4, 12),
        margin: 16,
        gutter: 16,
    };
    let target = DomainSpec {
        name: "target".into(),
        page_size: 320,
        columns: 1,
        weights: PerCategory {
            figure: 0.25,
            table: 0.3,
            text: 0.3,
            title: 0.15,
        },
        style: RenderStyle {
            stroke: 1,
            background: 255,
            ink: 0,
            textures,
        },
        elements: (3, 8),
        margin: 20,
        gutter: 16,
    };
    (source, target)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPage {
    pub image: GrayPage,
    /// `(box, category id)` in [`Taxonomy::common4`] ids.
    pub annotations: Vec<(BBox, usize)>,
}

/// Draws into a page while tracking the ink extent of the current element.
struct Canvas<'a> {
    page: &'a mut GrayPage,
    ink: u8,
    extent: Option<[usize; 4]>,
}

impl Canvas<'_> {
    fn fill(&mut self, x0: usize, y0: usize, x1: usize, y1: usize) {
        let (x1, y1) = (x1.min(self.page.width), y1.min(self.page.height));
        if x0 >= x1 || y0 >= y1 {
            return;
        }
        for y in y0..y1 {
            for x in x0..x1 {
                self.page.set(x, y, self.ink);
            }
        }
        self.grow(x0, y0, x1, y1);
    }

    fn dot(&mut self, x: usize, y: usize) {
        self.page.set(x, y, self.ink);
        self.grow(x, y, x + 1, y + 1);
    }

    fn grow(&mut self, x0: usize, y0: usize, x1: usize, y1: usize) {
        self.extent = Some(match self.extent {
            None => [x0, y0, x1, y1],
            Some([a, b, c, d]) => [a.min(x0), b.min(y0), c.max(x1), d.max(y1)],
        });
    }

    fn frame(&mut self, x: usize, y: usize, w: usize, h: usize, t: usize) {
        self.fill(x, y, x + w, y + t);
        self.fill(x, y + h - t, x + w, y + h);
        self.fill(x, y, x + t, y + h);
        self.fill(x + w - t, y, x + w, y + h);
    }
}

fn sample_category(weights: &[f64; 4], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).expect("validated")
}

/// Pixel size `(w, h)` of an element, and the smallest height it may shrink to.
fn sample_size(cat: usize, spec: &DomainSpec, rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    let cw = spec.column_width() as f64;
    let s = spec.style.stroke;
    let pitch = text_pitch(s);
    let frac = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (cw * rng.random_range(lo..hi)) as usize;
    match cat {
        TEXT => {
            let lines = rng.random_range(2..=9);
            (frac(rng, 0.85, 1.0), lines * pitch - (pitch - s - 1), 2 * pitch)
        }
        TITLE => (frac(rng, 0.3, 0.8), 3 * s + 6, 3 * s + 6),
        FIGURE => {
            let w = frac(rng, 0.55, 1.0);
            let h = (w as f64 * rng.random_range(0.4..0.8)) as usize;
            (w, h.max(24), 24)
        }
        _ => {
            let rows = rng.random_range(3..=8);
            (frac(rng, 0.75, 1.0), rows * (10 + 2 * s) + s, 3 * (10 + 2 * s) + s)
        }
    }
}

fn text_pitch(stroke: usize) -> usize {
    2 * (stroke + 1) + 3
}

fn render_element(
    canvas: &mut Canvas,
    texture: Texture,
    (x, y, w, h): (usize, usize, usize, usize),
    stroke: usize,
    rng: &mut ChaCha8Rng,
) {
    match texture {
        Texture::LineBundle => {
            let thick = stroke + 1;
            let pitch = text_pitch(stroke);
            let mut ly = y;
            while ly + thick <= y + h {
                let last = ly + pitch + thick > y + h;
                let len = if last {
                    (w as f64 * rng.random_range(0.3..0.9)) as usize
                } else {
                    w
                };
                // Words of random length separated by short gaps; the line
                // always starts at the left edge and, unless last, ends at
                // the right edge.
                let mut lx = x;
                while lx < x + len {
                    let word = rng.random_range(6..30).min(x + len - lx);
                    let end = if !last && x + len - (lx + word) < 8 { x + len } else { lx + word };
                    canvas.fill(lx, ly, end, ly + thick);
                    lx = end + rng.random_range(3..6) + stroke;
                }
                ly += pitch;
            }
        }
        Texture::Bar => canvas.fill(x, y, x + w, y + h),
        Texture::Hatched => {
            canvas.frame(x, y, w, h, stroke);
            let spacing = 6 + 2 * stroke;
            let phase = rng.random_range(0..spacing);
            for py in y + stroke..y + h - stroke {
                for px in x + stroke..x + w - stroke {
                    if (px + py + phase) % spacing < stroke {
                        canvas.dot(px, py);
                    }
                }
            }
        }
        Texture::Grid => {
            canvas.frame(x, y, w, h, stroke);
            let row_pitch = 10 + 2 * stroke;
            let mut ry = y + row_pitch;
            while ry + row_pitch / 2 < y + h {
                canvas.fill(x, ry, x + w, ry + stroke);
                ry += row_pitch;
            }
            let cols = rng.random_range(2..=5);
            for c in 1..cols {
                let cx = x + c * w / cols;
                canvas.fill(cx, y, cx + stroke, y + h);
            }
        }
    }
}

/// Render one page. Pure function of `(spec, seed)`.
///
/// Elements that do not fit in the remaining column space are shrunk, then
/// moved to the next column; once the columns are exhausted the page simply
/// carries fewer elements.
pub fn generate_page(spec: &DomainSpec, seed: u64) -> Result<RenderedPage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.page_size;
    let mut page = GrayPage::filled(size, size, spec.style.background);
    let weights = spec.weights.to_array();
    let textures = spec.style.textures.to_array();
    let wanted = rng.random_range(spec.elements.0..=spec.elements.1);
    let bottom = size - spec.margin;
    let mut annotations = Vec::with_capacity(wanted);
    let mut column = 0;
    let mut y = spec.margin + rng.random_range(0..8);
    while annotations.len() < wanted && column < spec.columns {
        let cat = sample_category(&weights, &mut rng);
        let (w, mut h, min_h) = sample_size(cat, spec, &mut rng);
        if y + h > bottom {
            let room = bottom.saturating_sub(y);
            if room >= min_h {
                h = room;
            } else {
                column += 1;
                y = spec.margin + rng.random_range(0..8);
                continue;
            }
        }
        let col_x = spec.margin + column * (spec.column_width() + spec.gutter);
        let slack = spec.column_width() - w;
        let x = match cat {
            TEXT | TABLE => col_x,
            _ => col_x + rng.random_range(0..=slack / 2),
        };
        let mut canvas = Canvas {
            page: &mut page,
            ink: spec.style.ink,
            extent: None,
        };
        render_element(&mut canvas, textures[cat], (x, y, w, h), spec.style.stroke, &mut rng);
        if let Some([x0, y0, x1, y1]) = canvas.extent {
            let bbox = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)?;
            annotations.push((bbox, cat));
        }
        y += h + rng.random_range(8..18);
    }
    Ok(RenderedPage {
        image: page,
        annotations,
    })
}

/// Render `n_pages` pages (page `i` uses `seed + i`) into
/// `<out_dir>/images/*.png` plus `<out_dir>/annotations.json`.
pub fn generate_dataset(spec: &DomainSpec, n_pages: usize, seed: u64, out_dir: &Path) -> Result<Dataset> {
    if n_pages == 0 {
        return Err(Error::Config("n_pages must be at least 1".into()));
    }
    spec.validate()?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut dataset = Dataset {
        base_dir: out_dir.to_path_buf(),
        images: Vec::with_capacity(n_pages),
        annotations: Vec::new(),
        taxonomy: spec.taxonomy(),
    };
    for i in 0..n_pages {
        let page = generate_page(spec, seed.wrapping_add(i as u64))?;
        let file_name = format!("images/page_{i:05}.png");
        page.image.save_png(&out_dir.join(&file_name))?;
        let id = i as u64 + 1;
        dataset.images.push(ImageRecord {
            id,
            file_name,
            width: spec.page_size as u32,
            height: spec.page_size as u32,
        });
        dataset
            .annotations
            .extend(page.annotations.into_iter().map(|(bbox, category)| Annotation {
                image_id: id,
                bbox,
                category,
            }));
    }
    write_coco(&dataset, &out_dir.join("annotations.json"))?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::labelspace::load_coco;

    #[test]
    fn empty_range_gives_blank_page() {
        let (mut spec, _) = domain_presets();
        spec.elements = (0, 0);
        let page = generate_page(&spec, 1).unwrap();
        assert!(page.annotations.is_empty());
        assert!(page.image.pixels.iter().all(|&p| p == spec.style.background));
    }

    #[test]
    fn pages_are_deterministic_and_seed_sensitive() {
        let (spec, _) = domain_presets();
        assert_eq!(generate_page(&spec, 4).unwrap(), generate_page(&spec, 4).unwrap());
        assert_ne!(generate_page(&spec, 4).unwrap().image, generate_page(&spec, 5).unwrap().image);
    }

    #[test]
    fn boxes_are_tight_disjoint_and_inside() {
        let (source, target) = domain_presets();
        for spec in [&source, &target] {
            for seed in 0..30 {
                let page = generate_page(spec, seed).unwrap();
                let ink = |x: usize, y: usize| page.image.get(x, y) == spec.style.ink;
                for (i, (b, _)) in page.annotations.iter().enumerate() {
                    assert!(b.x_max <= spec.page_size as f64 && b.y_max <= spec.page_size as f64);
                    let (x0, y0, x1, y1) = (b.x_min as usize, b.y_min as usize, b.x_max as usize, b.y_max as usize);
                    // Ink touches every side of the box.
                    assert!((y0..y1).any(|y| ink(x0, y)) && (y0..y1).any(|y| ink(x1 - 1, y)));
                    assert!((x0..x1).any(|x| ink(x, y0)) && (x0..x1).any(|x| ink(x, y1 - 1)));
                    for (c, _) in &page.annotations[i + 1..] {
                        assert!(iou(b, c) <= 0.05);
                    }
                }
            }
        }
    }

    #[test]
    fn two_column_text_is_narrow() {
        let (spec, _) = domain_presets();
        let widths: Vec<f64> = (0..100)
            .flat_map(|s| generate_page(&spec, s).unwrap().annotations)
            .filter(|(_, c)| *c == TEXT)
            .map(|(b, _)| b.width())
            .collect();
        let narrow = widths.iter().filter(|w| **w < 0.5 * spec.page_size as f64).count();
        assert!(narrow as f64 >= 0.95 * widths.len() as f64);
    }

    #[test]
    fn presets_differ_as_documented() {
        let (s, t) = domain_presets();
        assert_eq!((s.columns, t.columns), (2, 1));
        assert!(t.weights.table > s.weights.table);
        assert!(t.elements.1 < s.elements.1 && t.column_width() > s.column_width());
    }

    #[test]
    fn single_page_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (spec, _) = domain_presets();
        let written = generate_dataset(&spec, 1, 9, dir.path()).unwrap();
        let loaded = load_coco(&dir.path().join("annotations.json")).unwrap();
        assert_eq!(loaded, written);
        assert!(dir.path().join("images/page_00000.png").exists());
    }
}
