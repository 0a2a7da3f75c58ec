//! Page rasters: 8-bit grayscale buffers on disk, `[3, H, W]` tensors in
//! `[0, 1]` in memory.

use std::fs;
use std::path::Path;

use image::{imageops, GrayImage, ImageReader, RgbImage};

use crate::detector::Tensor;
use crate::error::{Error, Result};
use crate::labelspace::{Dataset, ImageRecord, Taxonomy};

/// Grayscale page, row-major, one byte per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayPage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayPage {
    pub fn filled(width: usize, height: usize, level: u8) -> Self {
        GrayPage {
            width,
            height,
            pixels: vec![level; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, level: u8) {
        self.pixels[y * self.width + x] = level;
    }

    /// Three identical channels scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane: Vec<f64> = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let mut data = Vec::with_capacity(3 * plane.len());
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        Tensor {
            shape: vec![3, self.height, self.width],
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer matches dimensions");
        img.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Ingestion(format!("{}: {other}", path.display())),
        })
    }
}

/// Interleaved 8-bit RGB page; the compact in-memory form of a dataset image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbPage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbPage {
    pub fn load(path: &Path) -> Result<Self> {
        let img = ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(RgbPage {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.into_raw(),
        })
    }

    /// Bilinear resize to `width` x `height`.
    pub fn resized(&self, width: usize, height: usize) -> RgbPage {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer matches dimensions");
        let out = imageops::resize(&img, width as u32, height as u32, imageops::FilterType::Triangle);
        RgbPage {
            width,
            height,
            pixels: out.into_raw(),
        }
    }

    /// Planar `[3, H, W]` tensor in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; 3 * w * h];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor {
            shape: vec![3, h, w],
            data,
        }
    }
}

/// An unannotated dataset of every PNG/JPEG in `dir`, ids 1.. in file-name order.
pub fn image_folder(dir: &Path, taxonomy: Taxonomy) -> Result<Dataset> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| {
            let n = n.to_ascii_lowercase();
            n.ends_with(".png") || n.ends_with(".jpg") || n.ends_with(".jpeg")
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Ingestion(format!("{}: no images found", dir.display())));
    }
    let mut images = Vec::with_capacity(names.len());
    for (i, name) in names.into_iter().enumerate() {
        let path = dir.join(&name);
        let (width, height) = image::image_dimensions(&path)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        images.push(ImageRecord {
            id: i as u64 + 1,
            file_name: name,
            width,
            height,
        });
    }
    Ok(Dataset {
        base_dir: dir.to_path_buf(),
        images,
        annotations: Vec::new(),
        taxonomy,
    })
}

/// Read any supported raster as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(RgbPage::load(path)?.to_tensor())
}
