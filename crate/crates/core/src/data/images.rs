use std::collections::HashMap;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;

use super::DatasetManifest;
use crate::error::{Error, Result};

/// An image cut into non-overlapping `patch × patch` tiles.
///
/// Tiles are stored in row-major grid order; each tile holds its pixels in
/// raster order with interleaved RGB, so a tile is `3·patch²` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchImage {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch: usize,
    pub data: Vec<u8>,
}

impl PatchImage {
    pub fn n_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Pixel values mapped from `[0, 255]` to `[-1, 1]`.
    pub fn normalized(&self) -> impl Iterator<Item = f32> + '_ {
        self.data.iter().map(|&v| v as f32 / 127.5 - 1.0)
    }
}

pub fn patchify(img: &RgbImage, patch: usize) -> Result<PatchImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(Error::DimensionMismatch {
            expected: format!("image sides divisible by patch size {patch}"),
            actual: format!("{h}x{w}"),
        });
    }
    let (rows, cols) = (h / patch, w / patch);
    let raw = img.as_raw();
    let mut data = Vec::with_capacity(h * w * 3);
    for gy in 0..rows {
        for gx in 0..cols {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * w + gx * patch) * 3;
                data.extend_from_slice(&raw[start..start + patch * 3]);
            }
        }
    }
    Ok(PatchImage {
        grid_rows: rows,
        grid_cols: cols,
        patch,
        data,
    })
}

/// Loads a record's image, crops it to the record's box when present and
/// resizes to `height × width` before cutting it into patches.
pub fn load_patches(
    manifest: &DatasetManifest,
    idx: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<PatchImage> {
    let path = manifest.image_path(idx)?;
    let img = image::open(&path)
        .map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?
        .to_rgb8();
    let img = match manifest.records()[idx].bbox {
        Some(b) => {
            let x0 = (b.x_min().floor() as u32).min(img.width().saturating_sub(1));
            let y0 = (b.y_min().floor() as u32).min(img.height().saturating_sub(1));
            let x1 = (b.x_max().ceil() as u32).clamp(x0 + 1, img.width());
            let y1 = (b.y_max().ceil() as u32).clamp(y0 + 1, img.height());
            image::imageops::crop_imm(&img, x0, y0, x1 - x0, y1 - y0).to_image()
        }
        None => img,
    };
    let img = if img.width() as usize != width || img.height() as usize != height {
        image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
    } else {
        img
    };
    patchify(&img, patch)
}

/// Memoizes decoded, patchified images by manifest record index.
#[derive(Debug)]
pub struct ImageCache {
    height: usize,
    width: usize,
    patch: usize,
    entries: HashMap<usize, Arc<PatchImage>>,
}

impl ImageCache {
    pub fn new(height: usize, width: usize, patch: usize) -> Self {
        Self {
            height,
            width,
            patch,
            entries: HashMap::new(),
        }
    }

    pub fn get(&mut self, manifest: &DatasetManifest, idx: usize) -> Result<Arc<PatchImage>> {
        if let Some(p) = self.entries.get(&idx) {
            return Ok(p.clone());
        }
        let p = Arc::new(load_patches(
            manifest,
            idx,
            self.height,
            self.width,
            self.patch,
        )?);
        self.entries.insert(idx, p.clone());
        Ok(p)
    }

    /// Stacks the given records into a `(batch, n_patches, 3·patch²)` tensor.
    pub fn batch_tensor(
        &mut self,
        manifest: &DatasetManifest,
        indices: &[usize],
        dtype: DType,
        device: &Device,
    ) -> Result<Tensor> {
        let n = (self.height / self.patch) * (self.width / self.patch);
        let pd = 3 * self.patch * self.patch;
        let mut buf = Vec::with_capacity(indices.len() * n * pd);
        for &i in indices {
            buf.extend(self.get(manifest, i)?.normalized());
        }
        let t = Tensor::from_vec(buf, (indices.len(), n, pd), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}
