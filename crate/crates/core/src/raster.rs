//! RGB images with real-valued channels and PNG I/O.

use std::path::Path;

use partwarp_autodiff::Tensor;

use crate::error::{Error, Result};

/// `H x W x 3` image, channels interleaved, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image buffer of {} values for {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[1, 3, H, W]` tensor mapped from `[0, 1]` to `[-1, 1]`.
    pub fn to_signed_tensor(&self) -> Tensor {
        self.to_tensor_with(|v| v * 2.0 - 1.0)
    }

    /// `[1, 3, H, W]` tensor with values copied as-is.
    pub fn to_tensor(&self) -> Tensor {
        self.to_tensor_with(|v| v)
    }

    fn to_tensor_with(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = f(self.data[p * 3 + c]);
            }
        }
        Tensor::new([1, 3, self.height, self.width], out)
    }

    /// Inverse of [`Image::to_signed_tensor`] for sample `index` of a
    /// `[B, 3, H, W]` tensor. Values are clamped to `[0, 1]`.
    pub fn from_signed_tensor(t: &Tensor, index: usize) -> Self {
        assert_eq!(t.rank(), 4);
        assert_eq!(t.dim(1), 3);
        let (h, w) = (t.dim(2), t.dim(3));
        let hw = h * w;
        let src = t.slice0(index);
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[p * 3 + c] = ((src[c * hw + p] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
        Self { height: h, width: w, data }
    }

    /// Stacks images into one `[B, 3, H, W]` signed tensor.
    pub fn batch_signed(images: &[&Image]) -> Tensor {
        let (h, w) = (images[0].height, images[0].width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            assert_eq!((img.height, img.width), (h, w), "batch images differ in size");
            data.extend(img.to_signed_tensor().into_data());
        }
        Tensor::new([images.len(), 3, h, w], data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Self { height: img.height() as usize, width: img.width() as usize, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image { path: path.into(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Ok(Self::from_rgb8(&load_rgb8(path)?))
    }

    /// Tiles equally sized images into a grid with `columns` columns.
    pub fn tile(images: &[Image], columns: usize) -> Result<Image> {
        let Some(first) = images.first() else {
            return Ok(Image::zeros(0, 0));
        };
        let (h, w) = (first.height, first.width);
        if images.iter().any(|i| (i.height, i.width) != (h, w)) {
            return Err(Error::Shape("grid tiles differ in size".into()));
        }
        let columns = columns.max(1).min(images.len());
        let rows = images.len().div_ceil(columns);
        let mut grid = Image::zeros(rows * h, columns * w);
        for (k, img) in images.iter().enumerate() {
            let (r, c) = (k / columns, k % columns);
            for y in 0..h {
                for x in 0..w {
                    grid.set_pixel(r * h + y, c * w + x, img.pixel(y, x));
                }
            }
        }
        Ok(grid)
    }

    /// Mean absolute per-value difference.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }
}

pub(crate) fn load_rgb8(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
    Ok(img.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_tensor_round_trip() {
        let img = Image::new(2, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let t = img.to_signed_tensor();
        assert_eq!(t.shape(), &[1, 3, 2, 3]);
        let back = Image::from_signed_tensor(&t, 0);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tile_places_images_row_major() {
        let a = Image::filled(1, 1, [1.0, 0.0, 0.0]);
        let b = Image::filled(1, 1, [0.0, 1.0, 0.0]);
        let c = Image::filled(1, 1, [0.0, 0.0, 1.0]);
        let grid = Image::tile(&[a, b, c], 2).unwrap();
        assert_eq!((grid.height(), grid.width()), (2, 2));
        assert_eq!(grid.pixel(0, 1), [0.0, 1.0, 0.0]);
        assert_eq!(grid.pixel(1, 0), [0.0, 0.0, 1.0]);
        assert_eq!(grid.pixel(1, 1), [0.0, 0.0, 0.0]);
    }
}
