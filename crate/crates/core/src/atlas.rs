//! Dense body-part maps (IUV) and the part-indexed UV texture atlas.
//!
//! A dense map assigns every pixel a part index (0 is background) and a
//! `(u, v)` surface coordinate inside that part. The atlas stores one square
//! cell per part on a 4-row by 6-column grid; part `k` lives in cell
//! `((k - 1) / 6, (k - 1) % 6)`. Texel addressing is nearest-texel in both
//! directions, so extraction followed by rendering is exact whenever no two
//! pixels land on the same texel.

use std::path::Path;

use partwarp_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::raster::{load_rgb8, Image};

/// Largest supported part count (4 x 6 atlas cells).
pub const MAX_PARTS: usize = 24;
pub const ATLAS_COLUMNS: usize = 6;
pub const ATLAS_ROWS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBodyMap {
    height: usize,
    width: usize,
    num_parts: usize,
    part: Vec<u8>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl DenseBodyMap {
    /// Validates every invariant; background pixels must carry `u = v = 0`.
    pub fn new(
        height: usize,
        width: usize,
        num_parts: usize,
        part: Vec<u8>,
        u: Vec<f64>,
        v: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidMap("empty map".into()));
        }
        if !(1..=MAX_PARTS).contains(&num_parts) {
            return Err(Error::InvalidMap(format!("part count {num_parts} outside 1..={MAX_PARTS}")));
        }
        let n = height * width;
        if part.len() != n || u.len() != n || v.len() != n {
            return Err(Error::InvalidMap("grids differ in size".into()));
        }
        for i in 0..n {
            if part[i] as usize > num_parts {
                return Err(Error::InvalidMap(format!("part index {} exceeds {num_parts}", part[i])));
            }
            if !(0.0..=1.0).contains(&u[i]) || !(0.0..=1.0).contains(&v[i]) {
                return Err(Error::InvalidMap(format!("uv ({}, {}) outside [0, 1]", u[i], v[i])));
            }
            if part[i] == 0 && (u[i] != 0.0 || v[i] != 0.0) {
                return Err(Error::InvalidMap("background pixel with nonzero uv".into()));
            }
        }
        Ok(Self { height, width, num_parts, part, u, v })
    }

    pub fn background(height: usize, width: usize, num_parts: usize) -> Result<Self> {
        let n = height * width;
        Self::new(height, width, num_parts, vec![0; n], vec![0.0; n], vec![0.0; n])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn parts(&self) -> &[u8] {
        &self.part
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn part_at(&self, y: usize, x: usize) -> u8 {
        self.part[y * self.width + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.part.iter().filter(|&&p| p != 0).count()
    }

    /// Bounding box `(y0, x0, y1, x1)` (exclusive end) of the given parts.
    pub fn bounding_box(&self, parts: &[u8]) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if parts.contains(&self.part_at(y, x)) {
                    bb = Some(match bb {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                    });
                }
            }
        }
        bb
    }
}

/// Decodes a `(part, U, V)` 8-bit raster. Channel 0 is the literal part
/// index; U and V are scaled by 1/255. Background pixels get `u = v = 0`.
pub fn decode_iuv(raster: &image::RgbImage, num_parts: usize) -> Result<DenseBodyMap> {
    let (w, h) = (raster.width() as usize, raster.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidMap("empty IUV raster".into()));
    }
    let n = w * h;
    let mut part = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for px in raster.pixels() {
        let [i, uu, vv] = px.0;
        if i as usize > num_parts {
            return Err(Error::InvalidMap(format!("part index {i} exceeds {num_parts} (corrupt map)")));
        }
        part.push(i);
        if i == 0 {
            u.push(0.0);
            v.push(0.0);
        } else {
            u.push(uu as f64 / 255.0);
            v.push(vv as f64 / 255.0);
        }
    }
    DenseBodyMap::new(h, w, num_parts, part, u, v)
}

/// Inverse of [`decode_iuv`] for maps whose uv values are multiples of 1/255.
pub fn encode_iuv(map: &DenseBodyMap) -> image::RgbImage {
    let mut buf = Vec::with_capacity(map.height * map.width * 3);
    for i in 0..map.height * map.width {
        buf.push(map.part[i]);
        buf.push((map.u[i] * 255.0).round() as u8);
        buf.push((map.v[i] * 255.0).round() as u8);
    }
    image::RgbImage::from_raw(map.width as u32, map.height as u32, buf).expect("buffer size")
}

pub fn load_iuv(path: &Path, num_parts: usize) -> Result<DenseBodyMap> {
    decode_iuv(&load_rgb8(path)?, num_parts).map_err(|e| match e {
        Error::InvalidMap(msg) => Error::InvalidMap(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_iuv(path: &Path, map: &DenseBodyMap) -> Result<()> {
    encode_iuv(map).save(path).map_err(|source| Error::Image { path: path.into(), source })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width);
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Pixels set in `self` but not in `other`.
    pub fn minus(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.bits.len(), other.bits.len());
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && !b).collect();
        BinaryMask { height: self.height, width: self.width, bits }
    }
}

/// Mask of pixels whose part index is in `parts`.
pub fn part_mask(map: &DenseBodyMap, parts: &[u8]) -> Result<BinaryMask> {
    for &p in parts {
        if p == 0 || p as usize > map.num_parts {
            return Err(Error::InvalidPart { index: p as usize, max: map.num_parts });
        }
    }
    let bits = map.part.iter().map(|p| parts.contains(p)).collect();
    Ok(BinaryMask::new(map.height, map.width, bits))
}

pub fn foreground_mask(map: &DenseBodyMap) -> BinaryMask {
    BinaryMask::new(map.height, map.width, map.part.iter().map(|&p| p != 0).collect())
}

/// Placement of part cells inside a square atlas.
///
/// Cells are `size / 6` texels wide, so the grid covers the top-left
/// `6 * cell` by `4 * cell` region; the rest of the atlas stays empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AtlasLayout {
    size: usize,
    cell: usize,
}

impl AtlasLayout {
    pub fn new(size: usize) -> Result<Self> {
        let cell = size / ATLAS_COLUMNS;
        if cell == 0 {
            return Err(Error::InvalidArgument(format!("atlas size {size} smaller than the part grid")));
        }
        Ok(Self { size, cell })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    /// Top-left `(row, column)` of part `k`'s cell, `k` in `1..=24`.
    pub fn cell_origin(&self, part: u8) -> (usize, usize) {
        let k = part as usize - 1;
        ((k / ATLAS_COLUMNS) * self.cell, (k % ATLAS_COLUMNS) * self.cell)
    }

    /// Nearest texel for a surface coordinate; `u` runs along columns.
    pub fn texel(&self, part: u8, u: f64, v: f64) -> (usize, usize) {
        let (r0, c0) = self.cell_origin(part);
        let span = (self.cell - 1) as f64;
        (r0 + (v * span).round() as usize, c0 + (u * span).round() as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextureAtlas {
    layout: AtlasLayout,
    texels: Vec<f64>,
    filled: Vec<bool>,
}

impl TextureAtlas {
    pub fn empty(layout: AtlasLayout) -> Self {
        let n = layout.size * layout.size;
        Self { layout, texels: vec![0.0; n * 3], filled: vec![false; n] }
    }

    /// Every texel inside the part grid set to `rgb`.
    pub fn constant(layout: AtlasLayout, num_parts: usize, rgb: [f64; 3]) -> Self {
        let mut atlas = Self::empty(layout);
        for k in 1..=num_parts as u8 {
            let (r0, c0) = layout.cell_origin(k);
            for r in r0..r0 + layout.cell {
                for c in c0..c0 + layout.cell {
                    atlas.write(r, c, rgb);
                }
            }
        }
        atlas
    }

    fn write(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        let i = r * self.layout.size + c;
        self.texels[i * 3..i * 3 + 3].copy_from_slice(&rgb);
        self.filled[i] = true;
    }

    pub fn layout(&self) -> AtlasLayout {
        self.layout
    }

    pub fn size(&self) -> usize {
        self.layout.size
    }

    pub fn texel(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.layout.size + c) * 3;
        [self.texels[i], self.texels[i + 1], self.texels[i + 2]]
    }

    pub fn is_filled(&self, r: usize, c: usize) -> bool {
        self.filled[r * self.layout.size + c]
    }

    pub fn filled(&self) -> &[bool] {
        &self.filled
    }

    pub fn texels(&self) -> &[f64] {
        &self.texels
    }

    pub fn filled_count(&self) -> usize {
        self.filled.iter().filter(|&&f| f).count()
    }

    /// `[1, 3, A, A]` tensor of the raw texel values.
    pub fn to_tensor(&self) -> Tensor {
        let a = self.layout.size;
        Image::new(a, a, self.texels.clone()).expect("atlas buffer").to_tensor()
    }

    /// Writes `<stem>.png` (texels) and `<stem>.mask.png` (filled mask).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let a = self.layout.size as u32;
        let rgb = Image::new(a as usize, a as usize, self.texels.clone())?;
        rgb.save_png(&stem.with_extension("png"))?;
        let mask: Vec<u8> = self.filled.iter().map(|&f| if f { 255 } else { 0 }).collect();
        let mask_path = stem.with_extension("mask.png");
        image::GrayImage::from_raw(a, a, mask)
            .expect("mask size")
            .save(&mask_path)
            .map_err(|source| Error::Image { path: mask_path, source })
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let rgb = Image::load_png(&stem.with_extension("png"))?;
        let mask_path = stem.with_extension("mask.png");
        let mask = image::open(&mask_path)
            .map_err(|source| Error::Image { path: mask_path.clone(), source })?
            .to_luma8();
        if rgb.height() != rgb.width() || mask.width() as usize != rgb.width() {
            return Err(Error::Shape(format!("atlas {} is not square or mask differs", stem.display())));
        }
        let layout = AtlasLayout::new(rgb.width())?;
        let filled: Vec<bool> = mask.as_raw().iter().map(|&b| b >= 128).collect();
        let mut texels = rgb.data().to_vec();
        for (i, &f) in filled.iter().enumerate() {
            if !f {
                texels[i * 3..i * 3 + 3].fill(0.0);
            }
        }
        Ok(Self { layout, texels, filled })
    }
}

/// Splats each foreground pixel into the atlas. Pixels that share a texel
/// are averaged.
pub fn extract_texture(image: &Image, map: &DenseBodyMap, atlas_size: usize) -> Result<TextureAtlas> {
    if (image.height(), image.width()) != (map.height, map.width) {
        return Err(Error::Shape(format!(
            "image {}x{} vs map {}x{}",
            image.height(),
            image.width(),
            map.height,
            map.width
        )));
    }
    let layout = AtlasLayout::new(atlas_size)?;
    let n = atlas_size * atlas_size;
    let mut sum = vec![0.0; n * 3];
    let mut count = vec![0u32; n];
    for y in 0..map.height {
        for x in 0..map.width {
            let i = y * map.width + x;
            let k = map.part[i];
            if k == 0 {
                continue;
            }
            let (r, c) = layout.texel(k, map.u[i], map.v[i]);
            let t = r * atlas_size + c;
            let px = image.pixel(y, x);
            for ch in 0..3 {
                sum[t * 3 + ch] += px[ch];
            }
            count[t] += 1;
        }
    }
    let mut atlas = TextureAtlas::empty(layout);
    for t in 0..n {
        if count[t] > 0 {
            let inv = 1.0 / count[t] as f64;
            for ch in 0..3 {
                atlas.texels[t * 3 + ch] = sum[t * 3 + ch] * inv;
            }
            atlas.filled[t] = true;
        }
    }
    Ok(atlas)
}

/// Looks up every foreground pixel's texel; background renders as 0.
pub fn render_texture(atlas: &TextureAtlas, map: &DenseBodyMap) -> Image {
    let mut out = Image::zeros(map.height, map.width);
    for y in 0..map.height {
        for x in 0..map.width {
            let i = y * map.width + x;
            let k = map.part[i];
            if k == 0 {
                continue;
            }
            let (r, c) = atlas.layout.texel(k, map.u[i], map.v[i]);
            out.set_pixel(y, x, atlas.texel(r, c));
        }
    }
    out
}
