//! Test-time modes: random appearance sampling, pose transfer, per-part
//! resampling, garment transfer and latent interpolation.
//!
//! Each image is decoded on its own, so an output depends only on its latent
//! and map, never on what else was generated alongside it.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{extract_texture, DenseBodyMap};
use crate::error::{Error, Result};
use crate::latent::{
    interpolate, merge_latents, resample_parts, sample_reparam, warp_broadcast, warp_broadcast_noparts, PartLatent,
};
use crate::networks::ModelBundle;
use crate::raster::Image;

fn check_map(bundle: &ModelBundle, map: &DenseBodyMap) -> Result<()> {
    let cfg = &bundle.config;
    if (map.height(), map.width()) != (cfg.image_size, cfg.image_size) {
        return Err(Error::Shape(format!(
            "{}x{} map for a {} px model",
            map.height(),
            map.width(),
            cfg.image_size
        )));
    }
    if map.num_parts() != cfg.parts {
        return Err(Error::Shape(format!("map has {} parts, model has {}", map.num_parts(), cfg.parts)));
    }
    Ok(())
}

/// Warps `z` over `map` and runs the generator.
pub fn render_latent(bundle: &ModelBundle, z: &PartLatent, map: &DenseBodyMap) -> Result<Image> {
    check_map(bundle, map)?;
    let cfg = &bundle.config;
    if (z.parts(), z.dims()) != (cfg.parts, cfg.latent_dim) {
        return Err(Error::Shape(format!(
            "latent is {}x{}, model expects {}x{}",
            z.parts(),
            z.dims(),
            cfg.parts,
            cfg.latent_dim
        )));
    }
    let noise = if cfg.noparts { warp_broadcast_noparts(z.values(), map) } else { warp_broadcast(z, map)? };
    Ok(Image::from_signed_tensor(&bundle.decode(noise.to_tensor())?, 0))
}

/// An output image with the latent that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub z: PartLatent,
    pub image: Image,
}

/// `n` independent N(0, I) appearances rendered on `map`.
pub fn sample_appearance<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    map: &DenseBodyMap,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Generated>> {
    check_map(bundle, map)?;
    let cfg = &bundle.config;
    (0..n)
        .map(|_| {
            let z = PartLatent::standard_normal(cfg.parts, cfg.latent_dim, rng);
            let image = render_latent(bundle, &z, map)?;
            Ok(Generated { z, image })
        })
        .collect()
}

/// How an observed image is turned into a latent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// The posterior mean.
    #[default]
    Mean,
    /// One reparameterized draw from the posterior, seeded.
    Sample(u64),
}

/// Posterior mean appearance code of `image` seen under `map`.
pub fn encode_appearance(bundle: &ModelBundle, image: &Image, map: &DenseBodyMap) -> Result<PartLatent> {
    encode_with(bundle, image, map, Encoding::Mean)
}

pub fn encode_with(bundle: &ModelBundle, image: &Image, map: &DenseBodyMap, encoding: Encoding) -> Result<PartLatent> {
    check_map(bundle, map)?;
    let atlas = extract_texture(image, map, bundle.config.atlas_size)?;
    let posterior = bundle.encode(&atlas)?;
    Ok(match encoding {
        Encoding::Mean => posterior.mu,
        Encoding::Sample(seed) => {
            use rand::SeedableRng;
            sample_reparam(&posterior, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
        }
    })
}

/// One image per target map, all from the single latent of the source.
pub fn pose_transfer(
    bundle: &ModelBundle,
    source: (&Image, &DenseBodyMap),
    targets: &[&DenseBodyMap],
    encoding: Encoding,
) -> Result<Vec<Generated>> {
    let z = encode_with(bundle, source.0, source.1, encoding)?;
    targets.iter().map(|m| Ok(Generated { z: z.clone(), image: render_latent(bundle, &z, m)? })).collect()
}

/// `n` renders of `base` on `map` with the rows in `parts` redrawn each time.
pub fn part_sample<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    map: &DenseBodyMap,
    base: &PartLatent,
    parts: &[u8],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Generated>> {
    check_map(bundle, map)?;
    (0..n)
        .map(|_| {
            let z = resample_parts(base, parts, rng)?;
            let image = render_latent(bundle, &z, map)?;
            Ok(Generated { z, image })
        })
        .collect()
}

/// Body appearance with the rows in `garment_parts` taken from the garment
/// image, rendered on `target`.
pub fn garment_transfer(
    bundle: &ModelBundle,
    body: (&Image, &DenseBodyMap),
    garment: (&Image, &DenseBodyMap),
    garment_parts: &[u8],
    target: &DenseBodyMap,
    encoding: Encoding,
) -> Result<Generated> {
    let zb = encode_with(bundle, body.0, body.1, encoding)?;
    let zg = encode_with(bundle, garment.0, garment.1, encoding)?;
    let z = merge_latents(&zb, &zg, garment_parts)?;
    let image = render_latent(bundle, &z, target)?;
    Ok(Generated { z, image })
}

/// `steps` evenly spaced weights in `[0, 1]`; a single step is `t = 0`.
pub fn interpolation_grid(steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect(),
    }
}

/// Renders `interpolate(z1, z2, t)` on `display` for each grid weight.
pub fn interpolate_images(
    bundle: &ModelBundle,
    first: (&Image, &DenseBodyMap),
    second: (&Image, &DenseBodyMap),
    display: &DenseBodyMap,
    steps: usize,
    encoding: Encoding,
) -> Result<Vec<(f64, Generated)>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("interpolation needs at least one step".into()));
    }
    let z1 = encode_with(bundle, first.0, first.1, encoding)?;
    let z2 = encode_with(bundle, second.0, second.1, encoding)?;
    interpolation_grid(steps)
        .into_iter()
        .map(|t| {
            let z = interpolate(&z1, &z2, t)?;
            let image = render_latent(bundle, &z, display)?;
            Ok((t, Generated { z, image }))
        })
        .collect()
}

/// Generating parameters of one grid tile.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TileInfo {
    pub file: String,
    pub mode: String,
    /// Grid position, row-major.
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub grid: String,
    pub columns: usize,
    pub tiles: Vec<TileInfo>,
}

impl GridManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes each tile as `{stem}_{i:03}.png` with its latent as JSON, the
/// tiled grid as `{stem}.png` and the manifest as `{stem}.json`. The `file`,
/// `index` and `latent` fields of `tiles` are filled in here.
pub fn write_grid(
    dir: &Path,
    stem: &str,
    outputs: &[Generated],
    mut tiles: Vec<TileInfo>,
    columns: usize,
) -> Result<(PathBuf, GridManifest)> {
    if outputs.len() != tiles.len() {
        return Err(Error::InvalidArgument(format!("{} images but {} tile records", outputs.len(), tiles.len())));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, (g, tile)) in outputs.iter().zip(&mut tiles).enumerate() {
        let file = format!("{stem}_{i:03}.png");
        let latent = format!("{stem}_{i:03}.z.json");
        g.image.save_png(&dir.join(&file))?;
        g.z.save(&dir.join(&latent))?;
        tile.file = file;
        tile.index = i;
        tile.latent = Some(latent);
    }
    let grid = format!("{stem}.png");
    if !outputs.is_empty() {
        let images: Vec<Image> = outputs.iter().map(|g| g.image.clone()).collect();
        Image::tile(&images, columns.max(1))?.save_png(&dir.join(&grid))?;
    }
    let manifest = GridManifest { grid, columns: columns.max(1), tiles };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok((path, manifest))
}
