//! On-disk datasets of image / IUV pairs grouped by identity, and a
//! procedural "mannequin" generator for desk-scale runs.
//!
//! Layout: `root/<identity>/<frame>.img.png` with a sibling
//! `<frame>.iuv.png`, plus optional split manifests `root/<split>.txt`
//! listing one identity per line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{decode_iuv, encode_iuv, load_iuv, AtlasLayout, DenseBodyMap};
use crate::error::{Error, Result};
use crate::raster::Image;

const IMAGE_SUFFIX: &str = ".img.png";
const IUV_SUFFIX: &str = ".iuv.png";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub identity: String,
    pub frame: String,
    pub image: PathBuf,
    pub iuv: PathBuf,
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    root: PathBuf,
    records: Vec<Record>,
    by_identity: BTreeMap<String, Vec<usize>>,
    pairable: Vec<String>,
}

impl DatasetIndex {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn identities(&self) -> impl Iterator<Item = &str> {
        self.by_identity.keys().map(String::as_str)
    }

    /// Identities with at least two records, in sorted order.
    pub fn pairable(&self) -> &[String] {
        &self.pairable
    }

    pub fn records_of(&self, identity: &str) -> &[usize] {
        self.by_identity.get(identity).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

/// Scans `root`. With `split`, only identities listed in `root/<split>.txt`
/// are kept. Frames without an IUV file are dropped.
pub fn load_index(root: &Path, split: Option<&str>) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let allowed: Option<Vec<String>> = match split {
        Some(name) => {
            let path = root.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Some(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
        }
        None => None,
    };
    let mut records = Vec::new();
    let mut dropped = 0usize;
    for dir in read_dir_sorted(root)? {
        if !dir.is_dir() {
            continue;
        }
        let identity = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if allowed.as_ref().is_some_and(|a| !a.contains(&identity)) {
            continue;
        }
        for file in read_dir_sorted(&dir)? {
            let Some(name) = file.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(frame) = name.strip_suffix(IMAGE_SUFFIX) else { continue };
            let iuv = dir.join(format!("{frame}{IUV_SUFFIX}"));
            if !iuv.is_file() {
                dropped += 1;
                continue;
            }
            records.push(Record { identity: identity.clone(), frame: frame.to_string(), image: file.clone(), iuv });
        }
    }
    if dropped > 0 {
        warn!("dropped {dropped} frame(s) without a dense map under {}", root.display());
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("no image/IUV pairs under {}", root.display())));
    }
    let mut by_identity: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_identity.entry(r.identity.clone()).or_default().push(i);
    }
    let pairable = by_identity.iter().filter(|(_, v)| v.len() >= 2).map(|(k, _)| k.clone()).collect();
    info!("indexed {} frames of {} identities", records.len(), by_identity.len());
    Ok(DatasetIndex { root: root.to_path_buf(), records, by_identity, pairable })
}

/// Uniform identity among the pairable ones, then two distinct frames of
/// it: `(source, target)` record indices.
pub fn sample_pair<R: Rng + ?Sized>(index: &DatasetIndex, rng: &mut R) -> Result<(usize, usize)> {
    let identity = index
        .pairable
        .choose(rng)
        .ok_or_else(|| Error::Dataset("no identity has two or more frames".into()))?;
    let frames = &index.by_identity[identity];
    let a = rng.random_range(0..frames.len());
    let mut b = rng.random_range(0..frames.len() - 1);
    if b >= a {
        b += 1;
    }
    Ok((frames[a], frames[b]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub map: DenseBodyMap,
}

/// One source / target pair of the same identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub source: Frame,
    pub target: Frame,
    pub identity: String,
}

/// A dataset index with every frame decoded in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub index: DatasetIndex,
    frames: Vec<Frame>,
}

impl Dataset {
    pub fn load(root: &Path, split: Option<&str>, num_parts: usize) -> Result<Self> {
        let index = load_index(root, split)?;
        let mut frames = Vec::with_capacity(index.len());
        let mut size = None;
        for r in &index.records {
            let image = Image::load_png(&r.image)?;
            let map = load_iuv(&r.iuv, num_parts)?;
            if (image.height(), image.width()) != (map.height(), map.width()) {
                return Err(Error::Shape(format!("{}: image and dense map differ in size", r.image.display())));
            }
            if *size.get_or_insert((image.height(), image.width())) != (image.height(), image.width()) {
                return Err(Error::Dataset(format!("{}: frames differ in size", r.image.display())));
            }
            frames.push(Frame { image, map });
        }
        Ok(Self { index, frames })
    }

    pub fn frame(&self, record: usize) -> &Frame {
        &self.frames[record]
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.frames[0].image.height(), self.frames[0].image.width())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TrainSample> {
        let (s, t) = sample_pair(&self.index, rng)?;
        Ok(TrainSample {
            source: self.frames[s].clone(),
            target: self.frames[t].clone(),
            identity: self.index.records[s].identity.clone(),
        })
    }
}

/// Parameters of a procedural mannequin dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub identities: usize,
    pub poses_per_identity: usize,
    pub image_size: usize,
    pub atlas_size: usize,
    /// 6 (one part per limb) or 24 (limbs split into DensePose-style parts).
    pub parts: usize,
    /// Fraction of identities listed in `test.txt` rather than `train.txt`.
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { identities: 20, poses_per_identity: 6, image_size: 64, atlas_size: 64, parts: 6, test_fraction: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Arm {
    Down,
    Out,
    Up,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Legs {
    Together,
    Apart,
    KickLeft,
    KickRight,
}

/// A straight limb segment: `len` texels along its axis and `wid` across.
/// Pixel `(y, x)` of local point `(r, c)` is `origin + r * along + c * across`.
#[derive(Clone, Copy, Debug)]
struct Segment {
    len: usize,
    wid: usize,
    origin: (isize, isize),
    along: (isize, isize),
    across: (isize, isize),
}

impl Segment {
    /// Inclusive pixel bounds `(y0, x0, y1, x1)`.
    fn bounds(&self) -> (isize, isize, isize, isize) {
        let a = self.pixel(0, 0);
        let b = self.pixel(self.len - 1, self.wid - 1);
        (a.0.min(b.0), a.1.min(b.1), a.0.max(b.0), a.1.max(b.1))
    }

    fn pixel(&self, r: usize, c: usize) -> (isize, isize) {
        let (r, c) = (r as isize, c as isize);
        (
            self.origin.0 + r * self.along.0 + c * self.across.0,
            self.origin.1 + r * self.along.1 + c * self.across.1,
        )
    }
}

/// DensePose-style labels for each of the six segments when split into 24
/// parts, ordered from the attachment point outwards.
const SPLIT_PARTS: [&[u8]; 6] =
    [&[23, 24], &[1, 2], &[15, 17, 19, 21, 4], &[16, 18, 20, 22, 3], &[8, 10, 12, 14, 5], &[7, 9, 11, 13, 6]];

struct Figure {
    cell: usize,
    head: usize,
    arm_w: usize,
    leg_w: usize,
}

impl Figure {
    fn new(cell: usize) -> Self {
        let head = ((cell as f64 * 0.8).round() as usize).max(2);
        let arm_w = ((cell as f64 * 0.3).round() as usize).max(1);
        let leg_w = ((cell as f64 * 0.4).round() as usize).max(1);
        Self { cell, head, arm_w, leg_w }
    }

    fn segments(&self, oy: isize, ox: isize, arms: [Arm; 2], legs: Legs) -> [Segment; 6] {
        let s = self.cell as isize;
        let (aw, lw) = (self.arm_w as isize, self.leg_w as isize);
        let ty = oy + self.head as isize;
        let head = Segment {
            len: self.head,
            wid: self.head,
            origin: (oy, ox + (s - self.head as isize) / 2),
            along: (1, 0),
            across: (0, 1),
        };
        let torso = Segment { len: self.cell, wid: self.cell, origin: (ty, ox), along: (1, 0), across: (0, 1) };
        let arm = |side: isize, state: Arm| {
            // side -1 is the figure's left (image left), +1 its right
            let near = if side < 0 { ox - 2 } else { ox + s + 1 };
            let seg = |origin, along, across| Segment { len: self.cell, wid: self.arm_w, origin, along, across };
            match state {
                Arm::Down => seg((ty, near - if side < 0 { aw - 1 } else { 0 }), (1, 0), (0, 1)),
                Arm::Out => seg((ty, near), (0, side), (1, 0)),
                Arm::Up => seg((ty - 1, near - if side < 0 { aw - 1 } else { 0 }), (-1, 0), (0, 1)),
            }
        };
        let hip = ty + s;
        let leg = |side: isize| {
            let gap = if legs == Legs::Apart { 0 } else { (s - 2 * lw) / 3 };
            let x = if side < 0 { ox + gap } else { ox + s - gap - lw };
            let kick = matches!((legs, side), (Legs::KickLeft, -1) | (Legs::KickRight, 1));
            if kick {
                let near = if side < 0 { ox - 1 } else { ox + s };
                Segment { len: self.cell, wid: self.leg_w, origin: (hip, near), along: (0, side), across: (1, 0) }
            } else {
                Segment { len: self.cell, wid: self.leg_w, origin: (hip, x), along: (1, 0), across: (0, 1) }
            }
        };
        [head, torso, arm(-1, arms[0]), arm(1, arms[1]), leg(-1), leg(1)]
    }
}

#[derive(Clone, Debug)]
struct PartTexture {
    base: [f64; 3],
    stripe: [f64; 3],
    period: usize,
    vertical: bool,
}

impl PartTexture {
    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut colour = || [0; 3].map(|_: i32| rng.random_range(0.1..0.9));
        let (base, stripe) = (colour(), colour());
        Self { base, stripe, period: rng.random_range(2..=4), vertical: rng.random_bool(0.5) }
    }

    fn at(&self, r: usize, c: usize) -> [f64; 3] {
        let t = if self.vertical { c } else { r };
        if (t / self.period) % 2 == 0 {
            self.base
        } else {
            self.stripe
        }
    }
}

/// Renders one mannequin frame. Pixels and texels are in one-to-one
/// correspondence, so texture extraction from it is collision-free.
fn render_frame(
    spec: &SynthSpec,
    figure: &Figure,
    textures: &[PartTexture],
    segments: &[Segment; 6],
) -> Result<(Image, DenseBodyMap)> {
    let n = spec.image_size;
    let mut image = Image::filled(n, n, [0.5, 0.5, 0.5]);
    let mut part = vec![0u8; n * n];
    let mut u = vec![0.0; n * n];
    let mut v = vec![0.0; n * n];
    let span = (figure.cell - 1) as f64;
    for (s, seg) in segments.iter().enumerate() {
        let labels: Vec<u8> = if spec.parts == 6 { vec![s as u8 + 1] } else { SPLIT_PARTS[s].to_vec() };
        let pieces = labels.len();
        for r in 0..seg.len {
            // piece p covers rows [p * len / pieces, (p + 1) * len / pieces)
            let p = r * pieces / seg.len;
            let r0 = (p * seg.len).div_ceil(pieces);
            let local_r = r - r0;
            let k = labels[p];
            for c in 0..seg.wid {
                let (y, x) = seg.pixel(r, c);
                if y < 0 || x < 0 || y as usize >= n || x as usize >= n {
                    return Err(Error::InvalidArgument("mannequin does not fit in the image".into()));
                }
                let i = y as usize * n + x as usize;
                if part[i] != 0 {
                    return Err(Error::InvalidArgument("mannequin segments overlap".into()));
                }
                part[i] = k;
                // quantize exactly as the IUV raster will
                u[i] = (c as f64 / span * 255.0).round() / 255.0;
                v[i] = (local_r as f64 / span * 255.0).round() / 255.0;
                image.set_pixel(y as usize, x as usize, textures[k as usize - 1].at(local_r, c));
            }
        }
    }
    Ok((image, DenseBodyMap::new(n, n, spec.parts, part, u, v)?))
}

fn random_pose<R: Rng + ?Sized>(rng: &mut R) -> ([Arm; 2], Legs) {
    let arms = [Arm::Down, Arm::Out, Arm::Up];
    let legs = [Legs::Together, Legs::Apart, Legs::KickLeft, Legs::KickRight];
    ([*arms.choose(rng).expect("nonempty"), *arms.choose(rng).expect("nonempty")], *legs.choose(rng).expect("nonempty"))
}

/// Random figure origin that keeps every segment inside the image.
fn place<R: Rng + ?Sized>(segments: &[Segment; 6], size: usize, rng: &mut R) -> Result<(isize, isize)> {
    let (mut y0, mut x0, mut y1, mut x1) = segments[0].bounds();
    for seg in &segments[1..] {
        let b = seg.bounds();
        (y0, x0, y1, x1) = (y0.min(b.0), x0.min(b.1), y1.max(b.2), x1.max(b.3));
    }
    let n = size as isize;
    if y1 - y0 >= n || x1 - x0 >= n {
        return Err(Error::InvalidArgument(format!("{size} px image too small for the mannequin")));
    }
    let oy = rng.random_range(-y0 as i64..=(n - 1 - y1) as i64) as isize;
    let ox = rng.random_range(-x0 as i64..=(n - 1 - x1) as i64) as isize;
    Ok((oy, ox))
}

/// Writes a mannequin dataset under `root`. Identical `spec` and rng state
/// produce byte-identical files.
pub fn make_synthetic_dataset<R: Rng + ?Sized>(spec: &SynthSpec, root: &Path, rng: &mut R) -> Result<()> {
    if spec.parts != 6 && spec.parts != 24 {
        return Err(Error::InvalidArgument(format!("synthetic data supports 6 or 24 parts, not {}", spec.parts)));
    }
    if spec.identities == 0 || spec.poses_per_identity == 0 {
        return Err(Error::InvalidArgument("need at least one identity and one pose".into()));
    }
    if !(0.0..=1.0).contains(&spec.test_fraction) {
        return Err(Error::InvalidArgument("test_fraction outside [0, 1]".into()));
    }
    let cell = AtlasLayout::new(spec.atlas_size)?.cell();
    if spec.parts == 24 && cell < 5 {
        return Err(Error::InvalidArgument("atlas too small to split limbs into five parts".into()));
    }
    let figure = Figure::new(cell);
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_test = (spec.identities as f64 * spec.test_fraction).round() as usize;
    for id in 0..spec.identities {
        let name = format!("id{id:03}");
        let textures: Vec<PartTexture> = (0..spec.parts).map(|_| PartTexture::random(rng)).collect();
        let dir = root.join(&name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for f in 0..spec.poses_per_identity {
            let (arms, legs) = random_pose(rng);
            let (oy, ox) = place(&figure.segments(0, 0, arms, legs), spec.image_size, rng)?;
            let segs = figure.segments(oy, ox, arms, legs);
            let (image, map) = render_frame(spec, &figure, &textures, &segs)?;
            let stem = format!("f{f:02}");
            image.save_png(&dir.join(format!("{stem}{IMAGE_SUFFIX}")))?;
            let iuv_path = dir.join(format!("{stem}{IUV_SUFFIX}"));
            let raster = encode_iuv(&map);
            debug_assert_eq!(decode_iuv(&raster, spec.parts).as_ref().ok(), Some(&map));
            raster.save(&iuv_path).map_err(|source| Error::Image { path: iuv_path, source })?;
        }
        if id >= spec.identities - n_test {
            test.push(name);
        } else {
            train.push(name);
        }
    }
    for (split, ids) in [("train", &train), ("test", &test)] {
        let path = root.join(format!("{split}.txt"));
        let mut text = ids.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let meta = root.join("synth.json");
    std::fs::write(&meta, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&meta, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{extract_texture, foreground_mask, render_texture};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> SynthSpec {
        SynthSpec { identities: 3, poses_per_identity: 4, test_fraction: 1.0 / 3.0, ..SynthSpec::default() }
    }

    fn write(spec: &SynthSpec, seed: u64) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        make_synthetic_dataset(spec, dir.path(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        dir
    }

    fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        for entry in walk(root) {
            out.push((entry.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&entry).unwrap()));
        }
        out
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut files = Vec::new();
        for p in read_dir_sorted(dir).unwrap() {
            if p.is_dir() {
                files.extend(walk(&p));
            } else {
                files.push(p);
            }
        }
        files
    }

    #[test]
    fn synthetic_dataset_is_reproducible() {
        let spec = small_spec();
        assert_eq!(tree(write(&spec, 4).path()), tree(write(&spec, 4).path()));
    }

    #[test]
    fn synthetic_maps_are_valid_and_round_trip() {
        for parts in [6, 24] {
            let spec = SynthSpec { parts, ..small_spec() };
            let dir = write(&spec, 5);
            let ds = Dataset::load(dir.path(), None, parts).unwrap();
            assert_eq!(ds.index.len(), 12);
            for f in ds.frames() {
                let atlas = extract_texture(&f.image, &f.map, spec.atlas_size).unwrap();
                let back = render_texture(&atlas, &f.map);
                let fg = foreground_mask(&f.map);
                assert_eq!(atlas.filled_count(), fg.count(), "collision-free");
                for y in 0..f.map.height() {
                    for x in 0..f.map.width() {
                        if fg.get(y, x) {
                            assert_eq!(back.pixel(y, x), f.image.pixel(y, x));
                        }
                    }
                }
                let present: std::collections::BTreeSet<u8> = f.map.parts().iter().copied().filter(|&p| p > 0).collect();
                assert_eq!(present.len(), parts);
            }
        }
    }

    #[test]
    fn identity_colours_persist_across_poses() {
        let dir = write(&small_spec(), 6);
        let ds = Dataset::load(dir.path(), None, 6).unwrap();
        for id in ds.index.identities() {
            let recs = ds.index.records_of(id);
            let atlases: Vec<_> =
                recs.iter().map(|&r| extract_texture(&ds.frame(r).image, &ds.frame(r).map, 64).unwrap()).collect();
            for a in &atlases[1..] {
                for (i, (&fa, &fb)) in a.filled().iter().zip(atlases[0].filled()).enumerate() {
                    if fa && fb {
                        assert_eq!(a.texels()[i * 3..i * 3 + 3], atlases[0].texels()[i * 3..i * 3 + 3]);
                    }
                }
            }
        }
    }

    #[test]
    fn split_manifests() {
        let dir = write(&small_spec(), 7);
        let train = load_index(dir.path(), Some("train")).unwrap();
        let test = load_index(dir.path(), Some("test")).unwrap();
        assert_eq!(train.identities().count(), 2);
        assert_eq!(test.identities().collect::<Vec<_>>(), vec!["id002"]);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load_index(dir.path(), None).unwrap_err().class(), "dataset");
    }

    fn fixture(frames: &[(&str, &str, bool)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::zeros(2, 2);
        let map = DenseBodyMap::background(2, 2, 6).unwrap();
        for (id, frame, with_iuv) in frames {
            let d = dir.path().join(id);
            std::fs::create_dir_all(&d).unwrap();
            img.save_png(&d.join(format!("{frame}{IMAGE_SUFFIX}"))).unwrap();
            if *with_iuv {
                encode_iuv(&map).save(d.join(format!("{frame}{IUV_SUFFIX}"))).unwrap();
            }
        }
        dir
    }

    #[test]
    fn fixture_index_size_and_filtering() {
        let dir = fixture(&[
            ("a", "0", true),
            ("a", "1", true),
            ("b", "0", true),
            ("b", "1", true),
            ("b", "2", false),
            ("c", "0", true),
            ("c", "1", true),
        ]);
        let idx = load_index(dir.path(), None).unwrap();
        assert_eq!(idx.len(), 6);
        assert_eq!(idx.pairable(), &["a", "b", "c"]);
    }

    #[test]
    fn single_frame_identity_is_not_pairable() {
        let dir = fixture(&[("a", "0", true), ("a", "1", true), ("solo", "0", true)]);
        let idx = load_index(dir.path(), None).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.pairable(), &["a"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (s, t) = sample_pair(&idx, &mut rng).unwrap();
            assert_ne!(s, t);
            assert_eq!(idx.records()[s].identity, "a");
        }
    }

    #[test]
    fn two_frame_identity_always_gives_that_pair() {
        let dir = fixture(&[("a", "0", true), ("a", "1", true)]);
        let idx = load_index(dir.path(), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (s, t) = sample_pair(&idx, &mut rng).unwrap();
            assert_eq!([s.min(t), s.max(t)], [0, 1]);
        }
    }

    #[test]
    fn identity_frequencies_are_uniform() {
        let dir = fixture(&[("a", "0", true), ("a", "1", true), ("b", "0", true), ("b", "1", true), ("b", "2", true)]);
        let idx = load_index(dir.path(), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let hits = (0..n).filter(|_| idx.records()[sample_pair(&idx, &mut rng).unwrap().0].identity == "a").count();
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((hits as f64 - n as f64 / 2.0).abs() < 3.0 * sigma, "{hits}");
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_pair(&idx, &mut r1).unwrap(), sample_pair(&idx, &mut r2).unwrap());
    }
}
