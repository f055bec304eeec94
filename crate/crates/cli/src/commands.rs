use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use partwarp_core::atlas::{extract_texture, load_iuv, DenseBodyMap};
use partwarp_core::config::RunConfig;
use partwarp_core::data::{make_synthetic_dataset, Dataset};
use partwarp_core::evaluation::{eval_report, pairwise_perceptual_diversity, write_report, Diversity};
use partwarp_core::inference::{
    encode_with, garment_transfer, interpolate_images, part_sample, pose_transfer, sample_appearance, write_grid,
    Generated, GridManifest, TileInfo,
};
use partwarp_core::latent::PartLatent;
use partwarp_core::losses::StubExtractor;
use partwarp_core::networks::ModelBundle;
use partwarp_core::raster::Image;
use partwarp_core::training::{Trainer, LAST_CHECKPOINT, METRICS_FILE, TIMING_FILE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{Command, Common, Model};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] partwarp_core::Error),
    #[error("checkpoint {0} does not exist")]
    MissingCheckpoint(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.class(),
            CliError::MissingCheckpoint(_) => "missing-checkpoint",
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.into(), source }
}

/// Record of one invocation, written as `manifest.json` in the output dir.
#[derive(Debug, Default, Serialize)]
struct Manifest {
    command: &'static str,
    seed: u64,
    config: &'static str,
    inputs: BTreeMap<String, String>,
    artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    tiles: Vec<TileInfo>,
}

struct Session {
    cfg: RunConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Session {
    fn open(command: &'static str, common: &Common) -> Result<Self> {
        let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.set)?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(root) = &common.data {
            cfg.data.root = Some(root.clone());
        }
        std::fs::create_dir_all(&common.out).map_err(|e| io(&common.out, e))?;
        let manifest = Manifest { command, seed: cfg.seed, config: CONFIG_COPY, ..Manifest::default() };
        Ok(Self { cfg, out: common.out.clone(), manifest })
    }

    fn input(&mut self, key: &str, value: impl ToString) {
        self.manifest.inputs.insert(key.into(), value.to_string());
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed)
    }

    fn dataset(&self) -> Result<Dataset> {
        let root = self.cfg.data_root()?;
        Ok(Dataset::load(root, self.cfg.data.split.as_deref(), self.cfg.net.parts)?)
    }

    fn bundle(&mut self, model: &Model) -> Result<ModelBundle> {
        if !model.checkpoint.exists() {
            return Err(CliError::MissingCheckpoint(model.checkpoint.clone()));
        }
        self.input("checkpoint", model.checkpoint.display());
        Ok(ModelBundle::load(&model.checkpoint, Some(&self.cfg.net))?)
    }

    fn grid(&mut self, stem: &str, outputs: &[Generated], tiles: Vec<TileInfo>) -> Result<()> {
        let (path, grid) = write_grid(&self.out, stem, outputs, tiles, self.cfg.inference.columns)?;
        self.manifest.artifacts.push(grid.grid.clone());
        self.manifest.artifacts.push(file_name(&path));
        for t in &grid.tiles {
            self.manifest.artifacts.push(t.file.clone());
        }
        self.manifest.tiles = grid.tiles;
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let cfg_path = self.out.join(CONFIG_COPY);
        std::fs::write(&cfg_path, self.cfg.to_toml()?).map_err(|e| io(&cfg_path, e))?;
        let path = self.out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(partwarp_core::Error::from)?;
        std::fs::write(&path, text).map_err(|e| io(&path, e))?;
        info!("wrote {}", path.display());
        Ok(())
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `<stem>.img.png` + `<stem>.iuv.png`; either file name also works.
fn frame_stem(arg: &str) -> String {
    arg.strip_suffix(".img.png").or_else(|| arg.strip_suffix(".iuv.png")).unwrap_or(arg).to_string()
}

fn load_frame(arg: &str, parts: usize) -> Result<(Image, DenseBodyMap)> {
    let stem = frame_stem(arg);
    let image = Image::load_png(Path::new(&format!("{stem}.img.png")))?;
    let map = load_iuv(Path::new(&format!("{stem}.iuv.png")), parts)?;
    Ok((image, map))
}

/// A pose: an IUV png path, or a frame stem.
fn load_pose(arg: &str, parts: usize) -> Result<DenseBodyMap> {
    let path = if arg.ends_with(".png") && !arg.ends_with(".img.png") {
        PathBuf::from(arg)
    } else {
        PathBuf::from(format!("{}.iuv.png", frame_stem(arg)))
    };
    Ok(load_iuv(&path, parts)?)
}

fn tile(mode: &str) -> TileInfo {
    TileInfo { mode: mode.into(), ..TileInfo::default() }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData { common } => {
            let mut s = Session::open("synth-data", &common)?;
            let spec = s.cfg.synth.clone();
            make_synthetic_dataset(&spec, &s.out, &mut s.rng())?;
            s.manifest.artifacts.extend(["train.txt", "test.txt", "synth.json"].map(String::from));
            s.input("identities", spec.identities);
            s.input("poses_per_identity", spec.poses_per_identity);
            s.finish()
        }
        Command::ExtractTexture { common, frame } => {
            let mut s = Session::open("extract-texture", &common)?;
            let (image, map) = load_frame(&frame, s.cfg.net.parts)?;
            let atlas = extract_texture(&image, &map, s.cfg.net.atlas_size)?;
            atlas.save(&s.out.join("atlas"))?;
            s.input("frame", &frame);
            s.input("filled_texels", atlas.filled_count());
            s.manifest.artifacts.extend(["atlas.png", "atlas.mask.png"].map(String::from));
            s.finish()
        }
        Command::Train { common, steps, resume } => {
            let mut s = Session::open("train", &common)?;
            if let Some(n) = steps {
                s.cfg.train.steps = n;
            }
            let data = s.dataset()?;
            let config = s.cfg.train_config();
            let head = s.cfg.part_groups()?.head();
            let mut trainer = match &resume {
                Some(path) if !path.exists() => return Err(CliError::MissingCheckpoint(path.clone())),
                Some(path) => {
                    s.input("resume", path.display());
                    Trainer::resume(path, config, head)?
                }
                None => Trainer::new(config, head)?,
            };
            let log = trainer.run(&data, Some(&s.out))?;
            if let Some(last) = log.last() {
                info!("finished at step {} with total_ge {}", trainer.step(), last.total_ge);
            }
            let root = s.cfg.data_root()?.display().to_string();
            s.input("data", root);
            s.input("steps", trainer.step());
            s.manifest.artifacts.extend([METRICS_FILE, TIMING_FILE, LAST_CHECKPOINT].map(String::from));
            s.finish()
        }
        Command::Sample { common, model, pose, n } => {
            let mut s = Session::open("sample", &common)?;
            let bundle = s.bundle(&model)?;
            let map = load_pose(&pose, bundle.config.parts)?;
            let n = n.unwrap_or(s.cfg.inference.n);
            let out = sample_appearance(&bundle, &map, n, &mut s.rng())?;
            let seed = s.cfg.seed;
            let tiles = (0..n).map(|_| TileInfo { seed: Some(seed), pose: Some(pose.clone()), ..tile("sample") }).collect();
            s.input("pose", &pose);
            s.grid("sample", &out, tiles)?;
            s.finish()
        }
        Command::Transfer { common, model, source, targets } => {
            let mut s = Session::open("transfer", &common)?;
            let bundle = s.bundle(&model)?;
            let parts = bundle.config.parts;
            let (image, map) = load_frame(&source, parts)?;
            let maps = targets.iter().map(|t| load_pose(t, parts)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = maps.iter().collect();
            let out = pose_transfer(&bundle, (&image, &map), &refs, s.cfg.inference.encoding)?;
            let tiles = targets.iter().map(|t| TileInfo { pose: Some(t.clone()), ..tile("transfer") }).collect();
            s.input("source", &source);
            s.grid("transfer", &out, tiles)?;
            s.finish()
        }
        Command::Parts { common, model, pose, group, n, source } => {
            let mut s = Session::open("parts", &common)?;
            let bundle = s.bundle(&model)?;
            let cfg = bundle.config.clone();
            let map = load_pose(&pose, cfg.parts)?;
            let group = group.unwrap_or_else(|| s.cfg.inference.group.clone());
            let ids = s.cfg.part_groups()?.resolve(&group)?;
            let n = n.unwrap_or(s.cfg.inference.n);
            let mut rng = s.rng();
            let base = match &source {
                Some(src) => {
                    let (image, smap) = load_frame(src, cfg.parts)?;
                    s.input("source", src);
                    encode_with(&bundle, &image, &smap, s.cfg.inference.encoding)?
                }
                None => PartLatent::standard_normal(cfg.parts, cfg.latent_dim, &mut rng),
            };
            let out = part_sample(&bundle, &map, &base, &ids, n, &mut rng)?;
            let seed = s.cfg.seed;
            let tiles = (0..n)
                .map(|_| TileInfo { seed: Some(seed), group: Some(group.clone()), pose: Some(pose.clone()), ..tile("parts") })
                .collect();
            s.input("pose", &pose);
            s.input("group", &group);
            s.input("parts", format!("{ids:?}"));
            s.grid("parts", &out, tiles)?;
            s.finish()
        }
        Command::Garment { common, model, body, garment, group, pose } => {
            let mut s = Session::open("garment", &common)?;
            let bundle = s.bundle(&model)?;
            let parts = bundle.config.parts;
            let group = group.unwrap_or_else(|| s.cfg.inference.group.clone());
            let ids = s.cfg.part_groups()?.resolve(&group)?;
            let (bi, bm) = load_frame(&body, parts)?;
            let (gi, gm) = load_frame(&garment, parts)?;
            let target = load_pose(&pose, parts)?;
            let out = garment_transfer(&bundle, (&bi, &bm), (&gi, &gm), &ids, &target, s.cfg.inference.encoding)?;
            s.input("body", &body);
            s.input("garment", &garment);
            s.input("group", &group);
            let t = TileInfo { group: Some(group.clone()), pose: Some(pose.clone()), ..tile("garment") };
            s.grid("garment", &[out], vec![t])?;
            s.finish()
        }
        Command::Interp { common, model, first, second, pose, steps } => {
            let mut s = Session::open("interp", &common)?;
            let bundle = s.bundle(&model)?;
            let parts = bundle.config.parts;
            let (i1, m1) = load_frame(&first, parts)?;
            let (i2, m2) = load_frame(&second, parts)?;
            let display = load_pose(&pose, parts)?;
            let steps = steps.unwrap_or(s.cfg.inference.steps);
            let out = interpolate_images(&bundle, (&i1, &m1), (&i2, &m2), &display, steps, s.cfg.inference.encoding)?;
            let tiles = out.iter().map(|(t, _)| TileInfo { t: Some(*t), pose: Some(pose.clone()), ..tile("interp") }).collect();
            let images: Vec<Generated> = out.into_iter().map(|(_, g)| g).collect();
            s.input("first", &first);
            s.input("second", &second);
            s.grid("interp", &images, tiles)?;
            s.finish()
        }
        Command::Eval { common, checkpoint, samples } => {
            let mut s = Session::open("eval", &common)?;
            let fx = StubExtractor::default();
            match checkpoint {
                Some(ck) => {
                    let bundle = s.bundle(&Model { checkpoint: ck })?;
                    let data = s.dataset()?;
                    let groups = s.cfg.part_groups()?;
                    let report = eval_report(&bundle, &data, &groups, &fx, &s.cfg.eval, s.cfg.seed)?;
                    write_report(&s.out, &report)?;
                    s.manifest.artifacts.extend(["report.json", "diversity.csv"].map(String::from));
                }
                None => {
                    let report = sample_dir_diversity(&samples, &fx)?;
                    let path = s.out.join("report.json");
                    let text = serde_json::to_string_pretty(&report).map_err(partwarp_core::Error::from)?;
                    std::fs::write(&path, text).map_err(|e| io(&path, e))?;
                    for d in &samples {
                        s.manifest.inputs.insert(format!("samples:{}", d.display()), String::new());
                    }
                    s.manifest.artifacts.push("report.json".into());
                }
            }
            s.finish()
        }
    }
}

#[derive(Debug, Serialize)]
struct SampleDiversityReport {
    extractor: &'static str,
    poses: Vec<String>,
    samples_per_pose: Vec<usize>,
    diversity: Diversity,
}

/// Pools tiles by pose across sample directories and measures diversity.
fn sample_dir_diversity(dirs: &[PathBuf], fx: &StubExtractor) -> Result<SampleDiversityReport> {
    let mut by_pose: BTreeMap<String, Vec<Image>> = BTreeMap::new();
    for dir in dirs {
        let grid = find_grid(dir)?;
        for t in grid.tiles {
            let image = Image::load_png(&dir.join(&t.file))?;
            by_pose.entry(t.pose.unwrap_or_default()).or_default().push(image);
        }
    }
    by_pose.retain(|_, v| v.len() >= 2);
    if by_pose.is_empty() {
        return Err(CliError::Usage("no pose has two or more samples across the given directories".into()));
    }
    let poses: Vec<String> = by_pose.keys().cloned().collect();
    let samples_per_pose = by_pose.values().map(Vec::len).collect();
    let sets: Vec<Vec<Image>> = by_pose.into_values().collect();
    let diversity = pairwise_perceptual_diversity(&sets, fx)?;
    Ok(SampleDiversityReport { extractor: "stub", poses, samples_per_pose, diversity })
}

/// The grid manifest of a sample directory: `sample.json` or `parts.json`.
fn find_grid(dir: &Path) -> Result<GridManifest> {
    for stem in ["sample", "parts", "transfer", "interp", "garment"] {
        let p = dir.join(format!("{stem}.json"));
        if p.exists() {
            return Ok(GridManifest::load(&p)?);
        }
    }
    Err(CliError::Usage(format!("{} holds no grid manifest", dir.display())))
}
