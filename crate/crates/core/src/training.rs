//! Adversarial training of encoder + generator against the discriminator.
//!
//! Every step draws its randomness from a ChaCha stream keyed by
//! `(seed, step)`, so a run resumed from a checkpoint continues exactly as
//! the uninterrupted run would have.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use partwarp_autodiff::{Adam, AdamConfig, Bind, ParamId, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::atlas::extract_texture;
use crate::data::{Dataset, TrainSample};
use crate::error::{Error, Result};
use crate::latent::{kl_var, sample_reparam_var, warp_broadcast_var};
use crate::losses::{
    face_identity_loss, feature_matching_loss, lsgan_d_loss, lsgan_g_loss, perceptual_loss, total_loss, FaceEmbedder,
    FeatureExtractor, LossTerms, LossWeights, StubExtractor, StubFaceEmbedder,
};
use crate::networks::{
    encoder_input, Checkpoint, ModelBundle, NetConfig, DISCRIMINATOR_PREFIX, ENCODER_PREFIX, GENERATOR_PREFIX,
};
use crate::raster::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub weights: LossWeights,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1,
            steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.weights.validate()?;
        self.net.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// Loss terms (unweighted) and gradient norms of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub vgg: f64,
    pub face: f64,
    pub adv_g: f64,
    pub fm: f64,
    pub kl: f64,
    pub adv_d: f64,
    pub total_ge: f64,
    pub total_d: f64,
    pub grad_norm_ge: f64,
    pub grad_norm_d: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,vgg,face,adv_g,fm,kl,adv_d,total_ge,total_d,grad_norm_ge,grad_norm_d";

    pub fn terms(&self) -> LossTerms<f64> {
        LossTerms { vgg: self.vgg, face: self.face, adv_g: self.adv_g, fm: self.fm, kl: self.kl, adv_d: self.adv_d }
    }

    /// Values print with shortest round-trip formatting, so equal metrics
    /// give byte-equal rows.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.vgg,
            self.face,
            self.adv_g,
            self.fm,
            self.kl,
            self.adv_d,
            self.total_ge,
            self.total_d,
            self.grad_norm_ge,
            self.grad_norm_d
        )
    }
}

/// The random stream for `step` under `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

fn finite(term: &'static str, value: f64, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged { term, step })
    }
}

pub struct Trainer {
    pub bundle: ModelBundle,
    pub config: TrainConfig,
    opt_ge: Adam,
    opt_d: Adam,
    ge_ids: Vec<ParamId>,
    d_ids: Vec<ParamId>,
    fx: Box<dyn FeatureExtractor>,
    fe: Box<dyn FaceEmbedder>,
    head: Vec<u8>,
}

impl Trainer {
    /// Fresh networks initialized from `config.seed`. `head` lists the part
    /// indices cropped for the face loss.
    pub fn new(config: TrainConfig, head: Vec<u8>) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::init(config.net.clone(), config.seed)?;
        Ok(Self::with_bundle(bundle, config, head))
    }

    fn with_bundle(bundle: ModelBundle, config: TrainConfig, head: Vec<u8>) -> Self {
        let mut ge_ids = bundle.param_ids(ENCODER_PREFIX);
        ge_ids.extend(bundle.param_ids(GENERATOR_PREFIX));
        let d_ids = bundle.param_ids(DISCRIMINATOR_PREFIX);
        let opt_ge = Adam::new(config.adam(), &bundle.params, ge_ids.clone());
        let opt_d = Adam::new(config.adam(), &bundle.params, d_ids.clone());
        Self {
            bundle,
            config,
            opt_ge,
            opt_d,
            ge_ids,
            d_ids,
            fx: Box::new(StubExtractor::default()),
            fe: Box::new(StubFaceEmbedder::default()),
            head,
        }
    }

    pub fn with_extractors(mut self, fx: Box<dyn FeatureExtractor>, fe: Box<dyn FaceEmbedder>) -> Self {
        self.fx = fx;
        self.fe = fe;
        self
    }

    pub fn step(&self) -> u64 {
        self.bundle.step
    }

    /// One discriminator update followed by one encoder + generator update.
    pub fn train_step(&mut self, batch: &[TrainSample], rng: &mut ChaCha8Rng) -> Result<StepMetrics> {
        self.train_step_observed(batch, rng, |_| {})
    }

    /// [`Trainer::train_step`], calling `after_d` between the two updates.
    fn train_step_observed(
        &mut self,
        batch: &[TrainSample],
        rng: &mut ChaCha8Rng,
        mut after_d: impl FnMut(&ParamStore),
    ) -> Result<StepMetrics> {
        let cfg = &self.bundle.config;
        let step = self.bundle.step;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let size = cfg.image_size;
        for s in batch {
            for f in [&s.source, &s.target] {
                if (f.image.height(), f.image.width()) != (size, size) {
                    return Err(Error::Shape(format!(
                        "{}x{} frame for a {size} px model",
                        f.image.height(),
                        f.image.width()
                    )));
                }
            }
        }
        let b = batch.len();
        let atlases = batch
            .iter()
            .map(|s| extract_texture(&s.source.image, &s.source.map, cfg.atlas_size))
            .collect::<Result<Vec<_>>>()?;
        let atlas_refs: Vec<_> = atlases.iter().collect();
        let target_maps: Vec<_> = batch.iter().map(|s| &s.target.map).collect();
        let targets: Vec<&Image> = batch.iter().map(|s| &s.target.image).collect();
        let eps = Tensor::from_fn([b, cfg.parts, cfg.latent_dim], |_| StandardNormal.sample(rng));

        let tape = Tape::new();
        let real = tape.constant(Image::batch_signed(&targets));
        let (mu, log_var, fake, z_img) = {
            let bind = Bind::trainable(&self.bundle.params);
            let x = tape.constant(encoder_input(&atlas_refs));
            let (mu, log_var) = self.bundle.encoder().forward(&bind, &tape, x);
            let z = sample_reparam_var(mu, log_var, eps);
            let z_img = warp_broadcast_var(&tape, z, &target_maps, cfg.noparts);
            let fake = self.bundle.generator().forward(&bind, &tape, z_img);
            (mu, log_var, fake, z_img)
        };
        let cond = z_img.detach();
        let w = self.config.weights;

        // discriminator update against the current generator output
        let (adv_d, total_d, grad_norm_d) = {
            let bind = Bind::trainable(&self.bundle.params);
            let d = self.bundle.discriminator();
            let real_logits: Vec<_> = d.forward(&bind, &tape, real, cond).iter().map(|o| o.logits).collect();
            let fake_logits: Vec<_> = d.forward(&bind, &tape, fake.detach(), cond).iter().map(|o| o.logits).collect();
            let adv_d = lsgan_d_loss(&tape, &real_logits, &fake_logits);
            let objective = adv_d * w.adv;
            let adv_d_value = finite("adv_d", adv_d.item(), step)?;
            let grads = tape.backward(objective);
            let norm = grads.norm_of(&self.d_ids);
            self.opt_d.step(&mut self.bundle.params, &grads);
            (adv_d_value, objective.item(), norm)
        };
        after_d(&self.bundle.params);

        // encoder + generator update against the updated, frozen discriminator
        let bind = Bind::frozen(&self.bundle.params);
        let d = self.bundle.discriminator();
        let on_real = d.forward(&bind, &tape, real, cond);
        let on_fake = d.forward(&bind, &tape, fake, cond);
        let fake_logits: Vec<_> = on_fake.iter().map(|o| o.logits).collect();
        let real_feats: Vec<_> = on_real.into_iter().map(|o| o.features).collect();
        let fake_feats: Vec<_> = on_fake.into_iter().map(|o| o.features).collect();
        let terms = LossTerms {
            vgg: perceptual_loss(self.fx.as_ref(), &tape, fake, real),
            face: face_identity_loss(self.fe.as_ref(), &tape, fake, real, &target_maps, &self.head),
            adv_g: lsgan_g_loss(&tape, &fake_logits),
            fm: feature_matching_loss(&tape, &real_feats, &fake_feats),
            kl: kl_var(mu, log_var).scale(1.0 / b as f64),
            adv_d: tape.constant(Tensor::scalar(adv_d)),
        };
        let (objective, _) = total_loss(&terms, &w);
        let vgg = finite("vgg", terms.vgg.item(), step)?;
        let face = finite("face", terms.face.item(), step)?;
        let adv_g = finite("adv_g", terms.adv_g.item(), step)?;
        let fm = finite("fm", terms.fm.item(), step)?;
        let kl = finite("kl", terms.kl.item(), step)?;
        let total_ge = finite("total_ge", objective.item(), step)?;
        let grads = tape.backward(objective);
        let grad_norm_ge = grads.norm_of(&self.ge_ids);
        self.opt_ge.step(&mut self.bundle.params, &grads);
        self.bundle.step += 1;
        Ok(StepMetrics { step, vgg, face, adv_g, fm, kl, adv_d, total_ge, total_d, grad_norm_ge, grad_norm_d })
    }
}

const ADAM_GE: &str = "adam/ge";
const ADAM_D: &str = "adam/d";

fn save_adam(ck: &mut Checkpoint, key: &str, opt: &Adam, params: &ParamStore) {
    ck.metadata.insert(format!("{key}/step"), opt.step.to_string());
    for (slot, &id) in opt.params().iter().enumerate() {
        let name = params.name(id);
        ck.tensors.insert(format!("{key}/m/{name}"), opt.first_moment[slot].clone());
        ck.tensors.insert(format!("{key}/v/{name}"), opt.second_moment[slot].clone());
    }
}

fn load_adam(ck: &mut Checkpoint, key: &str, opt: &mut Adam, params: &ParamStore, path: &Path) -> Result<()> {
    opt.step = ck
        .meta(&format!("{key}/step"), path)?
        .parse()
        .map_err(|_| Error::Checkpoint { path: path.into(), reason: format!("bad {key}/step") })?;
    let ids = opt.params().to_vec();
    for (slot, id) in ids.into_iter().enumerate() {
        let name = params.name(id);
        for (kind, buf) in [("m", &mut opt.first_moment[slot]), ("v", &mut opt.second_moment[slot])] {
            let t = ck.take(&format!("{key}/{kind}/{name}"), path)?;
            if t.shape() != buf.shape() {
                return Err(Error::Checkpoint { path: path.into(), reason: format!("{key}/{kind}/{name} has wrong shape") });
            }
            *buf = t;
        }
    }
    Ok(())
}

impl Trainer {
    /// Networks plus optimizer state, enough to continue training exactly.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.bundle.to_checkpoint()?;
        ck.metadata.insert("train_config".into(), serde_json::to_string(&self.config)?);
        save_adam(&mut ck, ADAM_GE, &self.opt_ge, &self.bundle.params);
        save_adam(&mut ck, ADAM_D, &self.opt_d, &self.bundle.params);
        Ok(ck)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Continues from a checkpoint written by [`Trainer::save_checkpoint`].
    /// The network configuration and seed must match `config`; the step
    /// budget and cadence may change.
    pub fn resume(path: &Path, config: TrainConfig, head: Vec<u8>) -> Result<Self> {
        config.validate()?;
        let mut ck = Checkpoint::load(path)?;
        let stored: TrainConfig = serde_json::from_str(ck.meta("train_config", path)?)
            .map_err(|e| Error::Checkpoint { path: path.into(), reason: format!("train_config: {e}") })?;
        if stored.seed != config.seed {
            return Err(Error::ConfigMismatch(format!(
                "{} was trained with seed {}, run config asks for {}",
                path.display(),
                stored.seed,
                config.seed
            )));
        }
        if stored.weights != config.weights || stored.batch_size != config.batch_size {
            log::warn!("resuming {} with different loss weights or batch size", path.display());
        }
        let bundle = ModelBundle::from_checkpoint(&mut ck, path, Some(&config.net))?;
        let mut trainer = Self::with_bundle(bundle, config, head);
        load_adam(&mut ck, ADAM_GE, &mut trainer.opt_ge, &trainer.bundle.params, path)?;
        load_adam(&mut ck, ADAM_D, &mut trainer.opt_d, &trainer.bundle.params, path)?;
        Ok(trainer)
    }

    /// Draws the batch for the current step from the step's stream and
    /// trains on it.
    pub fn step_on(&mut self, dataset: &Dataset) -> Result<StepMetrics> {
        let mut rng = step_rng(self.config.seed, self.bundle.step);
        let batch = (0..self.config.batch_size).map(|_| dataset.sample(&mut rng)).collect::<Result<Vec<_>>>()?;
        self.train_step(&batch, &mut rng)
    }

    /// Trains until `config.steps` total steps, writing logs and checkpoints
    /// under `out_dir` when given.
    pub fn run(&mut self, dataset: &Dataset, out_dir: Option<&Path>) -> Result<Vec<StepMetrics>> {
        if dataset.index.pairable().is_empty() {
            return Err(Error::Dataset("no identity has two frames to pair".into()));
        }
        let size = self.bundle.config.image_size;
        if dataset.image_size() != (size, size) {
            let (h, w) = dataset.image_size();
            return Err(Error::Shape(format!("dataset frames are {h}x{w}, model expects {size}x{size}")));
        }
        let mut log = match out_dir {
            Some(dir) => Some(MetricsLog::open(dir, self.bundle.step)?),
            None => None,
        };
        let mut rows = Vec::new();
        while self.bundle.step < self.config.steps {
            let started = Instant::now();
            let m = self.step_on(dataset)?;
            if let Some(log) = log.as_mut() {
                log.append(&m, started.elapsed().as_secs_f64())?;
            }
            if m.step % 50 == 0 {
                info!("step {} total_ge {:.4} total_d {:.4} vgg {:.4}", m.step, m.total_ge, m.total_d, m.vgg);
            }
            rows.push(m);
            let every = self.config.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && self.bundle.step % every == 0 {
                    self.save_checkpoint(&dir.join(format!("ckpt_{:06}.safetensors", self.bundle.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save_checkpoint(&dir.join(LAST_CHECKPOINT))?;
        }
        Ok(rows)
    }
}

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";

/// Append-only CSV logs. Wall time goes to its own file so the metrics file
/// stays byte-identical across runs.
struct MetricsLog {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    metrics_path: PathBuf,
    timing_path: PathBuf,
}

/// Keeps the header and rows with `step < upto`, so rows written after the
/// checkpoint being resumed from are dropped.
fn truncate_log(path: &Path, header: &str, upto: u64) -> Result<()> {
    let kept = match std::fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < upto))
            .map(|l| format!("{l}\n"))
            .collect::<String>(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    std::fs::write(path, format!("{header}\n{kept}")).map_err(|e| Error::io(path, e))
}

impl MetricsLog {
    fn open(dir: &Path, start_step: u64) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics_path = dir.join(METRICS_FILE);
        let timing_path = dir.join(TIMING_FILE);
        truncate_log(&metrics_path, StepMetrics::CSV_HEADER, start_step)?;
        truncate_log(&timing_path, "step,wall_seconds", start_step)?;
        let open = |p: &Path| -> Result<BufWriter<File>> {
            OpenOptions::new().append(true).open(p).map(BufWriter::new).map_err(|e| Error::io(p, e))
        };
        Ok(Self { metrics: open(&metrics_path)?, timing: open(&timing_path)?, metrics_path, timing_path })
    }

    fn append(&mut self, m: &StepMetrics, seconds: f64) -> Result<()> {
        writeln!(self.metrics, "{}", m.csv_row()).map_err(|e| Error::io(&self.metrics_path, e))?;
        writeln!(self.timing, "{},{seconds}", m.step).map_err(|e| Error::io(&self.timing_path, e))?;
        self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))?;
        self.timing.flush().map_err(|e| Error::io(&self.timing_path, e))
    }
}

/// Trained networks and the per-step log of a [`fit`] call.
pub struct FitResult {
    pub bundle: ModelBundle,
    pub log: Vec<StepMetrics>,
}

/// Trains from scratch, or from `resume` when given, for `config.steps`
/// total steps.
pub fn fit(
    dataset: &Dataset,
    config: &TrainConfig,
    head: Vec<u8>,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<FitResult> {
    let mut trainer = match resume {
        Some(path) => Trainer::resume(path, config.clone(), head)?,
        None => Trainer::new(config.clone(), head)?,
    };
    let log = trainer.run(dataset, out_dir)?;
    Ok(FitResult { bundle: trainer.bundle, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, SynthSpec};
    use crate::parts::{PartGroups, PartTable};

    fn small_net() -> NetConfig {
        NetConfig {
            image_size: 32,
            atlas_size: 32,
            parts: 6,
            latent_dim: 2,
            base_channels: 4,
            encoder_channels: 4,
            disc_channels: 4,
            gen_res_blocks: 1,
            enc_res_blocks: 4,
            disc_scales: 2,
            noparts: false,
        }
    }

    fn small_config(steps: u64) -> TrainConfig {
        TrainConfig { steps, seed: 3, net: small_net(), ..TrainConfig::default() }
    }

    fn dataset(dir: &Path, identities: usize, poses: usize) -> Dataset {
        let spec = SynthSpec {
            identities,
            poses_per_identity: poses,
            image_size: 32,
            atlas_size: 32,
            parts: 6,
            test_fraction: 0.0,
        };
        make_synthetic_dataset(&spec, dir, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        Dataset::load(dir, None, 6).unwrap()
    }

    fn head() -> Vec<u8> {
        PartGroups::builtin(PartTable::Mannequin).head()
    }

    #[test]
    fn steps_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(dir.path(), 2, 2);
        let a = fit(&data, &small_config(3), head(), None, None).unwrap();
        let b = fit(&data, &small_config(3), head(), None, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 3);
        for ((_, _, x), (_, _, y)) in a.bundle.params.iter().zip(b.bundle.params.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn zero_steps_returns_initial_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(dir.path(), 1, 2);
        let out = fit(&data, &small_config(0), head(), None, None).unwrap();
        assert!(out.log.is_empty());
        let init = ModelBundle::init(small_net(), 3).unwrap();
        for ((_, _, x), (_, _, y)) in out.bundle.params.iter().zip(init.params.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn each_update_only_moves_its_own_networks() {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(dir.path(), 1, 2);
        let mut t = Trainer::new(small_config(1), head()).unwrap();
        let before = t.bundle.params.clone();
        let mut rng = step_rng(3, 0);
        let batch = vec![data.sample(&mut rng).unwrap()];
        t.train_step(&batch, &mut rng).unwrap();
        let mut changed_d = 0;
        let mut changed_ge = 0;
        for id in before.ids() {
            let moved = before.get(id) != t.bundle.params.get(id);
            if before.name(id).starts_with(DISCRIMINATOR_PREFIX) {
                changed_d += moved as usize;
            } else {
                changed_ge += moved as usize;
            }
        }
        assert!(changed_d > 0 && changed_ge > 0);
        // the two optimizers partition the store along the D prefix
        let ge: Vec<_> = t.opt_ge.params().to_vec();
        let d: Vec<_> = t.opt_d.params().to_vec();
        assert!(ge.iter().all(|id| !d.contains(id)));
        assert_eq!(ge.len() + d.len(), t.bundle.params.len());
        assert!(d.iter().all(|&id| t.bundle.params.name(id).starts_with(DISCRIMINATOR_PREFIX)));
    }

    #[test]
    fn each_update_leaves_the_other_networks_bitwise_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(dir.path(), 1, 2);
        let mut t = Trainer::new(small_config(1), head()).unwrap();
        let before = t.bundle.params.clone();
        let mut mid = None;
        let mut rng = step_rng(3, 0);
        let batch = vec![data.sample(&mut rng).unwrap()];
        t.train_step_observed(&batch, &mut rng, |p| mid = Some(p.clone())).unwrap();
        let mid = mid.unwrap();
        let after = &t.bundle.params;
        for id in before.ids() {
            if before.name(id).starts_with(DISCRIMINATOR_PREFIX) {
                assert_eq!(mid.get(id), after.get(id), "G/E update moved {}", before.name(id));
            } else {
                assert_eq!(before.get(id), mid.get(id), "D update moved {}", before.name(id));
            }
        }
    }

    #[test]
    fn logged_total_matches_weighted_sum_of_terms() {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(dir.path(), 2, 2);
        let out = fit(&data, &small_config(2), head(), None, None).unwrap();
        for m in &out.log {
            let (ge, d) = total_loss(&m.terms(), &LossWeights::default());
            assert_eq!(ge, m.total_ge);
            assert_eq!(d, m.total_d);
        }
    }

    #[test]
    fn kl_is_positive_at_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(dir.path(), 1, 2);
        let out = fit(&data, &small_config(1), head(), None, None).unwrap();
        assert!(out.log[0].kl > 0.0);
        assert!(out.log[0].face > 0.0, "head is visible in synthetic frames");
    }

    #[test]
    fn resume_continues_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(&dir.path().join("data"), 2, 2);
        let straight = dir.path().join("straight");
        let full = fit(&data, &small_config(4), head(), Some(&straight), None).unwrap();

        let split = dir.path().join("split");
        let cfg = TrainConfig { checkpoint_every: 2, ..small_config(2) };
        fit(&data, &cfg, head(), Some(&split), None).unwrap();
        let ck = split.join("ckpt_000002.safetensors");
        let resumed = fit(&data, &small_config(4), head(), Some(&split), Some(&ck)).unwrap();
        assert_eq!(resumed.log[..], full.log[2..]);
        let a = std::fs::read(straight.join(METRICS_FILE)).unwrap();
        let b = std::fs::read(split.join(METRICS_FILE)).unwrap();
        assert_eq!(a, b);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 5);
    }

    #[test]
    fn resume_rejects_other_network_or_seed() {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(&dir.path().join("data"), 1, 2);
        let out = dir.path().join("run");
        fit(&data, &small_config(1), head(), Some(&out), None).unwrap();
        let ck = out.join(LAST_CHECKPOINT);
        let wider = TrainConfig { net: NetConfig { base_channels: 8, ..small_net() }, ..small_config(2) };
        let err = Trainer::resume(&ck, wider, head()).err().unwrap();
        assert_eq!(err.class(), "config-mismatch");
        let err = Trainer::resume(&ck, TrainConfig { seed: 4, ..small_config(2) }, head()).err().unwrap();
        assert_eq!(err.class(), "config-mismatch");
    }

    #[test]
    fn rejects_bad_config_and_data() {
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(dir.path(), 1, 2);
        let desk = TrainConfig { steps: 1, ..TrainConfig::default() };
        assert_eq!(fit(&data, &desk, head(), None, None).err().unwrap().class(), "shape-mismatch");
    }

    #[test]
    fn overfits_a_single_pair() {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(dir.path(), 1, 2);
        let out = fit(&data, &small_config(200), head(), None, None).unwrap();
        let first = out.log[0].vgg;
        let last = out.log.last().unwrap().vgg;
        assert!(last < first, "perceptual loss {first} -> {last}");
    }
}
