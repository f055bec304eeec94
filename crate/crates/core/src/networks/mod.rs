//! Appearance encoder, pose-conditioned generator and two-scale
//! conditional discriminator.
//!
//! All three networks draw their weights from one [`ParamStore`] owned by
//! the [`ModelBundle`]; parameter names are prefixed `enc.`, `gen.` and
//! `disc.` so optimizers and checkpoints can address each network.

mod checkpoint;
mod layers;

use std::path::Path;

use partwarp_autodiff::{Bind, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
use layers::{Conv, Dense, Upsample, IN_EPS};

use crate::atlas::{AtlasLayout, TextureAtlas, MAX_PARTS};
use crate::error::{Error, Result};
use crate::latent::{GaussianParams, PartLatent};

pub const ENCODER_PREFIX: &str = "enc.";
pub const GENERATOR_PREFIX: &str = "gen.";
pub const DISCRIMINATOR_PREFIX: &str = "disc.";

const GEN_STAGES: usize = 3;
const ENC_DOWN_BLOCKS: usize = 4;
const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub image_size: usize,
    pub atlas_size: usize,
    pub parts: usize,
    pub latent_dim: usize,
    /// Generator width at full resolution; doubles at each down stage.
    pub base_channels: usize,
    pub encoder_channels: usize,
    pub disc_channels: usize,
    pub gen_res_blocks: usize,
    /// The first four blocks halve the resolution; any further blocks keep it.
    pub enc_res_blocks: usize,
    pub disc_scales: usize,
    /// Broadcast the whole flattened latent over the silhouette instead of
    /// one row per part.
    pub noparts: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            atlas_size: 64,
            parts: 6,
            latent_dim: 4,
            base_channels: 16,
            encoder_channels: 16,
            disc_channels: 16,
            gen_res_blocks: 6,
            enc_res_blocks: 5,
            disc_scales: 2,
            noparts: false,
        }
    }

    /// Full-size configuration: 512 px images, 256 px atlas, 24 parts.
    pub fn full() -> Self {
        Self {
            image_size: 512,
            atlas_size: 256,
            parts: 24,
            latent_dim: 16,
            base_channels: 64,
            encoder_channels: 32,
            disc_channels: 64,
            ..Self::desk()
        }
    }

    /// Smallest configuration that keeps every structural stage.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            atlas_size: 32,
            parts: 3,
            latent_dim: 2,
            base_channels: 2,
            encoder_channels: 2,
            disc_channels: 2,
            gen_res_blocks: 2,
            enc_res_blocks: 5,
            disc_scales: 2,
            noparts: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.image_size % (1 << GEN_STAGES) != 0 {
            return bad(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        let enc_out = self.atlas_size >> ENC_DOWN_BLOCKS;
        if self.atlas_size == 0 || self.atlas_size % (1 << (ENC_DOWN_BLOCKS + 1)) != 0 {
            return bad(format!("atlas_size {} must be a positive multiple of 32", self.atlas_size));
        }
        AtlasLayout::new(self.atlas_size)?;
        if !(1..=MAX_PARTS).contains(&self.parts) {
            return bad(format!("parts {} outside 1..={MAX_PARTS}", self.parts));
        }
        if self.latent_dim == 0 || self.base_channels == 0 || self.encoder_channels == 0 || self.disc_channels == 0 {
            return bad("latent_dim and channel widths must be positive".into());
        }
        if self.enc_res_blocks < ENC_DOWN_BLOCKS {
            return bad(format!("enc_res_blocks must be at least {ENC_DOWN_BLOCKS}"));
        }
        if self.disc_scales == 0 || self.image_size >> (self.disc_scales - 1) < 8 {
            return bad(format!("{} discriminator scales too many for {} px", self.disc_scales, self.image_size));
        }
        debug_assert!(enc_out >= 2);
        Ok(())
    }

    /// Channels of the warped latent image fed to the generator.
    pub fn z_channels(&self) -> usize {
        if self.noparts {
            self.parts * self.latent_dim
        } else {
            self.latent_dim
        }
    }
}

/// Encoder input: texels mapped to `[-1, 1]` where filled (0 elsewhere) and
/// the filled mask as a fourth channel, `[B, 4, A, A]`.
pub fn encoder_input(atlases: &[&TextureAtlas]) -> Tensor {
    let a = atlases[0].size();
    let plane = a * a;
    let mut data = vec![0.0; atlases.len() * 4 * plane];
    for (b, atlas) in atlases.iter().enumerate() {
        assert_eq!(atlas.size(), a, "atlases in a batch differ in size");
        let dst = &mut data[b * 4 * plane..(b + 1) * 4 * plane];
        for (p, &filled) in atlas.filled().iter().enumerate() {
            if !filled {
                continue;
            }
            for c in 0..3 {
                dst[c * plane + p] = atlas.texels()[p * 3 + c] * 2.0 - 1.0;
            }
            dst[3 * plane + p] = 1.0;
        }
    }
    Tensor::new([atlases.len(), 4, a, a], data)
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    conv1: Conv,
    conv2: Conv,
    skip: Option<Conv>,
}

impl EncoderBlock {
    fn forward<'t>(&self, bind: &Bind, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let h = self.conv1.forward(bind, tape, x).instance_norm(IN_EPS).relu();
        let h = self.conv2.forward(bind, tape, h).instance_norm(IN_EPS);
        let s = match &self.skip {
            Some(skip) => skip.forward(bind, tape, x),
            None => x,
        };
        (h + s).relu()
    }
}

/// Texture atlas to per-part Gaussian parameters: a stem convolution,
/// residual blocks, average pooling to 2x2 and one fully connected layer.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Conv,
    blocks: Vec<EncoderBlock>,
    pool: usize,
    fc: Dense,
    parts: usize,
    dims: usize,
}

impl Encoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Self {
        let c = cfg.encoder_channels;
        let stem = Conv::new(store, rng, "enc.stem", 4, c, 3, 1, 1, true);
        let mut blocks = Vec::new();
        let mut cin = c;
        for i in 0..cfg.enc_res_blocks {
            let down = i < ENC_DOWN_BLOCKS;
            let cout = if down { c << (i + 1).min(3) } else { cin };
            let stride = if down { 2 } else { 1 };
            let name = format!("enc.block{i}");
            blocks.push(EncoderBlock {
                conv1: Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false),
                conv2: Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false),
                skip: down.then(|| Conv::new(store, rng, &format!("{name}.skip"), cin, cout, 1, 2, 0, true)),
            });
            cin = cout;
        }
        let pool = (cfg.atlas_size >> ENC_DOWN_BLOCKS) / 2;
        let fc = Dense::new(store, rng, "enc.fc", cin * 4, 2 * cfg.parts * cfg.latent_dim);
        Self { stem, blocks, pool, fc, parts: cfg.parts, dims: cfg.latent_dim }
    }

    /// `x: [B, 4, A, A]` to `(mu, log_var)`, each `[B, M, N]`.
    pub fn forward<'t>(&self, bind: &Bind, tape: &'t Tape, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let b = x.shape()[0];
        let mut h = self.stem.forward(bind, tape, x).relu();
        for block in &self.blocks {
            h = block.forward(bind, tape, h);
        }
        let h = h.avg_pool(self.pool);
        let feat = h.shape()[1..].iter().product::<usize>();
        let out = self.fc.forward(bind, tape, h.reshape([b, feat]));
        let mn = self.parts * self.dims;
        let mu = out.narrow(1, 0, mn).reshape([b, self.parts, self.dims]);
        let log_var = out.narrow(1, mn, mn).reshape([b, self.parts, self.dims]);
        (mu, log_var)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
}

/// Warped latent image to RGB in `[-1, 1]`: three stride-2 down stages, a
/// stack of residual blocks and three transposed-conv up stages.
#[derive(Clone, Debug)]
pub struct Generator {
    stem: Conv,
    down: Vec<Conv>,
    res: Vec<ResBlock>,
    up: Vec<Upsample>,
    head: Conv,
    z_channels: usize,
}

impl Generator {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Self {
        let c = cfg.base_channels;
        let stem = Conv::new(store, rng, "gen.stem", cfg.z_channels(), c, 7, 1, 3, false);
        let down = (0..GEN_STAGES)
            .map(|i| Conv::new(store, rng, &format!("gen.down{i}"), c << i, c << (i + 1), 3, 2, 1, false))
            .collect();
        let w = c << GEN_STAGES;
        let res = (0..cfg.gen_res_blocks)
            .map(|i| ResBlock {
                conv1: Conv::new(store, rng, &format!("gen.res{i}.conv1"), w, w, 3, 1, 1, false),
                conv2: Conv::new(store, rng, &format!("gen.res{i}.conv2"), w, w, 3, 1, 1, false),
            })
            .collect();
        let up = (0..GEN_STAGES)
            .map(|i| {
                let cin = c << (GEN_STAGES - i);
                Upsample::new(store, rng, &format!("gen.up{i}"), cin, cin / 2)
            })
            .collect();
        let head = Conv::new(store, rng, "gen.head", c, 3, 7, 1, 3, true);
        Self { stem, down, res, up, head, z_channels: cfg.z_channels() }
    }

    pub fn z_channels(&self) -> usize {
        self.z_channels
    }

    /// `z: [B, C, H, W]` to `[B, 3, H, W]`.
    pub fn forward<'t>(&self, bind: &Bind, tape: &'t Tape, z: Var<'t>) -> Var<'t> {
        assert_eq!(z.shape()[1], self.z_channels, "generator input channels");
        let mut h = self.stem.forward(bind, tape, z).instance_norm(IN_EPS).relu();
        for conv in &self.down {
            h = conv.forward(bind, tape, h).instance_norm(IN_EPS).relu();
        }
        for block in &self.res {
            let r = block.conv1.forward(bind, tape, h).instance_norm(IN_EPS).relu();
            let r = block.conv2.forward(bind, tape, r).instance_norm(IN_EPS);
            h = h + r;
        }
        for up in &self.up {
            h = up.forward(bind, tape, h).instance_norm(IN_EPS).relu();
        }
        self.head.forward(bind, tape, h).tanh()
    }
}

/// One discriminator scale's patch logits and intermediate activations.
pub struct ScaleOutput<'t> {
    pub logits: Var<'t>,
    pub features: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
struct PatchDiscriminator {
    layers: Vec<Conv>,
}

impl PatchDiscriminator {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, ndf: usize) -> Self {
        let widths = [cin, ndf, ndf * 2, ndf * 4, ndf * 8, 1];
        let layers = (0..5)
            .map(|i| {
                // layers followed by instance norm carry no bias
                let bias = i == 0 || i == 4;
                let (k, stride) = if i < 3 { (4, 2) } else { (3, 1) };
                Conv::new(store, rng, &format!("{name}.l{i}"), widths[i], widths[i + 1], k, stride, 1, bias)
            })
            .collect();
        Self { layers }
    }

    fn forward<'t>(&self, bind: &Bind, tape: &'t Tape, x: Var<'t>) -> ScaleOutput<'t> {
        let mut features = Vec::with_capacity(4);
        let mut h = x;
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward(bind, tape, h);
            if i == 4 {
                break;
            }
            if i > 0 {
                h = h.instance_norm(IN_EPS);
            }
            h = h.leaky_relu(LRELU_SLOPE);
            features.push(h);
        }
        ScaleOutput { logits: h, features }
    }
}

/// Patch discriminators on the image (plus its warped latent) at full and
/// successively halved resolutions.
#[derive(Clone, Debug)]
pub struct Discriminator {
    scales: Vec<PatchDiscriminator>,
}

impl Discriminator {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Self {
        let cin = 3 + cfg.z_channels();
        let scales = (0..cfg.disc_scales)
            .map(|s| PatchDiscriminator::new(store, rng, &format!("disc.s{s}"), cin, cfg.disc_channels))
            .collect();
        Self { scales }
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// `image: [B, 3, H, W]`, `z: [B, C, H, W]`; scale 0 is full resolution.
    pub fn forward<'t>(&self, bind: &Bind, tape: &'t Tape, image: Var<'t>, z: Var<'t>) -> Vec<ScaleOutput<'t>> {
        let (is, zs) = (image.shape(), z.shape());
        assert_eq!((is[0], is[2], is[3]), (zs[0], zs[2], zs[3]), "image and latent image misaligned");
        let mut x = tape.concat(&[image, z], 1);
        let mut out = Vec::with_capacity(self.scales.len());
        for (s, head) in self.scales.iter().enumerate() {
            if s > 0 {
                x = x.avg_pool(2);
            }
            out.push(head.forward(bind, tape, x));
        }
        out
    }
}

/// Parameters of all three networks plus the configuration that built them.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: NetConfig,
    pub params: ParamStore,
    pub step: u64,
    encoder: Encoder,
    generator: Generator,
    discriminator: Discriminator,
}

impl ModelBundle {
    /// Fresh weights drawn from `seed`.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, &config);
        let generator = Generator::new(&mut params, &mut rng, &config);
        let discriminator = Discriminator::new(&mut params, &mut rng, &config);
        Ok(Self { config, params, step: 0, encoder, generator, discriminator })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn param_ids(&self, prefix: &str) -> Vec<ParamId> {
        self.params.ids_with_prefix(prefix).collect()
    }

    /// Posterior parameters for one atlas, without building gradients.
    pub fn encode(&self, atlas: &TextureAtlas) -> Result<GaussianParams> {
        if atlas.size() != self.config.atlas_size {
            return Err(Error::Shape(format!(
                "atlas is {} px, model expects {}",
                atlas.size(),
                self.config.atlas_size
            )));
        }
        let tape = Tape::new();
        let bind = Bind::frozen(&self.params);
        let (mu, lv) = self.encoder.forward(&bind, &tape, tape.constant(encoder_input(&[atlas])));
        GaussianParams::new(PartLatent::from_tensor(&mu.value(), 0)?, PartLatent::from_tensor(&lv.value(), 0)?)
    }

    /// Generator forward on a `[B, C, H, W]` latent image, without gradients.
    pub fn decode(&self, z: Tensor) -> Result<Tensor> {
        let expect = [self.config.z_channels(), self.config.image_size, self.config.image_size];
        if z.rank() != 4 || z.shape()[1..] != expect {
            return Err(Error::Shape(format!("latent image {:?}, generator expects [B, {:?}]", z.shape(), expect)));
        }
        let tape = Tape::new();
        let bind = Bind::frozen(&self.params);
        Ok((*self.generator.forward(&bind, &tape, tape.constant(z)).value()).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        ck.metadata.insert("format".into(), "partwarp-bundle-1".into());
        ck.metadata.insert("net_config".into(), serde_json::to_string(&self.config)?);
        ck.metadata.insert("step".into(), self.step.to_string());
        for (_, name, t) in self.params.iter() {
            ck.tensors.insert(format!("param/{name}"), t.clone());
        }
        Ok(ck)
    }

    /// Rebuilds a bundle, consuming the `param/` tensors from `ck`. Fails if
    /// `expected` is given and differs from the stored configuration.
    pub fn from_checkpoint(ck: &mut Checkpoint, path: &Path, expected: Option<&NetConfig>) -> Result<Self> {
        let config: NetConfig = serde_json::from_str(ck.meta("net_config", path)?)
            .map_err(|e| Error::Checkpoint { path: path.into(), reason: format!("net_config: {e}") })?;
        if let Some(want) = expected {
            if *want != config {
                return Err(Error::ConfigMismatch(format!(
                    "{} was trained with {}, run config asks for {}",
                    path.display(),
                    serde_json::to_string(&config)?,
                    serde_json::to_string(want)?
                )));
            }
        }
        let step = ck
            .meta("step", path)?
            .parse()
            .map_err(|_| Error::Checkpoint { path: path.into(), reason: "bad step".into() })?;
        let mut bundle = Self::init(config, 0)?;
        bundle.step = step;
        let ids: Vec<ParamId> = bundle.params.ids().collect();
        for id in ids {
            let name = bundle.params.name(id).to_string();
            let t = ck.take(&format!("param/{name}"), path)?;
            if t.shape() != bundle.params.get(id).shape() {
                return Err(Error::ConfigMismatch(format!(
                    "{}: parameter {name} has shape {:?}, expected {:?}",
                    path.display(),
                    t.shape(),
                    bundle.params.get(id).shape()
                )));
            }
            bundle.params.set(id, t);
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path, expected: Option<&NetConfig>) -> Result<Self> {
        let mut ck = Checkpoint::load(path)?;
        Self::from_checkpoint(&mut ck, path, expected)
    }
}
