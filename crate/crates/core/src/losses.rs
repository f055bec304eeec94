//! Reconstruction, adversarial and prior losses and their weighted sum.
//!
//! The perceptual and face terms go through the [`FeatureExtractor`] and
//! [`FaceEmbedder`] traits. The bundled implementations are fixed-seed
//! random convnets: deterministic and weight-free, but not calibrated, so
//! their values are only comparable with each other.

use std::ops::{Add, Mul};
use std::sync::Arc;

use partwarp_autodiff::{Bind, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::DenseBodyMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub vgg: f64,
    pub face: f64,
    pub adv: f64,
    pub fm: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { vgg: 10.0, face: 5.0, adv: 1.0, fm: 10.0, kl: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("vgg", self.vgg), ("face", self.face), ("adv", self.adv), ("fm", self.fm), ("kl", self.kl)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Fixed image network whose activations feed the perceptual loss, the
/// diversity distance and FID. Input is `[B, 3, H, W]` in `[-1, 1]`.
pub trait FeatureExtractor {
    fn features<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Vec<Var<'t>>;
}

/// Fixed network mapping a `[B, 3, S, S]` head crop to `[B, D]`.
pub trait FaceEmbedder {
    fn input_size(&self) -> usize;
    fn embed<'t>(&self, tape: &'t Tape, crop: Var<'t>) -> Var<'t>;
}

/// The raw image as its only layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelExtractor;

impl FeatureExtractor for PixelExtractor {
    fn features<'t>(&self, _tape: &'t Tape, image: Var<'t>) -> Vec<Var<'t>> {
        vec![image]
    }
}

#[derive(Clone, Debug)]
struct FixedConv {
    w: ParamId,
    stride: usize,
    pad: usize,
}

/// Convolution stack with He-initialized weights drawn from a fixed seed.
#[derive(Clone, Debug)]
struct FixedConvNet {
    params: ParamStore,
    convs: Vec<FixedConv>,
}

impl FixedConvNet {
    /// `layers` lists `(out_channels, kernel, stride)`.
    fn new(seed: u64, cin: usize, layers: &[(usize, usize, usize)]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut c = cin;
        let convs = layers
            .iter()
            .enumerate()
            .map(|(i, &(cout, k, stride))| {
                let std = (2.0 / (c * k * k) as f64).sqrt();
                let w = params.add(format!("l{i}"), Tensor::randn([cout, c, k, k], std, &mut rng));
                c = cout;
                FixedConv { w, stride, pad: k / 2 }
            })
            .collect();
        Self { params, convs }
    }

    fn activations<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Vec<Var<'t>> {
        let bind = Bind::frozen(&self.params);
        let mut h = x;
        self.convs
            .iter()
            .map(|c| {
                h = h.conv2d(bind.var(tape, c.w), None, c.stride, c.pad).relu();
                h
            })
            .collect()
    }
}

/// Random-weight stand-in for a pretrained classification backbone.
#[derive(Clone, Debug)]
pub struct StubExtractor {
    net: FixedConvNet,
    layers: Vec<usize>,
}

pub const STUB_EXTRACTOR_SEED: u64 = 0x5eed_f00d;

impl StubExtractor {
    /// Three ReLU conv layers (16, 32, 64 channels; the last two stride 2).
    /// `layers` selects which activations are reported.
    pub fn new(seed: u64, layers: Vec<usize>) -> Result<Self> {
        let net = FixedConvNet::new(seed, 3, &[(16, 3, 1), (32, 3, 2), (64, 3, 2)]);
        if layers.is_empty() || layers.iter().any(|&l| l >= net.convs.len()) {
            return Err(Error::Config(format!("extractor layers {layers:?} must be a nonempty subset of 0..3")));
        }
        Ok(Self { net, layers })
    }
}

impl Default for StubExtractor {
    fn default() -> Self {
        Self::new(STUB_EXTRACTOR_SEED, vec![0, 1, 2]).expect("default layers")
    }
}

impl FeatureExtractor for StubExtractor {
    fn features<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Vec<Var<'t>> {
        let acts = self.net.activations(tape, image);
        self.layers.iter().map(|&l| acts[l]).collect()
    }
}

/// Random-weight stand-in for a face recognition network.
#[derive(Clone, Debug)]
pub struct StubFaceEmbedder {
    net: FixedConvNet,
    fc: ParamId,
}

pub const STUB_FACE_SEED: u64 = 0xface_5eed;
const FACE_SIZE: usize = 16;
const FACE_DIM: usize = 32;

impl StubFaceEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut net = FixedConvNet::new(seed, 3, &[(8, 3, 2), (16, 3, 2)]);
        let fan_in = 16 * (FACE_SIZE / 4) * (FACE_SIZE / 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let fc = net.params.add("fc", Tensor::randn([FACE_DIM, fan_in], (1.0 / fan_in as f64).sqrt(), &mut rng));
        Self { net, fc }
    }
}

impl Default for StubFaceEmbedder {
    fn default() -> Self {
        Self::new(STUB_FACE_SEED)
    }
}

impl FaceEmbedder for StubFaceEmbedder {
    fn input_size(&self) -> usize {
        FACE_SIZE
    }

    fn embed<'t>(&self, tape: &'t Tape, crop: Var<'t>) -> Var<'t> {
        let h = *self.net.activations(tape, crop).last().expect("two layers");
        let b = h.shape()[0];
        let flat = h.reshape([b, h.value().len() / b]);
        flat.linear(Bind::frozen(&self.net.params).var(tape, self.fc), None)
    }
}

fn zero(tape: &Tape) -> Var<'_> {
    tape.constant(Tensor::scalar(0.0))
}

fn mean_abs_diff<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    (a - b).abs().mean()
}

/// Sum over extractor layers of the mean absolute feature difference.
pub fn perceptual_loss<'t>(fx: &dyn FeatureExtractor, tape: &'t Tape, gen: Var<'t>, gt: Var<'t>) -> Var<'t> {
    let fg = fx.features(tape, gen);
    let ft = fx.features(tape, gt.detach());
    fg.into_iter().zip(ft).fold(zero(tape), |acc, (a, b)| acc + mean_abs_diff(a, b.detach()))
}

/// Tight box around the head parts, grown by 20% of its height and width
/// (half on each side) and clamped to the image. `(y0, x0, y1, x1)`, end
/// exclusive.
pub fn head_box(map: &DenseBodyMap, head: &[u8]) -> Option<(usize, usize, usize, usize)> {
    let (y0, x0, y1, x1) = map.bounding_box(head)?;
    let grow = |lo: usize, hi: usize, limit: usize| {
        let pad = ((hi - lo) as f64 * 0.1).round() as usize;
        (lo.saturating_sub(pad), (hi + pad).min(limit))
    };
    let (y0, y1) = grow(y0, y1, map.height());
    let (x0, x1) = grow(x0, x1, map.width());
    Some((y0, x0, y1, x1))
}

/// Nearest-neighbour resampling index of a crop box onto `size x size`.
fn crop_index(width: usize, bbox: (usize, usize, usize, usize), size: usize) -> impl Iterator<Item = usize> {
    let (y0, x0, y1, x1) = bbox;
    let (h, w) = ((y1 - y0) as f64, (x1 - x0) as f64);
    (0..size * size).map(move |q| {
        let (i, j) = (q / size, q % size);
        let y = y0 + (((i as f64 + 0.5) * h / size as f64) as usize).min(y1 - y0 - 1);
        let x = x0 + (((j as f64 + 0.5) * w / size as f64) as usize).min(x1 - x0 - 1);
        y * width + x
    })
}

/// L1 between face embeddings of the head crops of `gen` and `gt`, averaged
/// over the batch. Samples whose head is not visible contribute 0.
pub fn face_identity_loss<'t>(
    fe: &dyn FaceEmbedder,
    tape: &'t Tape,
    gen: Var<'t>,
    gt: Var<'t>,
    maps: &[&DenseBodyMap],
    head: &[u8],
) -> Var<'t> {
    let shape = gen.shape();
    let (b, w) = (shape[0], shape[3]);
    assert_eq!(maps.len(), b, "one map per sample");
    let size = fe.input_size();
    let mut index = Vec::with_capacity(b * size * size);
    let mut visible = Vec::with_capacity(b);
    for m in maps {
        match head_box(m, head) {
            Some(bbox) => {
                index.extend(crop_index(w, bbox, size));
                visible.push(true);
            }
            None => {
                index.extend(std::iter::repeat_n(0, size * size));
                visible.push(false);
            }
        }
    }
    if !visible.contains(&true) {
        return zero(tape);
    }
    let index: Arc<[usize]> = index.into();
    let eg = fe.embed(tape, tape.gather_pixels(gen, Arc::clone(&index), size, size));
    let et = fe.embed(tape, tape.gather_pixels(gt.detach(), index, size, size)).detach();
    let dim = eg.shape()[1];
    let weights = Tensor::from_fn([b, dim], |i| if visible[i / dim] { 1.0 / (b * dim) as f64 } else { 0.0 });
    ((eg - et).abs() * tape.constant(weights)).sum()
}

/// Least-squares discriminator loss, averaged over scales:
/// `0.5 * (mean((real - 1)^2) + mean(fake^2))`.
pub fn lsgan_d_loss<'t>(tape: &'t Tape, real: &[Var<'t>], fake: &[Var<'t>]) -> Var<'t> {
    assert_eq!(real.len(), fake.len());
    let total = real.iter().zip(fake).fold(zero(tape), |acc, (&r, &f)| {
        acc + (r.add_scalar(-1.0).sqr().mean() + f.sqr().mean()).scale(0.5)
    });
    total.scale(1.0 / real.len() as f64)
}

/// Least-squares generator loss `mean((fake - 1)^2)`, averaged over scales.
pub fn lsgan_g_loss<'t>(tape: &'t Tape, fake: &[Var<'t>]) -> Var<'t> {
    let total = fake.iter().fold(zero(tape), |acc, &f| acc + f.add_scalar(-1.0).sqr().mean());
    total.scale(1.0 / fake.len() as f64)
}

/// `(loss_D, loss_G_adv)` from per-scale logit maps.
pub fn gan_losses<'t>(tape: &'t Tape, real: &[Var<'t>], fake: &[Var<'t>]) -> (Var<'t>, Var<'t>) {
    (lsgan_d_loss(tape, real, fake), lsgan_g_loss(tape, fake))
}

/// Mean L1 per layer per scale, summed; real activations are detached.
pub fn feature_matching_loss<'t>(tape: &'t Tape, real: &[Vec<Var<'t>>], fake: &[Vec<Var<'t>>]) -> Var<'t> {
    assert_eq!(real.len(), fake.len(), "scale count");
    let mut total = zero(tape);
    for (r, f) in real.iter().zip(fake) {
        assert_eq!(r.len(), f.len(), "layer count");
        for (&a, &b) in r.iter().zip(f) {
            total = total + mean_abs_diff(b, a.detach());
        }
    }
    total
}

/// Unweighted loss components; `S` is `f64` or a graph variable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<S> {
    pub vgg: S,
    pub face: S,
    pub adv_g: S,
    pub fm: S,
    pub kl: S,
    pub adv_d: S,
}

/// `(generator/encoder objective, discriminator objective)`.
pub fn total_loss<S>(t: &LossTerms<S>, w: &LossWeights) -> (S, S)
where
    S: Copy + Add<Output = S> + Mul<f64, Output = S>,
{
    let ge = t.vgg * w.vgg + t.face * w.face + t.adv_g * w.adv + t.fm * w.fm + t.kl * w.kl;
    (ge, t.adv_d * w.adv)
}
