//! Part-structured latent codes and the warp that paints them into a pose.
//!
//! A [`PartLatent`] holds one `N`-vector per body part (rows are addressed
//! with 1-based part indices, like the dense map). Warp-broadcast copies row
//! `k` into every pixel of part `k`; background pixels get the zero vector.

use std::path::Path;
use std::sync::Arc;

use partwarp_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::atlas::DenseBodyMap;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartLatent {
    parts: usize,
    dims: usize,
    values: Vec<f64>,
}

impl PartLatent {
    pub fn new(parts: usize, dims: usize, values: Vec<f64>) -> Result<Self> {
        if parts == 0 || dims == 0 {
            return Err(Error::Shape(format!("latent must be at least 1x1, got {parts}x{dims}")));
        }
        if values.len() != parts * dims {
            return Err(Error::Shape(format!("{} values for a {parts}x{dims} latent", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latent has non-finite entries".into()));
        }
        Ok(Self { parts, dims, values })
    }

    pub fn zeros(parts: usize, dims: usize) -> Self {
        Self { parts, dims, values: vec![0.0; parts * dims] }
    }

    /// Draws every entry from N(0, 1), row-major.
    pub fn standard_normal<R: Rng + ?Sized>(parts: usize, dims: usize, rng: &mut R) -> Self {
        let values = (0..parts * dims).map(|_| rng.sample(StandardNormal)).collect();
        Self { parts, dims, values }
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row of part `k` (1-based).
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[(k - 1) * self.dims..k * self.dims]
    }

    fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[(k - 1) * self.dims..k * self.dims]
    }

    /// `[1, M, N]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.parts, self.dims], self.values.clone())
    }

    /// Latent `index` of a `[B, M, N]` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::Shape(format!("latent tensor must be [B, M, N], got {:?}", t.shape())));
        }
        Self::new(t.dim(1), t.dim(2), t.slice0(index).to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: PartLatent = serde_json::from_str(&text)?;
        Self::new(raw.parts, raw.dims, raw.values)
    }
}

/// Diagonal Gaussian over an `M x N` latent, stored as mean and log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: PartLatent,
    pub log_var: PartLatent,
}

impl GaussianParams {
    pub fn new(mu: PartLatent, log_var: PartLatent) -> Result<Self> {
        if (mu.parts, mu.dims) != (log_var.parts, log_var.dims) {
            return Err(Error::Shape("mean and log-variance differ in shape".into()));
        }
        Ok(Self { mu, log_var })
    }

    pub fn standard(parts: usize, dims: usize) -> Self {
        Self { mu: PartLatent::zeros(parts, dims), log_var: PartLatent::zeros(parts, dims) }
    }
}

/// `z = mu + exp(log_var / 2) * eps` with `eps` drawn row-major from `rng`.
pub fn sample_reparam<R: Rng + ?Sized>(params: &GaussianParams, rng: &mut R) -> PartLatent {
    let values = params
        .mu
        .values
        .iter()
        .zip(&params.log_var.values)
        .map(|(&m, &lv)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + (0.5 * lv).exp() * eps
        })
        .collect();
    PartLatent { parts: params.mu.parts, dims: params.mu.dims, values }
}

/// Differentiable reparameterization with externally drawn noise.
pub fn sample_reparam_var<'t>(mu: Var<'t>, log_var: Var<'t>, eps: Tensor) -> Var<'t> {
    let eps = mu.tape().constant(eps);
    mu + log_var.scale(0.5).exp() * eps
}

pub fn kl_to_standard_normal(params: &GaussianParams) -> f64 {
    let s: f64 = params
        .mu
        .values
        .iter()
        .zip(&params.log_var.values)
        .map(|(&m, &lv)| m * m + lv.exp() - lv - 1.0)
        .sum();
    0.5 * s
}

/// Graph version of [`kl_to_standard_normal`], summed over every element.
pub fn kl_var<'t>(mu: Var<'t>, log_var: Var<'t>) -> Var<'t> {
    (mu.sqr() + log_var.exp() - log_var).add_scalar(-1.0).sum().scale(0.5)
}

/// Per-pixel latent field in channel-major (`C x H x W`) order.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedNoiseImage {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl WarpedNoiseImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> Vec<f64> {
        let hw = self.height * self.width;
        (0..self.channels).map(|c| self.values[c * hw + y * self.width + x]).collect()
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.channels, self.height, self.width], self.values.clone())
    }
}

/// Per-pixel part index as a warp table index.
pub fn warp_index(map: &DenseBodyMap) -> Vec<u32> {
    map.parts().iter().map(|&p| p as u32).collect()
}

/// Foreground indicator as a single-row warp table index.
pub fn silhouette_index(map: &DenseBodyMap) -> Vec<u32> {
    map.parts().iter().map(|&p| u32::from(p != 0)).collect()
}

pub fn warp_broadcast(z: &PartLatent, map: &DenseBodyMap) -> Result<WarpedNoiseImage> {
    if map.num_parts() > z.parts {
        return Err(Error::Shape(format!("map has {} parts but latent has {}", map.num_parts(), z.parts)));
    }
    Ok(paint(&z.values, z.dims, &warp_index(map), map))
}

/// Ablation: the whole flattened latent is written over the silhouette.
pub fn warp_broadcast_noparts(z_flat: &[f64], map: &DenseBodyMap) -> WarpedNoiseImage {
    paint(z_flat, z_flat.len(), &silhouette_index(map), map)
}

fn paint(table: &[f64], dims: usize, index: &[u32], map: &DenseBodyMap) -> WarpedNoiseImage {
    let (h, w) = (map.height(), map.width());
    let hw = h * w;
    let mut values = vec![0.0; dims * hw];
    for (p, &k) in index.iter().enumerate() {
        if k == 0 {
            continue;
        }
        let row = &table[(k as usize - 1) * dims..k as usize * dims];
        for (c, &v) in row.iter().enumerate() {
            values[c * hw + p] = v;
        }
    }
    WarpedNoiseImage { height: h, width: w, channels: dims, values }
}

/// Batched differentiable warp of `z: [B, M, N]` over one map per sample.
///
/// With `noparts` the table is viewed as `[B, 1, M * N]` and broadcast over
/// each silhouette instead.
pub fn warp_broadcast_var<'t>(tape: &'t Tape, z: Var<'t>, maps: &[&DenseBodyMap], noparts: bool) -> Var<'t> {
    let shape = z.shape();
    assert_eq!(shape.len(), 3);
    assert_eq!(shape[0], maps.len(), "one map per latent");
    let (h, w) = (maps[0].height(), maps[0].width());
    let mut index = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        assert_eq!((m.height(), m.width()), (h, w), "maps in a batch differ in size");
        if noparts {
            index.extend(silhouette_index(m));
        } else {
            assert!(m.num_parts() <= shape[1]);
            index.extend(warp_index(m));
        }
    }
    let table = if noparts { z.reshape([shape[0], 1, shape[1] * shape[2]]) } else { z };
    tape.warp_broadcast(table, Arc::from(index), h, w)
}

pub(crate) fn check_parts(parts: &[u8], max: usize) -> Result<()> {
    match parts.iter().find(|&&p| p == 0 || p as usize > max) {
        Some(&p) => Err(Error::InvalidPart { index: p as usize, max }),
        None => Ok(()),
    }
}

/// Replaces the rows in `parts` with fresh N(0, 1) draws, in ascending part
/// order; every other row is untouched.
pub fn resample_parts<R: Rng + ?Sized>(z: &PartLatent, parts: &[u8], rng: &mut R) -> Result<PartLatent> {
    check_parts(parts, z.parts)?;
    let mut out = z.clone();
    for k in 1..=z.parts {
        if parts.contains(&(k as u8)) {
            for v in out.row_mut(k) {
                *v = rng.sample(StandardNormal);
            }
        }
    }
    Ok(out)
}

pub fn merge_latents(z_body: &PartLatent, z_garment: &PartLatent, garment_parts: &[u8]) -> Result<PartLatent> {
    if (z_body.parts, z_body.dims) != (z_garment.parts, z_garment.dims) {
        return Err(Error::Shape(format!(
            "body latent {}x{} vs garment latent {}x{}",
            z_body.parts, z_body.dims, z_garment.parts, z_garment.dims
        )));
    }
    check_parts(garment_parts, z_body.parts)?;
    let mut out = z_body.clone();
    for &p in garment_parts {
        out.row_mut(p as usize).copy_from_slice(z_garment.row(p as usize));
    }
    Ok(out)
}

/// `z1 * t + z2 * (1 - t)`: `t = 0` gives `z2` and `t = 1` gives `z1`.
pub fn interpolate(z1: &PartLatent, z2: &PartLatent, t: f64) -> Result<PartLatent> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("interpolation weight {t} outside [0, 1]")));
    }
    if (z1.parts, z1.dims) != (z2.parts, z2.dims) {
        return Err(Error::Shape("interpolation endpoints differ in shape".into()));
    }
    let values = z1.values.iter().zip(&z2.values).map(|(&a, &b)| a * t + b * (1.0 - t)).collect();
    Ok(PartLatent { parts: z1.parts, dims: z1.dims, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, m: usize, part: Vec<u8>) -> DenseBodyMap {
        let n = h * w;
        DenseBodyMap::new(h, w, m, part, vec![0.0; n], vec![0.0; n]).unwrap()
    }

    #[test]
    fn vanishing_variance_returns_mean() {
        let mu = PartLatent::new(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, -7.5]).unwrap();
        let lv = PartLatent::new(2, 3, vec![-60.0; 6]).unwrap();
        let z = sample_reparam(&GaussianParams::new(mu.clone(), lv).unwrap(), &mut ChaCha8Rng::seed_from_u64(1));
        for (a, b) in z.values().iter().zip(mu.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn standard_params_pass_raw_draws_through() {
        let z = sample_reparam(&GaussianParams::standard(3, 2), &mut ChaCha8Rng::seed_from_u64(9));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        assert_eq!(z.values(), raw.as_slice());
    }

    #[test]
    fn reparam_moments_monte_carlo() {
        let n = 100_000;
        let lv = (9.0f64).ln();
        let params = GaussianParams::new(
            PartLatent::new(1, n, vec![2.0; n]).unwrap(),
            PartLatent::new(1, n, vec![lv; n]).unwrap(),
        )
        .unwrap();
        let z = sample_reparam(&params, &mut ChaCha8Rng::seed_from_u64(3));
        let mean = z.values().iter().sum::<f64>() / n as f64;
        let var = z.values().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // standard errors: sigma / sqrt(n) for the mean, sigma^2 sqrt(2 / (n - 1)) for the variance
        let se_mean = 3.0 / (n as f64).sqrt();
        let se_var = 9.0 * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - 9.0).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_to_standard_normal(&GaussianParams::standard(24, 16)), 0.0);
        let one = GaussianParams::new(
            PartLatent::new(1, 1, vec![1.0]).unwrap(),
            PartLatent::new(1, 1, vec![0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(kl_to_standard_normal(&one), 0.5);
    }

    #[test]
    fn kl_graph_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu = PartLatent::standard_normal(3, 4, &mut rng);
        let lv = PartLatent::standard_normal(3, 4, &mut rng);
        let want = kl_to_standard_normal(&GaussianParams::new(mu.clone(), lv.clone()).unwrap());
        let tape = Tape::new();
        let got = kl_var(tape.constant(mu.to_tensor()), tape.constant(lv.to_tensor())).item();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn warp_examples() {
        let z = PartLatent::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let out = warp_broadcast(&z, &map(2, 2, 1, vec![1; 4])).unwrap();
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_eq!(out.at(y, x), vec![0.1, 0.2, 0.3]);
        }
        let out = warp_broadcast(&z, &map(2, 2, 1, vec![0; 4])).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));

        let z = PartLatent::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = warp_broadcast(&z, &map(2, 2, 2, vec![1, 2, 0, 1])).unwrap();
        assert_eq!(out.at(0, 0), vec![1.0, 2.0]);
        assert_eq!(out.at(0, 1), vec![3.0, 4.0]);
        assert_eq!(out.at(1, 0), vec![0.0, 0.0]);
        assert_eq!(out.at(1, 1), vec![1.0, 2.0]);
    }

    #[test]
    fn warp_rejects_too_few_rows() {
        let z = PartLatent::zeros(2, 2);
        assert!(warp_broadcast(&z, &map(1, 1, 3, vec![3])).is_err());
    }

    #[test]
    fn noparts_examples() {
        let z = [0.5, -1.0, 2.0, 4.0];
        let bg = warp_broadcast_noparts(&z, &map(2, 2, 2, vec![0; 4]));
        assert!(bg.values().iter().all(|&v| v == 0.0));
        let full = warp_broadcast_noparts(&z, &map(2, 2, 2, vec![1, 2, 2, 1]));
        assert!((0..2).all(|y| (0..2).all(|x| full.at(y, x) == z)));
        let mixed = warp_broadcast_noparts(&z, &map(1, 3, 2, vec![2, 0, 1]));
        assert_eq!(mixed.at(0, 0), z);
        assert_eq!(mixed.at(0, 1), vec![0.0; 4]);
        assert_eq!(mixed.at(0, 2), z);
    }

    #[test]
    fn warp_gradient_is_part_pixel_count() {
        let m = map(2, 3, 3, vec![1, 1, 3, 0, 1, 3]);
        let z = PartLatent::new(3, 2, vec![0.3; 6]).unwrap();
        let tape = Tape::new();
        let zv = tape.input(z.to_tensor());
        let out = warp_broadcast_var(&tape, zv, &[&m], false);
        let g = tape.backward(out.sum());
        assert_eq!(g.wrt(zv).unwrap().data(), &[3.0, 3.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn graph_warp_matches_plain_warp() {
        let m = map(2, 2, 2, vec![1, 2, 0, 1]);
        let z = PartLatent::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let tape = Tape::new();
        let parts = warp_broadcast_var(&tape, tape.constant(z.to_tensor()), &[&m], false);
        assert_eq!(parts.value().data(), warp_broadcast(&z, &m).unwrap().values());
        let flat = warp_broadcast_var(&tape, tape.constant(z.to_tensor()), &[&m], true);
        assert_eq!(flat.value().data(), warp_broadcast_noparts(z.values(), &m).values());
    }

    #[test]
    fn resample_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = PartLatent::standard_normal(4, 3, &mut rng);
        assert_eq!(resample_parts(&z, &[], &mut rng).unwrap(), z);
        let all = resample_parts(&z, &[1, 2, 3, 4], &mut rng).unwrap();
        assert!(all.values().iter().zip(z.values()).all(|(a, b)| a != b));
        let one = resample_parts(&z, &[3], &mut rng).unwrap();
        for k in [1, 2, 4] {
            assert_eq!(one.row(k), z.row(k));
        }
        assert_ne!(one.row(3), z.row(3));
        assert!(matches!(resample_parts(&z, &[5], &mut rng), Err(Error::InvalidPart { .. })));
    }

    #[test]
    fn merge_examples() {
        let b = PartLatent::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let g = PartLatent::new(3, 1, vec![10.0, 20.0, 30.0]).unwrap();
        assert_eq!(merge_latents(&b, &g, &[]).unwrap(), b);
        assert_eq!(merge_latents(&b, &g, &[1, 2, 3]).unwrap(), g);
        assert_eq!(merge_latents(&b, &g, &[2]).unwrap().values(), &[1.0, 20.0, 3.0]);
        assert_eq!(merge_latents(&b, &g, &[2]).unwrap(), merge_latents(&g, &b, &[1, 3]).unwrap());
        assert!(merge_latents(&b, &PartLatent::zeros(3, 2), &[]).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let z1 = PartLatent::new(2, 2, vec![0.0; 4]).unwrap();
        let z2 = PartLatent::new(2, 2, vec![2.0; 4]).unwrap();
        assert_eq!(interpolate(&z1, &z2, 1.0).unwrap(), z1);
        assert_eq!(interpolate(&z1, &z2, 0.0).unwrap(), z2);
        assert_eq!(interpolate(&z1, &z2, 0.5).unwrap().values(), &[1.0; 4]);
        assert!(interpolate(&z1, &z2, 1.5).is_err());
        assert!(interpolate(&z1, &z2, -0.1).is_err());
    }

    #[test]
    fn latent_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.json");
        let z = PartLatent::standard_normal(6, 4, &mut ChaCha8Rng::seed_from_u64(2));
        z.save(&path).unwrap();
        assert_eq!(PartLatent::load(&path).unwrap(), z);
    }

    fn arb_map() -> impl Strategy<Value = (usize, DenseBodyMap)> {
        (1usize..=24, 1usize..6, 1usize..6).prop_flat_map(|(m, h, w)| {
            proptest::collection::vec(0..=m as u8, h * w).prop_map(move |part| (m, map(h, w, m, part)))
        })
    }

    proptest! {
        #[test]
        fn warp_output_is_piecewise_constant((m, dm) in arb_map(), n in 1usize..=16, seed in any::<u64>()) {
            let z = PartLatent::standard_normal(m, n, &mut ChaCha8Rng::seed_from_u64(seed));
            let out = warp_broadcast(&z, &dm).unwrap();
            for y in 0..dm.height() {
                for x in 0..dm.width() {
                    let k = dm.part_at(y, x) as usize;
                    let want = if k == 0 { vec![0.0; n] } else { z.row(k).to_vec() };
                    prop_assert_eq!(out.at(y, x), want);
                }
            }
        }

        #[test]
        fn kl_is_nonnegative(mu in proptest::collection::vec(-5.0f64..5.0, 1..20), seed in any::<u64>()) {
            let n = mu.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lv: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p = GaussianParams::new(PartLatent::new(1, n, mu).unwrap(), PartLatent::new(1, n, lv).unwrap()).unwrap();
            prop_assert!(kl_to_standard_normal(&p) >= 0.0);
        }

        #[test]
        fn merge_and_resample_touch_only_named_rows(seed in any::<u64>(), mask in 0u32..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = PartLatent::standard_normal(6, 3, &mut rng);
            let b = PartLatent::standard_normal(6, 3, &mut rng);
            let set: Vec<u8> = (1..=6u8).filter(|k| mask & (1 << (k - 1)) != 0).collect();
            let merged = merge_latents(&a, &b, &set).unwrap();
            let fresh = resample_parts(&a, &set, &mut rng).unwrap();
            for k in 1..=6usize {
                if set.contains(&(k as u8)) {
                    prop_assert_eq!(merged.row(k), b.row(k));
                } else {
                    prop_assert_eq!(merged.row(k), a.row(k));
                    prop_assert_eq!(fresh.row(k), a.row(k));
                }
            }
        }

        #[test]
        fn interpolating_a_point_with_itself_is_constant(seed in any::<u64>(), t in 0.0f64..=1.0) {
            let z = PartLatent::standard_normal(4, 4, &mut ChaCha8Rng::seed_from_u64(seed));
            let out = interpolate(&z, &z, t).unwrap();
            for (a, b) in out.values().iter().zip(z.values()) {
                prop_assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
            }
        }
    }
}
