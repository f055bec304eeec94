//! Sample diversity, FID, SSIM and part-locality metrics, plus the report
//! that runs them against a trained bundle.
//!
//! Diversity and FID go through a [`FeatureExtractor`]; values are only
//! comparable between runs that used the same extractor.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use partwarp_autodiff::{Tape, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{foreground_mask, part_mask, BinaryMask, DenseBodyMap};
use crate::data::{sample_pair, Dataset};
use crate::error::{Error, Result};
use crate::inference::{part_sample, pose_transfer, sample_appearance, Encoding};
use crate::latent::PartLatent;
use crate::losses::FeatureExtractor;
use crate::networks::ModelBundle;
use crate::parts::PartGroups;
use crate::raster::Image;

/// Extractor activations for one image.
pub fn image_features(fx: &dyn FeatureExtractor, image: &Image) -> Vec<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(image.to_signed_tensor());
    fx.features(&tape, x).into_iter().map(|v| (*v.value()).clone()).collect()
}

/// Sum over layers of the mean absolute activation difference.
pub fn feature_distance(a: &[Tensor], b: &[Tensor]) -> f64 {
    assert_eq!(a.len(), b.len(), "layer count");
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            assert_eq!(x.shape(), y.shape());
            x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64
        })
        .sum()
}

pub fn perceptual_distance(fx: &dyn FeatureExtractor, a: &Image, b: &Image) -> f64 {
    feature_distance(&image_features(fx, a), &image_features(fx, b))
}

/// Mean of `dist` over all unordered pairs of `items`.
pub fn pairwise_mean<T>(items: &[T], mut dist: impl FnMut(&T, &T) -> f64) -> Result<f64> {
    let n = items.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("pairwise statistic needs at least 2 samples, got {n}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += dist(&items[i], &items[j]);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub mean: f64,
    pub per_pose: Vec<f64>,
}

/// Mean pairwise perceptual distance within each pose, averaged over poses.
pub fn pairwise_perceptual_diversity(samples_per_pose: &[Vec<Image>], fx: &dyn FeatureExtractor) -> Result<Diversity> {
    if samples_per_pose.is_empty() {
        return Err(Error::InvalidArgument("no poses to measure diversity over".into()));
    }
    let per_pose = samples_per_pose
        .iter()
        .map(|set| {
            let feats: Vec<_> = set.iter().map(|im| image_features(fx, im)).collect();
            pairwise_mean(&feats, |a, b| feature_distance(a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_pose.iter().sum::<f64>() / per_pose.len() as f64;
    Ok(Diversity { mean, per_pose })
}

/// Added to every covariance diagonal before the matrix square root.
pub const FID_EPS: f64 = 1e-9;

/// Sample mean and unbiased covariance of row vectors.
pub fn gaussian_fit(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("covariance needs at least 2 samples, got {n}")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

/// Symmetric PSD square root; negative eigenvalues from rounding clamp to 0.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between two Gaussians, with `eps` added to both
/// covariance diagonals.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
    eps: f64,
) -> f64 {
    let d = mu1.len();
    let reg = DMatrix::identity(d, d) * eps;
    let s1 = cov1 + &reg;
    let s2 = cov2 + &reg;
    // Tr sqrt(S1 S2) is the nuclear norm of S1^1/2 S2^1/2; taking singular
    // values avoids squaring the spectrum, which loses the small eigenvalues
    let cross = (sqrt_psd(s1.clone()) * sqrt_psd(s2.clone())).singular_values().sum();
    (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross
}

/// FID between two sets of feature vectors.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m1, c1) = gaussian_fit(a)?;
    let (m2, c2) = gaussian_fit(b)?;
    if m1.len() != m2.len() {
        return Err(Error::Shape(format!("feature sizes {} and {} differ", m1.len(), m2.len())));
    }
    Ok(frechet_distance(&m1, &c1, &m2, &c2, FID_EPS))
}

/// Spatial mean of the extractor's last layer.
pub fn pooled_features(fx: &dyn FeatureExtractor, image: &Image) -> Vec<f64> {
    let last = image_features(fx, image).pop().expect("extractor reports at least one layer");
    let c = last.dim(1);
    let hw = last.len() / c;
    last.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect()
}

pub fn fid(generated: &[Image], reference: &[Image], fx: &dyn FeatureExtractor) -> Result<f64> {
    let a: Vec<_> = generated.iter().map(|im| pooled_features(fx, im)).collect();
    let b: Vec<_> = reference.iter().map(|im| pooled_features(fx, im)).collect();
    fid_from_features(&a, &b)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over 11 x 11 Gaussian windows (sigma 1.5) fully inside the
/// image and over channels, for images in `[0, 1]`.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (h, w) = (a.height(), a.width());
    if (b.height(), b.width()) != (h, w) {
        return Err(Error::Shape(format!("{h}x{w} vs {}x{}", b.height(), b.width())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("SSIM needs images of at least {SSIM_WINDOW} px")));
    }
    let k = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    let mut count = 0;
    for ch in 0..3 {
        let x: Vec<f64> = a.data().iter().skip(ch).step_by(3).copied().collect();
        let y: Vec<f64> = b.data().iter().skip(ch).step_by(3).copied().collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&prod(&x, &x), h, w, &k);
        let syy = filter_valid(&prod(&y, &y), h, w, &k);
        let sxy = filter_valid(&prod(&x, &y), h, w, &k);
        for i in 0..mx.len() {
            let (vx, vy, cov) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean over sample pairs of the channel-summed L1 inside `mask`, divided
/// by the mask's pixel count. An empty mask gives 0.
pub fn masked_pairwise_l1(samples: &[Image], mask: &BinaryMask) -> Result<f64> {
    for s in samples {
        if (s.height(), s.width()) != (mask.height(), mask.width()) {
            return Err(Error::Shape("sample and mask differ in size".into()));
        }
    }
    let area = mask.count();
    if area == 0 {
        warn!("variation over an empty mask is reported as 0");
        pairwise_mean(samples, |_, _| 0.0)?;
        return Ok(0.0);
    }
    pairwise_mean(samples, |a, b| {
        let mut sum = 0.0;
        for (p, _) in mask.bits().iter().enumerate().filter(|(_, &on)| on) {
            for c in 0..3 {
                sum += (a.data()[p * 3 + c] - b.data()[p * 3 + c]).abs();
            }
        }
        sum / area as f64
    })
}

pub fn variation_part(samples: &[Image], map: &DenseBodyMap, parts: &[u8]) -> Result<f64> {
    masked_pairwise_l1(samples, &part_mask(map, parts)?)
}

/// Variation over the foreground outside `parts`.
pub fn variation_rest(samples: &[Image], map: &DenseBodyMap, parts: &[u8]) -> Result<f64> {
    masked_pairwise_l1(samples, &foreground_mask(map).minus(&part_mask(map, parts)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub poses: usize,
    pub samples_per_pose: usize,
    /// Part groups whose locality is measured.
    pub groups: Vec<String>,
    /// Same-identity pairs scored by SSIM after pose transfer; 0 skips.
    pub transfer_pairs: usize,
    pub fid: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { poses: 5, samples_per_pose: 16, groups: vec!["torso".into()], transfer_pairs: 8, fid: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityRow {
    pub group: String,
    pub parts: Vec<u8>,
    pub variation_part: f64,
    pub variation_rest: f64,
    pub rest_over_part: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub step: u64,
    pub noparts: bool,
    pub pose_frames: Vec<usize>,
    pub samples_per_pose: usize,
    pub diversity: Diversity,
    pub fid: Option<f64>,
    pub fid_generated: usize,
    pub fid_reference: usize,
    pub transfer_pairs: usize,
    pub transfer_ssim: Option<f64>,
    pub locality: Vec<LocalityRow>,
}

/// Mean variation inside and outside `parts` when only those rows are
/// resampled, averaged over `maps`.
pub fn part_locality(
    bundle: &ModelBundle,
    maps: &[&DenseBodyMap],
    parts: &[u8],
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let cfg = &bundle.config;
    let (mut vp, mut vr) = (0.0, 0.0);
    for map in maps {
        let base = PartLatent::standard_normal(cfg.parts, cfg.latent_dim, rng);
        let images: Vec<Image> =
            part_sample(bundle, map, &base, parts, samples, rng)?.into_iter().map(|g| g.image).collect();
        vp += variation_part(&images, map, parts)?;
        vr += variation_rest(&images, map, parts)?;
    }
    let n = maps.len().max(1) as f64;
    Ok((vp / n, vr / n))
}

/// Runs every metric with poses, pairs and latents drawn from `seed`.
pub fn eval_report(
    bundle: &ModelBundle,
    dataset: &Dataset,
    groups: &PartGroups,
    fx: &dyn FeatureExtractor,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let frames = dataset.frames();
    if frames.is_empty() {
        return Err(Error::Dataset("no frames to evaluate on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pose_frames = sample_indices(&mut rng, frames.len(), config.poses.min(frames.len())).into_vec();
    pose_frames.sort_unstable();
    let maps: Vec<&DenseBodyMap> = pose_frames.iter().map(|&i| &frames[i].map).collect();

    let mut sets = Vec::with_capacity(maps.len());
    for map in &maps {
        let images: Vec<Image> =
            sample_appearance(bundle, map, config.samples_per_pose, &mut rng)?.into_iter().map(|g| g.image).collect();
        sets.push(images);
    }
    let diversity = pairwise_perceptual_diversity(&sets, fx)?;

    let generated: Vec<Image> = sets.iter().flatten().cloned().collect();
    let reference: Vec<Image> = frames.iter().map(|f| f.image.clone()).collect();
    let fid_value = if config.fid { Some(fid(&generated, &reference, fx)?) } else { None };

    let mut ssims = Vec::with_capacity(config.transfer_pairs);
    for _ in 0..config.transfer_pairs {
        let (s, t) = sample_pair(&dataset.index, &mut rng)?;
        let (src, tgt) = (&frames[s], &frames[t]);
        let out = pose_transfer(bundle, (&src.image, &src.map), &[&tgt.map], Encoding::Mean)?;
        ssims.push(ssim(&out[0].image, &tgt.image)?);
    }
    let transfer_ssim = (!ssims.is_empty()).then(|| ssims.iter().sum::<f64>() / ssims.len() as f64);

    let mut locality = Vec::new();
    for name in &config.groups {
        let parts = groups.resolve(name)?;
        let (variation_part, variation_rest) =
            part_locality(bundle, &maps, &parts, config.samples_per_pose, &mut rng)?;
        locality.push(LocalityRow {
            group: name.clone(),
            parts,
            variation_part,
            variation_rest,
            rest_over_part: variation_rest / variation_part,
        });
    }

    Ok(EvalReport {
        seed,
        step: bundle.step,
        noparts: bundle.config.noparts,
        pose_frames,
        samples_per_pose: config.samples_per_pose,
        diversity,
        fid: fid_value,
        fid_generated: generated.len(),
        fid_reference: reference.len(),
        transfer_pairs: ssims.len(),
        transfer_ssim,
        locality,
    })
}

pub const REPORT_FILE: &str = "report.json";
pub const DIVERSITY_FILE: &str = "diversity.csv";

/// Writes the report as JSON plus a per-pose diversity CSV.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&path, e))?;
    let mut csv = String::from("pose,frame,diversity\n");
    for (i, (d, f)) in report.diversity.per_pose.iter().zip(&report.pose_frames).enumerate() {
        csv.push_str(&format!("{i},{f},{d}\n"));
    }
    let path = dir.join(DIVERSITY_FILE);
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{PixelExtractor, StubExtractor};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::new(h, w, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn diversity_of_identical_samples_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_image(8, 8, &mut rng);
        let d = pairwise_perceptual_diversity(&[vec![a.clone(), a.clone(), a]], &StubExtractor::default()).unwrap();
        assert_eq!(d.mean, 0.0);
    }

    #[test]
    fn diversity_of_two_samples_is_their_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random_image(8, 8, &mut rng), random_image(8, 8, &mut rng));
        let fx = StubExtractor::default();
        let d = pairwise_perceptual_diversity(&[vec![a.clone(), b.clone()]], &fx).unwrap();
        assert_eq!(d.mean, perceptual_distance(&fx, &a, &b));
        assert!(pairwise_perceptual_diversity(&[vec![a]], &fx).is_err());
    }

    #[test]
    fn diversity_of_four_matches_six_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set: Vec<Image> = (0..4).map(|_| random_image(8, 8, &mut rng)).collect();
        let fx = StubExtractor::default();
        let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        let brute = pairs.iter().map(|&(i, j)| perceptual_distance(&fx, &set[i], &set[j])).sum::<f64>() / 6.0;
        let d = pairwise_perceptual_diversity(&[set], &fx).unwrap();
        assert!((d.mean - brute).abs() <= 1e-9);
    }

    #[test]
    fn fid_of_a_set_with_itself_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [1, 8, 64] {
            let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
            let v = fid_from_features(&rows, &rows).unwrap();
            assert!(v.abs() <= 1e-6, "d = {d}: {v}");
        }
    }

    #[test]
    fn scalar_gaussian_fid_is_the_mean_gap_squared() {
        // two point sets with exact sample means 0 and 1 and unbiased variance 1
        let n = 10;
        let a = ((n - 1) as f64 / n as f64).sqrt();
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![if i % 2 == 0 { a } else { -a }]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] + 1.0]).collect();
        let v = fid_from_features(&x, &y).unwrap();
        assert!((v - 1.0).abs() <= 1e-6, "{v}");
        let m = |v: f64| DVector::from_element(1, v);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!((frechet_distance(&m(0.0), &one, &m(1.0), &one, FID_EPS) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn fid_rejects_tiny_sets() {
        assert!(fid_from_features(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn fid_agrees_with_diagonal_closed_form() {
        // independent coordinates: FID = sum (dmu^2 + s1 + s2 - 2 sqrt(s1 s2))
        let mu1: DVector<f64> = DVector::from_vec(vec![0.0, 1.0, -2.0]);
        let mu2 = DVector::from_vec(vec![0.5, 1.0, 0.0]);
        let (s1, s2): ([f64; 3], [f64; 3]) = ([1.0, 4.0, 0.25], [2.0, 1.0, 0.25]);
        let expect: f64 = (0..3).map(|i| (mu1[i] - mu2[i]).powi(2) + s1[i] + s2[i] - 2.0 * (s1[i] * s2[i]).sqrt()).sum();
        let c1 = DMatrix::from_diagonal(&DVector::from_row_slice(&s1));
        let c2 = DMatrix::from_diagonal(&DVector::from_row_slice(&s2));
        assert!((frechet_distance(&mu1, &c1, &mu2, &c2, 0.0) - expect).abs() < 1e-12);
    }

    /// Direct per-window evaluation of the SSIM definition.
    fn ssim_textbook(a: &Image, b: &Image) -> f64 {
        let g: Vec<f64> = {
            let raw: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        };
        let (h, w) = (a.height(), a.width());
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut acc = Vec::new();
        for c in 0..3 {
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = g[i] * g[j];
                            mx += wt * a.pixel(y0 + i, x0 + j)[c];
                            my += wt * b.pixel(y0 + i, x0 + j)[c];
                        }
                    }
                    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = g[i] * g[j];
                            let dx = a.pixel(y0 + i, x0 + j)[c] - mx;
                            let dy = b.pixel(y0 + i, x0 + j)[c] - my;
                            vx += wt * dx * dx;
                            vy += wt * dy * dy;
                            cxy += wt * dx * dy;
                        }
                    }
                    acc.push(((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
                }
            }
        }
        acc.iter().sum::<f64>() / acc.len() as f64
    }

    #[test]
    fn ssim_matches_textbook_and_self_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(24, 20, &mut rng);
        let b = random_image(24, 20, &mut rng);
        assert!((ssim(&a, &b).unwrap() - ssim_textbook(&a, &b)).abs() < 1e-4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = Image::new(24, 20, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert!(ssim(&random_image(8, 8, &mut rng), &random_image(8, 8, &mut rng)).is_err());
    }

    fn four_by_four() -> DenseBodyMap {
        // part 1 in the top-left 2x2 block, part 2 elsewhere on the top half
        let parts = vec![1, 1, 2, 2, 1, 1, 2, 2, 0, 0, 0, 0, 0, 0, 0, 0];
        let uv: Vec<f64> = parts.iter().map(|&p| if p == 0 { 0.0 } else { 0.5 }).collect();
        DenseBodyMap::new(4, 4, 2, parts, uv.clone(), uv).unwrap()
    }

    #[test]
    fn variation_hand_computed_case() {
        let map = four_by_four();
        let a = Image::filled(4, 4, [0.2, 0.3, 0.4]);
        let mut b = a.clone();
        for y in 0..2 {
            for x in 0..2 {
                let p = a.pixel(y, x);
                b.set_pixel(y, x, [p[0] + 0.5, p[1] + 0.5, p[2] + 0.5]);
            }
        }
        let s = [a.clone(), b];
        assert!((variation_part(&s, &map, &[1]).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(variation_rest(&s, &map, &[1]).unwrap(), 0.0);
        let same = [a.clone(), a];
        assert_eq!(variation_part(&same, &map, &[1]).unwrap(), 0.0);
        assert_eq!(variation_rest(&same, &map, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn variation_over_empty_mask_is_zero() {
        let map = DenseBodyMap::background(4, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = [random_image(4, 4, &mut rng), random_image(4, 4, &mut rng)];
        assert_eq!(variation_part(&s, &map, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn report_runs_end_to_end() {
        use crate::data::{make_synthetic_dataset, SynthSpec};
        use crate::networks::NetConfig;
        use crate::parts::PartTable;
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { identities: 2, poses_per_identity: 3, image_size: 32, atlas_size: 32, ..SynthSpec::default() };
        make_synthetic_dataset(&spec, dir.path(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let data = Dataset::load(dir.path(), None, 6).unwrap();
        let net = NetConfig {
            image_size: 32,
            atlas_size: 32,
            latent_dim: 2,
            base_channels: 4,
            encoder_channels: 4,
            disc_channels: 4,
            gen_res_blocks: 1,
            ..NetConfig::desk()
        };
        let bundle = ModelBundle::init(net, 1).unwrap();
        let groups = PartGroups::builtin(PartTable::Mannequin);
        let cfg = EvalConfig { poses: 3, samples_per_pose: 3, transfer_pairs: 2, ..EvalConfig::default() };
        let fx = StubExtractor::default();
        let report = eval_report(&bundle, &data, &groups, &fx, &cfg, 7).unwrap();
        assert_eq!(report, eval_report(&bundle, &data, &groups, &fx, &cfg, 7).unwrap());
        assert_eq!(report.pose_frames.len(), 3);
        assert_eq!(report.fid_generated, 9);
        assert!(report.diversity.mean > 0.0);
        assert_eq!(report.locality[0].parts, vec![2]);
        write_report(&dir.path().join("eval"), &report).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("eval").join(DIVERSITY_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    fn shuffled<T: Clone>(v: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
        use rand::seq::SliceRandom;
        let mut out = v.to_vec();
        out.shuffle(rng);
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn metrics_ignore_sample_order(seed in 0u64..10_000, n in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set: Vec<Image> = (0..n).map(|_| random_image(4, 4, &mut rng)).collect();
            let perm = shuffled(&set, &mut rng);
            let map = four_by_four();
            let fx = PixelExtractor;
            let d1 = pairwise_perceptual_diversity(std::slice::from_ref(&set), &fx).unwrap().mean;
            let d2 = pairwise_perceptual_diversity(&[perm.clone()], &fx).unwrap().mean;
            prop_assert!((d1 - d2).abs() < 1e-12);
            let v1 = variation_part(&set, &map, &[1]).unwrap();
            let v2 = variation_part(&perm, &map, &[1]).unwrap();
            prop_assert!((v1 - v2).abs() < 1e-12);
            let rows: Vec<Vec<f64>> = set.iter().map(|im| im.data()[..3].to_vec()).collect();
            let other: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random()).collect()).collect();
            let f1 = fid_from_features(&rows, &other).unwrap();
            let f2 = fid_from_features(&shuffled(&rows, &mut rng), &other).unwrap();
            prop_assert!((f1 - f2).abs() < 1e-9);
            let f3 = fid_from_features(&other, &rows).unwrap();
            prop_assert!((f1 - f3).abs() < 1e-6);
        }

        #[test]
        fn variation_is_linear_in_a_masked_offset(seed in 0u64..10_000, offset in 0.01f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = four_by_four();
            let base = random_image(4, 4, &mut rng);
            let shift = |k: f64| {
                let mut im = base.clone();
                for y in 0..2 {
                    for x in 0..2 {
                        let p = im.pixel(y, x);
                        im.set_pixel(y, x, [p[0] + k, p[1] + k, p[2] + k]);
                    }
                }
                im
            };
            let one = variation_part(&[base.clone(), shift(offset)], &map, &[1]).unwrap();
            let two = variation_part(&[base.clone(), shift(2.0 * offset)], &map, &[1]).unwrap();
            prop_assert!((two - 2.0 * one).abs() < 1e-12);
            prop_assert!((one - 3.0 * offset).abs() < 1e-12);
        }

        #[test]
        fn fid_self_distance_vanishes(seed in 0u64..10_000, d in 1usize..=64, n in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            prop_assert!(fid_from_features(&rows, &rows).unwrap().abs() <= 1e-6);
        }
    }
}
