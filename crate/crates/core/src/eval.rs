//! Fréchet distance over embedded image sets, masked PSNR against clean
//! ground truth, and retrieval-based localization error.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::masking::BinaryMask;
use crate::models::images_to_tensor;
use crate::nn::{Conv2d, ParamStore, Tape};
use crate::pairing::distance;
use crate::synthdata::SynthDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSpec {
    pub seed: u64,
    pub dim: usize,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            seed: 1234,
            dim: 64,
        }
    }
}

/// Fixed-seed random three-layer convolutional embedder with global average
/// pooling.
#[derive(Clone, Debug)]
pub struct Embedder {
    spec: EmbedderSpec,
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl Embedder {
    pub fn new(spec: &EmbedderSpec) -> Result<Self> {
        if spec.dim < 4 {
            return Err(Error::Config(format!(
                "embedder dim must be at least 4, got {}",
                spec.dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let widths = [3, spec.dim / 4, spec.dim / 2, spec.dim];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(k, p)| {
                let he = (2.0 / (p[0] * 9) as f64).sqrt();
                Conv2d::new(
                    &mut store,
                    &format!("embed{k}"),
                    p[0],
                    p[1],
                    3,
                    2,
                    1,
                    he,
                    &mut rng,
                )
            })
            .collect();
        Ok(Embedder {
            spec: spec.clone(),
            store,
            convs,
        })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let mut tape = Tape::new();
            let mut x = tape.input(images_to_tensor(chunk)?);
            for conv in &self.convs {
                x = conv.forward(&mut tape, &self.store, x);
                x = tape.relu(x);
            }
            let t = tape.value(x);
            let (n, c, h, w) = t.dims4();
            for b in 0..n {
                out.push(
                    (0..c)
                        .map(|k| {
                            let start = (b * c + k) * h * w;
                            t.data()[start..start + h * w].iter().sum::<f64>() / (h * w) as f64
                        })
                        .collect(),
                );
            }
        }
        Ok(out)
    }
}

/// Gaussian fit of an embedded set: mean and unbiased covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(invalid!(
                "feature statistics need at least 2 samples, got {}",
                features.len()
            ));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(invalid!("feature vectors must share a positive dimension"));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut covariance = vec![0.0; d * d];
        for f in features {
            for a in 0..d {
                let da = f[a] - mean[a];
                for b in a..d {
                    covariance[a * d + b] += da * (f[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = covariance[a * d + b] / (n - 1.0);
                covariance[a * d + b] = v;
                covariance[b * d + a] = v;
            }
        }
        Ok(FeatureStats {
            mean,
            covariance,
            count: features.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn feature_stats(images: &[Image], embedder: &Embedder) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(invalid!(
            "feature statistics need at least 2 images, got {}",
            images.len()
        ));
    }
    FeatureStats::from_features(&embedder.embed(images)?)
}

fn sym_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.covariance.len() != d * d || b.covariance.len() != d * d {
        return Err(invalid!(
            "feature statistics differ in dimension ({d} vs {})",
            b.dim()
        ));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let sa = DMatrix::from_row_slice(d, d, &a.covariance);
    let sb = DMatrix::from_row_slice(d, d, &b.covariance);
    let root_a = sym_sqrt(sa.clone());
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

pub const PSNR_CAP_DB: f64 = 99.0;

/// `10 log10(2² / MSE)` over background pixels, capped at 99 dB.
pub fn masked_psnr(pred: &Image, clean: &Image, mask: &BinaryMask) -> Result<f64> {
    pred.ensure_same_shape(clean, "masked_psnr")?;
    let (h, w, c) = pred.shape();
    if mask.shape() != (h, w) {
        return Err(invalid!(
            "masked_psnr: mask {:?} does not match image {h}x{w}",
            mask.shape()
        ));
    }
    let count = mask.background_count();
    if count == 0 {
        return Err(Error::empty_mask("masked_psnr"));
    }
    let mut sum = 0.0;
    for ch in 0..c {
        for p in mask.background_positions() {
            let (i, j) = (p / w, p % w);
            sum += (pred.get(ch, i, j) - clean.get(ch, i, j)).powi(2);
        }
    }
    let mse = sum / (count * c) as f64;
    if mse < 1e-12 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (4.0 / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    /// Library index matched by each query.
    pub matches: Vec<usize>,
    pub errors: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Match each query to the library image of highest cosine similarity and
/// report the distance between the query's pose and the match's pose.
pub fn localize(
    queries: &[Image],
    query_poses: &[[f64; 2]],
    library: &[Image],
    library_poses: &[[f64; 2]],
    embedder: &Embedder,
) -> Result<Localization> {
    if library.is_empty() {
        return Err(invalid!("localization library is empty"));
    }
    if queries.is_empty() {
        return Err(invalid!("no queries to localize"));
    }
    if library.len() != library_poses.len() || queries.len() != query_poses.len() {
        return Err(invalid!("images and poses differ in count"));
    }
    let lib = embedder.embed(library)?;
    let qs = embedder.embed(queries)?;
    let mut matches = Vec::with_capacity(qs.len());
    let mut errors = Vec::with_capacity(qs.len());
    for (q, pose) in qs.iter().zip(query_poses) {
        let best = lib
            .iter()
            .map(|l| cosine(q, l))
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bs), (i, s)| {
                if s > bs {
                    (i, s)
                } else {
                    (bi, bs)
                }
            })
            .0;
        matches.push(best);
        errors.push(distance(*pose, library_poses[best]));
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok(Localization {
        matches,
        errors,
        mean,
        median,
    })
}

/// Metrics of one set of translated source frames against a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dataset_hash: String,
    pub embedder: EmbedderSpec,
    pub frames: usize,
    pub fid: f64,
    pub masked_psnr_db: f64,
    pub loc_err_mean: f64,
    pub loc_err_median: f64,
}

/// Evaluate translated source frames `(frame_id, image)`:
/// FID against the benign frames at the same locations, mean masked PSNR
/// against the clean ground truth (source sprites masked out), and
/// localization of each translation within those benign frames.
pub fn evaluate(
    preds: &[(String, Image)],
    dataset: &SynthDataset,
    embedder: &Embedder,
) -> Result<MetricsReport> {
    if preds.len() < 2 {
        return Err(invalid!(
            "evaluation needs at least 2 predictions, got {}",
            preds.len()
        ));
    }
    let mut images = Vec::with_capacity(preds.len());
    let mut reference = Vec::with_capacity(preds.len());
    let mut query_poses = Vec::with_capacity(preds.len());
    let mut library_poses = Vec::with_capacity(preds.len());
    let mut psnr = 0.0;
    for (id, img) in preds {
        let k = dataset
            .source
            .index_of(id)
            .ok_or_else(|| invalid!("prediction {id:?} is not a frame of the dataset"))?;
        let tk = dataset
            .target
            .index_of(id)
            .ok_or_else(|| invalid!("frame {id:?} has no benign counterpart"))?;
        psnr += masked_psnr(img, &dataset.clean[k], &dataset.source.masks[k])?;
        images.push(img.clone());
        query_poses.push(dataset.source.poses.frames()[k].position);
        reference.push(dataset.target.images[tk].clone());
        library_poses.push(dataset.target.poses.frames()[tk].position);
    }
    let fid = frechet_distance(
        &feature_stats(&images, embedder)?,
        &feature_stats(&reference, embedder)?,
    )?;
    let loc = localize(&images, &query_poses, &reference, &library_poses, embedder)?;
    Ok(MetricsReport {
        dataset_hash: dataset.hash.clone(),
        embedder: embedder.spec().clone(),
        frames: preds.len(),
        fid,
        masked_psnr_db: psnr / preds.len() as f64,
        loc_err_mean: loc.mean,
        loc_err_median: loc.median,
    })
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let echo = |s: &mut String| {
            let _ = writeln!(s, "dataset_hash = {}", self.dataset_hash);
            let _ = writeln!(s, "embedder.seed = {}", self.embedder.seed);
            let _ = writeln!(s, "embedder.dim = {}", self.embedder.dim);
            let _ = writeln!(s, "frames = {}", self.frames);
        };
        s.push_str("[fid]\n");
        echo(&mut s);
        let _ = writeln!(s, "value = {}", self.fid);
        s.push_str("\n[masked_psnr]\n");
        echo(&mut s);
        let _ = writeln!(s, "mean_db = {}", self.masked_psnr_db);
        s.push_str("\n[loc_err]\n");
        echo(&mut s);
        let _ = writeln!(s, "mean_m = {}", self.loc_err_mean);
        let _ = writeln!(s, "median_m = {}", self.loc_err_median);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn stats_1d(values: &[f64]) -> FeatureStats {
        FeatureStats::from_features(&values.iter().map(|v| vec![*v]).collect::<Vec<_>>()).unwrap()
    }

    fn gaussian(mean: Vec<f64>, covariance: Vec<f64>) -> FeatureStats {
        FeatureStats {
            mean,
            covariance,
            count: 10,
        }
    }

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(3, 16, 16, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn unbiased_moments() {
        let s = stats_1d(&[0.0, 2.0]);
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.covariance, vec![2.0]);
        assert!(FeatureStats::from_features(&[vec![1.0]]).is_err());
    }

    #[test]
    fn identical_images_have_zero_covariance_and_order_does_not_matter() {
        let e = Embedder::new(&EmbedderSpec::default()).unwrap();
        let img = random_image(1);
        let s = feature_stats(&[img.clone(), img.clone(), img.clone()], &e).unwrap();
        assert!(s.covariance.iter().all(|v| v.abs() < 1e-20));
        let set: Vec<Image> = (0..5).map(random_image).collect();
        let mut rev = set.clone();
        rev.reverse();
        let a = feature_stats(&set, &e).unwrap();
        let b = feature_stats(&rev, &e).unwrap();
        for (x, y) in a
            .mean
            .iter()
            .zip(&b.mean)
            .chain(a.covariance.iter().zip(&b.covariance))
        {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(feature_stats(&set[..1], &e).is_err());
        assert_eq!(e.embed(&set).unwrap()[0].len(), 64);
    }

    #[test]
    fn frechet_analytic_cases() {
        let a = gaussian(vec![0.5, -1.0], vec![2.0, 0.3, 0.3, 1.0]);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        let i = vec![1.0, 0.0, 0.0, 1.0];
        let d = frechet_distance(
            &gaussian(vec![0.0, 0.0], i.clone()),
            &gaussian(vec![3.0, -4.0], i),
        )
        .unwrap();
        assert!((d - 25.0).abs() < 1e-8);
        let d = frechet_distance(
            &gaussian(vec![0.0], vec![4.0]),
            &gaussian(vec![0.0], vec![1.0]),
        )
        .unwrap();
        assert!((d - 1.0).abs() < 1e-8);
        assert!(frechet_distance(&a, &gaussian(vec![0.0], vec![1.0])).is_err());
    }

    #[test]
    fn frechet_is_symmetric() {
        let a = gaussian(vec![0.1, 0.2], vec![1.0, 0.4, 0.4, 0.5]);
        let b = gaussian(vec![-0.3, 0.0], vec![0.3, -0.1, -0.1, 2.0]);
        let ab = frechet_distance(&a, &b).unwrap();
        assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-10);
        assert!(ab > 0.0);
    }

    #[test]
    fn psnr_examples_and_mask_invariance() {
        let clean = Image::filled(3, 4, 4, 0.0);
        let mask = BinaryMask::from_fn(4, 4, |i, _| i < 2);
        assert_eq!(masked_psnr(&clean, &clean, &mask).unwrap(), PSNR_CAP_DB);
        let pred = Image::filled(3, 4, 4, 0.2);
        assert!((masked_psnr(&pred, &clean, &mask).unwrap() - 20.0).abs() < 1e-9);
        let mut fg = pred.clone();
        fg.set(1, 3, 3, -0.9);
        assert_eq!(
            masked_psnr(&fg, &clean, &mask).unwrap(),
            masked_psnr(&pred, &clean, &mask).unwrap()
        );
        assert!(matches!(
            masked_psnr(&pred, &clean, &BinaryMask::all_foreground(4, 4)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let clean = random_image(3);
        let noise = random_image(4);
        let mask = BinaryMask::from_fn(16, 16, |i, j| (i + j) % 3 != 0);
        let mut prev = f64::INFINITY;
        for k in 1..8 {
            let amp = 0.05 * k as f64;
            let pred = Image::from_fn(3, 16, 16, |c, i, j| {
                clean.get(c, i, j) + amp * noise.get(c, i, j)
            });
            let p = masked_psnr(&pred, &clean, &mask).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn localization_examples() {
        let e = Embedder::new(&EmbedderSpec::default()).unwrap();
        let lib: Vec<Image> = (0..4).map(random_image).collect();
        let poses = [[0.0, 0.0], [10.0, 0.0], [20.0, 0.0], [30.0, 0.0]];
        let loc = localize(&lib[2..3], &[[21.0, 0.0]], &lib, &poses, &e).unwrap();
        assert_eq!(loc.matches, vec![2]);
        assert!((loc.errors[0] - 1.0).abs() < 1e-12);

        let single = localize(&lib, &poses, &lib[..1], &poses[..1], &e).unwrap();
        assert_eq!(single.errors, vec![0.0, 10.0, 20.0, 30.0]);
        assert_eq!(single.mean, 15.0);
        assert_eq!(single.median, 15.0);

        let rev_lib: Vec<Image> = lib.iter().rev().cloned().collect();
        let rev_poses: Vec<[f64; 2]> = poses.iter().rev().cloned().collect();
        let queries: Vec<Image> = (10..16).map(random_image).collect();
        let qp = vec![[5.0, 1.0]; 6];
        let a = localize(&queries, &qp, &lib, &poses, &e).unwrap();
        let b = localize(&queries, &qp, &rev_lib, &rev_poses, &e).unwrap();
        assert_eq!(a.errors, b.errors);
        assert!(localize(&queries, &qp, &[], &[], &e).is_err());
    }

    #[test]
    fn report_names_every_block() {
        let r = MetricsReport {
            dataset_hash: "abc".into(),
            embedder: EmbedderSpec::default(),
            frames: 3,
            fid: 1.5,
            masked_psnr_db: 20.0,
            loc_err_mean: 2.0,
            loc_err_median: 1.0,
        };
        let t = r.to_text();
        for key in [
            "[fid]",
            "[masked_psnr]",
            "[loc_err]",
            "dataset_hash = abc",
            "median_m = 1",
        ] {
            assert!(t.contains(key), "{key}");
        }
    }
}
