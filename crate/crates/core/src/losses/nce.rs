//! Patch contrastive loss between generated and coarsely aligned target
//! features, restricted to the joint background.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::masking::{downsample_mask, BinaryMask};
use crate::models::{images_to_tensor, FeatureExtractor, Generator};
use crate::nn::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NceConfig {
    pub temperature: f64,
    pub layers: usize,
    pub patches_per_layer: usize,
    pub normalize_features: bool,
    /// Fraction of a feature cell's pixel block that must be background for
    /// the cell to be used.
    pub mask_keep_fraction: f64,
}

impl Default for NceConfig {
    fn default() -> Self {
        NceConfig {
            temperature: 0.07,
            layers: 3,
            patches_per_layer: 64,
            normalize_features: true,
            mask_keep_fraction: 1.0,
        }
    }
}

impl NceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "nce temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.layers == 0 || self.patches_per_layer == 0 {
            return Err(Error::Config(
                "nce layers and patches_per_layer must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_keep_fraction) {
            return Err(Error::Config(
                "nce mask_keep_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NceTerm {
    pub value: f64,
    pub grad_query: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `−log softmax` of the positive logit `q·v⁺/τ` against `{q·v⁻/τ}`.
pub fn nce_cross_entropy(
    query: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<NceTerm> {
    if negatives.is_empty() {
        return Err(invalid!("nce needs at least one negative"));
    }
    if !(tau > 0.0) {
        return Err(invalid!("temperature must be positive, got {tau}"));
    }
    let d = query.len();
    if positive.len() != d || negatives.iter().any(|v| v.len() != d) {
        return Err(invalid!("nce vectors differ in dimension"));
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(dot(query, positive) / tau);
    logits.extend(negatives.iter().map(|v| dot(query, v) / tau));
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    let value = log_z - logits[0];
    let probs: Vec<f64> = logits.iter().map(|z| (z - log_z).exp()).collect();

    // dℓ/dz_j = p_j − [j = +]
    let coef: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(j, p)| (p - if j == 0 { 1.0 } else { 0.0 }) / tau)
        .collect();
    let mut grad_query: Vec<f64> = positive.iter().map(|v| coef[0] * v).collect();
    for (neg, c) in negatives.iter().zip(&coef[1..]) {
        for (g, v) in grad_query.iter_mut().zip(neg.iter()) {
            *g += c * v;
        }
    }
    Ok(NceTerm {
        value,
        grad_query,
        grad_positive: query.iter().map(|q| coef[0] * q).collect(),
        grad_negatives: coef[1..]
            .iter()
            .map(|c| query.iter().map(|q| c * q).collect())
            .collect(),
    })
}

/// Generator encoder plus projection heads; everything needed to embed patches.
#[derive(Clone, Copy)]
pub struct PatchEmbedder<'a> {
    pub generator: &'a Generator,
    pub extractor: &'a FeatureExtractor,
    pub store: &'a ParamStore,
}

/// Loss value plus the seeds that carry its gradient back through the tape.
pub struct NceOnTape {
    pub value: f64,
    pub seeds: Vec<(Var, Tensor)>,
}

/// Background feature locations per layer, sampled without replacement.
pub fn sample_locations(
    feature_masks: &[BinaryMask],
    patches_per_layer: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    feature_masks
        .iter()
        .enumerate()
        .map(|(l, m)| {
            let usable = m.background_positions();
            if usable.len() < 2 {
                return Err(Error::Degenerate(format!(
                    "layer {l}: {} usable feature locations, need at least 2",
                    usable.len()
                )));
            }
            let k = patches_per_layer.min(usable.len());
            Ok(sample(rng, usable.len(), k)
                .into_iter()
                .map(|i| usable[i])
                .collect())
        })
        .collect()
}

/// Evaluate the masked patch contrastive loss for a batch on `tape`.
///
/// `gen` carries gradient; the target branch is treated as a constant. The
/// result is the batch mean of per-image sums over layers of the mean term
/// over sampled locations.
#[allow(clippy::too_many_arguments)]
pub fn patchnce_star_on_tape(
    net: PatchEmbedder<'_>,
    tape: &mut Tape,
    gen: Var,
    target: Var,
    masks: &[BinaryMask],
    cfg: &NceConfig,
    rng: &mut impl Rng,
) -> Result<NceOnTape> {
    cfg.validate()?;
    if cfg.layers != net.extractor.layers() {
        return Err(Error::Config(format!(
            "nce uses {} layers but the extractor has {} taps",
            cfg.layers,
            net.extractor.layers()
        )));
    }
    let (n, _, h, w) = tape.value(gen).dims4();
    if tape.value(target).shape() != tape.value(gen).shape() {
        return Err(invalid!(
            "patchnce: generated and target batches differ in shape"
        ));
    }
    if masks.len() != n || masks.iter().any(|m| m.shape() != (h, w)) {
        return Err(invalid!(
            "patchnce: need one {h}x{w} mask per batch element"
        ));
    }
    let q_maps = net.extractor.tap_maps(net.generator, tape, net.store, gen);
    let k_maps = net
        .extractor
        .tap_maps(net.generator, tape, net.store, target);
    patchnce_star_on_taps(net, tape, &q_maps, &k_maps, (h, w), masks, cfg, rng)
}

/// The contrastive term from already extracted tap maps (`[N, C, h_l, w_l]`
/// per layer) of the generated and target batches; `masks` are at image
/// resolution `(h, w)`.
#[allow(clippy::too_many_arguments)]
pub fn patchnce_star_on_taps(
    net: PatchEmbedder<'_>,
    tape: &mut Tape,
    q_maps: &[Var],
    k_maps: &[Var],
    (h, w): (usize, usize),
    masks: &[BinaryMask],
    cfg: &NceConfig,
    rng: &mut impl Rng,
) -> Result<NceOnTape> {
    if q_maps.len() != net.extractor.layers() || k_maps.len() != q_maps.len() {
        return Err(Error::Config(format!(
            "nce got {} query and {} target tap maps for {} heads",
            q_maps.len(),
            k_maps.len(),
            net.extractor.layers()
        )));
    }
    let n = masks.len();
    for (&q, &k) in q_maps.iter().zip(k_maps) {
        if tape.value(q).shape() != tape.value(k).shape() || tape.value(q).dims4().0 != n {
            return Err(invalid!(
                "patchnce: tap maps disagree with each other or with the {n} masks"
            ));
        }
    }
    if masks.iter().any(|m| m.shape() != (h, w)) {
        return Err(invalid!(
            "patchnce: need one {h}x{w} mask per batch element"
        ));
    }
    let mut value = 0.0;
    let mut seeds = Vec::new();
    for (b, mask) in masks.iter().enumerate() {
        let mut feature_masks = Vec::with_capacity(q_maps.len());
        for &m in q_maps {
            let (_, _, fh, fw) = tape.value(m).dims4();
            if h % fh != 0 || w % fw != 0 || h / fh != w / fw {
                return Err(invalid!(
                    "feature map {fh}x{fw} is not an integer downsampling of {h}x{w}"
                ));
            }
            feature_masks.push(downsample_mask(mask, h / fh, cfg.mask_keep_fraction)?);
        }
        let locations = sample_locations(&feature_masks, cfg.patches_per_layer, rng)?;
        for (l, positions) in locations.iter().enumerate() {
            let q = net.extractor.embed(
                tape,
                net.store,
                l,
                q_maps[l],
                b,
                positions,
                cfg.normalize_features,
            );
            let k = net.extractor.embed(
                tape,
                net.store,
                l,
                k_maps[l],
                b,
                positions,
                cfg.normalize_features,
            );
            let (s, e) = tape.value(q).dims2();
            let qv = tape.value(q).data();
            let kv = tape.value(k).data();
            let rows: Vec<&[f64]> = kv.chunks(e).collect();
            let scale = 1.0 / (s as f64 * n as f64);
            let mut grad = vec![0.0; s * e];
            let mut negatives: Vec<&[f64]> = Vec::with_capacity(s - 1);
            for i in 0..s {
                negatives.clear();
                negatives.extend(
                    rows.iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, r)| *r),
                );
                let term = nce_cross_entropy(
                    &qv[i * e..(i + 1) * e],
                    rows[i],
                    &negatives,
                    cfg.temperature,
                )?;
                value += term.value * scale;
                for (g, t) in grad[i * e..(i + 1) * e].iter_mut().zip(&term.grad_query) {
                    *g = t * scale;
                }
            }
            seeds.push((q, Tensor::from_vec(&[s, e], grad)?));
        }
    }
    Ok(NceOnTape { value, seeds })
}

/// Masked patch contrastive loss of one image pair; `seed` fixes the
/// sampled locations.
pub fn patchnce_star(
    net: PatchEmbedder<'_>,
    gen: &Image,
    target: &Image,
    mask: &BinaryMask,
    cfg: &NceConfig,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let g = tape.input(images_to_tensor(std::slice::from_ref(gen))?);
    let t = tape.input(images_to_tensor(std::slice::from_ref(target))?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(patchnce_star_on_tape(
        net,
        &mut tape,
        g,
        t,
        std::slice::from_ref(mask),
        cfg,
        &mut rng,
    )?
    .value)
}

/// [`patchnce_star`] evaluated on given tap maps (`[1, C, h_l, w_l]` each)
/// instead of running the encoder.
#[allow(clippy::too_many_arguments)]
pub fn patchnce_star_from_taps(
    net: PatchEmbedder<'_>,
    q_taps: &[Tensor],
    k_taps: &[Tensor],
    image_size: (usize, usize),
    mask: &BinaryMask,
    cfg: &NceConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let q: Vec<Var> = q_taps.iter().map(|t| tape.input(t.clone())).collect();
    let k: Vec<Var> = k_taps.iter().map(|t| tape.input(t.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = patchnce_star_on_taps(
        net,
        &mut tape,
        &q,
        &k,
        image_size,
        std::slice::from_ref(mask),
        cfg,
        &mut rng,
    )?;
    Ok(out.value)
}

/// Tap maps of one image, as fed to [`patchnce_star_from_taps`].
pub fn tap_tensors(net: PatchEmbedder<'_>, image: &Image) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let x = tape.input(images_to_tensor(std::slice::from_ref(image))?);
    let maps = net
        .extractor
        .tap_maps(net.generator, &mut tape, net.store, x);
    Ok(maps.iter().map(|&m| tape.value(m).clone()).collect())
}

/// As [`patchnce_star`], plus the gradient w.r.t. the generated image. The
/// returned tape margin is the smallest |pre-activation| of any ReLU on the
/// path, for callers that need kink-free finite differences.
pub fn patchnce_star_with_grad(
    net: PatchEmbedder<'_>,
    gen: &Image,
    target: &Image,
    mask: &BinaryMask,
    cfg: &NceConfig,
    seed: u64,
) -> Result<(f64, Image, f64)> {
    let mut tape = Tape::new();
    let g = tape.input(images_to_tensor(std::slice::from_ref(gen))?);
    let t = tape.input(images_to_tensor(std::slice::from_ref(target))?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = patchnce_star_on_tape(
        net,
        &mut tape,
        g,
        t,
        std::slice::from_ref(mask),
        cfg,
        &mut rng,
    )?;
    let grads = tape.backward(&out.seeds);
    let grad = match grads.wrt(g) {
        Some(t) => Image::from_vec(gen.channels(), gen.height(), gen.width(), t.data().to_vec())?,
        None => Image::zeros(gen.channels(), gen.height(), gen.width()),
    };
    Ok((out.value, grad, tape.min_kink_margin()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ExtractorSpec, GeneratorSpec, ModelBundle, ModelSpec};
    use rand_distr::{Distribution, Uniform};

    #[test]
    fn uniform_similarities_give_log_of_class_count() {
        let q = [1.0, 0.0];
        let v = [0.5, 0.5];
        let t = nce_cross_entropy(&q, &v, &[&v], 1.0).unwrap();
        assert!((t.value - 2f64.ln()).abs() < 1e-12);
        for s in [4usize, 16] {
            let negs: Vec<&[f64]> = (0..s - 1).map(|_| &v[..]).collect();
            let t = nce_cross_entropy(&q, &v, &negs, 0.07).unwrap();
            assert!((t.value - (s as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_softmax() {
        let q = [1.0];
        let t = nce_cross_entropy(&q, &[2.0], &[&[1.0], &[0.0]], 1.0).unwrap();
        let e = std::f64::consts::E;
        let expect = -(e * e / (e * e + e + 1.0)).ln();
        assert!((t.value - expect).abs() < 1e-12);
        assert!((t.value - 0.40761).abs() < 1e-5);
    }

    #[test]
    fn rejects_empty_negatives_and_bad_dims() {
        assert!(nce_cross_entropy(&[1.0], &[1.0], &[], 1.0).is_err());
        assert!(nce_cross_entropy(&[1.0], &[1.0, 2.0], &[&[1.0]], 1.0).is_err());
    }

    #[test]
    fn shift_invariant_and_decreasing_in_positive_similarity() {
        // constant logit offset: scale all dot products through a shared extra dimension
        let base =
            nce_cross_entropy(&[1.0, 0.0], &[0.3, 0.0], &[&[0.1, 0.0], &[-0.2, 0.0]], 0.5).unwrap();
        let shifted =
            nce_cross_entropy(&[1.0, 1.0], &[0.3, 0.7], &[&[0.1, 0.7], &[-0.2, 0.7]], 0.5).unwrap();
        assert!((base.value - shifted.value).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let p = [k as f64 * 0.2, 0.0];
            let t = nce_cross_entropy(&[1.0, 0.0], &p, &[&[0.1, 0.0], &[-0.2, 0.0]], 0.5).unwrap();
            assert!(t.value < prev);
            prev = t.value;
        }
    }

    fn tiny_bundle(layers: usize) -> ModelBundle {
        let spec = ModelSpec {
            generator: GeneratorSpec {
                base_channels: 4,
                downsample_stages: 2,
                residual_blocks: 1,
                ..Default::default()
            },
            extractor: ExtractorSpec {
                tap_layers: (0..layers).collect(),
                embed_dim: 16,
            },
            ..Default::default()
        };
        ModelBundle::new(&spec, 11).unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        Image::from_fn(3, h, w, |_, _, _| u.sample(&mut rng))
    }

    fn view(m: &ModelBundle) -> PatchEmbedder<'_> {
        PatchEmbedder {
            generator: &m.generator,
            extractor: &m.extractor,
            store: &m.gen_store,
        }
    }

    #[test]
    fn two_locations_reduce_to_two_way_terms() {
        let m = tiny_bundle(1);
        let cfg = NceConfig {
            layers: 1,
            ..Default::default()
        };
        let mask = BinaryMask::from_fn(4, 4, |i, j| (i, j) == (0, 0) || (i, j) == (3, 2));
        let gen = random_image(4, 4, 1);
        let target = random_image(4, 4, 2);
        let v = patchnce_star(view(&m), &gen, &target, &mask, &cfg, 0).unwrap();

        let mut tape = Tape::new();
        let g = tape.input(images_to_tensor(&[gen]).unwrap());
        let t = tape.input(images_to_tensor(&[target]).unwrap());
        let pos = [vec![0usize, 14]];
        let q = m
            .extractor
            .extract(
                &m.generator,
                &mut tape,
                &m.gen_store,
                g,
                0,
                Some(&pos),
                true,
            )
            .unwrap();
        let k = m
            .extractor
            .extract(
                &m.generator,
                &mut tape,
                &m.gen_store,
                t,
                0,
                Some(&pos),
                true,
            )
            .unwrap();
        let (qv, kv) = (tape.value(q[0]).data(), tape.value(k[0]).data());
        let e = 16;
        let a = nce_cross_entropy(&qv[..e], &kv[..e], &[&kv[e..]], cfg.temperature).unwrap();
        let b = nce_cross_entropy(&qv[e..], &kv[e..], &[&kv[..e]], cfg.temperature).unwrap();
        assert!((v - 0.5 * (a.value + b.value)).abs() < 1e-12);
    }

    #[test]
    fn identical_images_beat_uniform_baseline() {
        let m = tiny_bundle(3);
        let cfg = NceConfig {
            patches_per_layer: 8,
            ..Default::default()
        };
        let img = random_image(16, 16, 3);
        let mask = BinaryMask::all_background(16, 16);
        let v = patchnce_star(view(&m), &img, &img, &mask, &cfg, 4).unwrap();
        assert!(v < 3.0 * 8f64.ln(), "{v}");
    }

    #[test]
    fn degenerate_masks_are_rejected() {
        let m = tiny_bundle(3);
        let cfg = NceConfig::default();
        let img = random_image(16, 16, 3);
        // only one fully background 4x4 block survives at the deepest tap
        let mask = BinaryMask::from_fn(16, 16, |i, j| i < 4 && j < 4);
        let err = patchnce_star(view(&m), &img, &img, &mask, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn layer_count_must_match_extractor() {
        let m = tiny_bundle(2);
        let img = random_image(8, 8, 3);
        let mask = BinaryMask::all_background(8, 8);
        let err = patchnce_star(view(&m), &img, &img, &mask, &NceConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
