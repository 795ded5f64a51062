//! Toy-scale translation models: an encoder–residual–decoder generator, a
//! multi-scale patch discriminator and the patch feature extractor that
//! reuses the generator's encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::nn::{Conv2d, Linear, ParamStore, Tape, Tensor, Var, INIT_STD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub image_channels: usize,
    pub base_channels: usize,
    pub downsample_stages: usize,
    pub residual_blocks: usize,
    /// Feed the input image to the output convolution alongside the decoder
    /// features.
    pub input_skip: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            image_channels: 3,
            base_channels: 32,
            downsample_stages: 2,
            residual_blocks: 4,
            input_skip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    pub image_channels: usize,
    pub scales: usize,
    pub base_channels: usize,
    pub conditioning_channels: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            image_channels: 3,
            scales: 2,
            base_channels: 32,
            conditioning_channels: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSpec {
    /// Encoder layer indices: 0 = stem, `1..=stages` = downsampling blocks,
    /// then one index per residual block.
    pub tap_layers: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec {
            tap_layers: vec![0, 1, 2],
            embed_dim: 64,
        }
    }
}

fn encoder_channels(spec: &GeneratorSpec, layer: usize) -> usize {
    spec.base_channels << layer.min(spec.downsample_stages)
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    stem: Conv2d,
    down: Vec<Conv2d>,
    res: Vec<ResBlock>,
    up: Vec<Conv2d>,
    out: Conv2d,
}

impl Generator {
    pub fn new(spec: &GeneratorSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.base_channels == 0 || spec.downsample_stages == 0 || spec.image_channels == 0 {
            return Err(Error::Config(
                "generator channels and stages must be positive".into(),
            ));
        }
        let c = spec.base_channels;
        let stem = Conv2d::new(
            store,
            "gen.stem",
            spec.image_channels,
            c,
            3,
            1,
            1,
            INIT_STD,
            rng,
        );
        let down = (1..=spec.downsample_stages)
            .map(|k| {
                let (ci, co) = (encoder_channels(spec, k - 1), encoder_channels(spec, k));
                Conv2d::new(
                    store,
                    &format!("gen.down{k}"),
                    ci,
                    co,
                    3,
                    2,
                    1,
                    INIT_STD,
                    rng,
                )
            })
            .collect();
        let deep = encoder_channels(spec, spec.downsample_stages);
        let res = (0..spec.residual_blocks)
            .map(|r| ResBlock {
                a: Conv2d::new(
                    store,
                    &format!("gen.res{r}.a"),
                    deep,
                    deep,
                    3,
                    1,
                    1,
                    INIT_STD,
                    rng,
                ),
                b: Conv2d::new(
                    store,
                    &format!("gen.res{r}.b"),
                    deep,
                    deep,
                    3,
                    1,
                    1,
                    INIT_STD,
                    rng,
                ),
            })
            .collect();
        let up = (1..=spec.downsample_stages)
            .rev()
            .map(|k| {
                let (ci, co) = (encoder_channels(spec, k), encoder_channels(spec, k - 1));
                Conv2d::new(store, &format!("gen.up{k}"), ci, co, 3, 1, 1, INIT_STD, rng)
            })
            .collect();
        let out_in = if spec.input_skip {
            c + spec.image_channels
        } else {
            c
        };
        let out = Conv2d::new(
            store,
            "gen.out",
            out_in,
            spec.image_channels,
            3,
            1,
            1,
            INIT_STD,
            rng,
        );
        Ok(Generator {
            spec: spec.clone(),
            stem,
            down,
            res,
            up,
            out,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// Number of addressable encoder layers (stem, downsamples, residual blocks).
    pub fn encoder_layers(&self) -> usize {
        1 + self.down.len() + self.res.len()
    }

    pub fn check_input(&self, (h, w): (usize, usize), channels: usize) -> Result<()> {
        let f = 1usize << self.spec.downsample_stages;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(invalid!("generator input {h}x{w} is not divisible by {f}"));
        }
        if channels != self.spec.image_channels {
            return Err(invalid!(
                "generator expects {} channels, got {channels}",
                self.spec.image_channels
            ));
        }
        Ok(())
    }

    /// Encoder activations for layers `0..=last`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var, last: usize) -> Vec<Var> {
        let mut outs = Vec::with_capacity(last + 1);
        let h = self.stem.forward(tape, store, x);
        let h = tape.instance_norm(h);
        let mut h = tape.relu(h);
        outs.push(h);
        for (k, conv) in self.down.iter().enumerate() {
            if k + 1 > last {
                return outs;
            }
            let y = conv.forward(tape, store, h);
            let y = tape.instance_norm(y);
            h = tape.relu(y);
            outs.push(h);
        }
        for (r, block) in self.res.iter().enumerate() {
            if 1 + self.down.len() + r > last {
                return outs;
            }
            h = self.res_block(block, tape, store, h);
            outs.push(h);
        }
        outs
    }

    fn res_block(&self, block: &ResBlock, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = block.a.forward(tape, store, x);
        let y = tape.instance_norm(y);
        let y = tape.relu(y);
        let y = block.b.forward(tape, store, y);
        let y = tape.instance_norm(y);
        tape.add(x, y)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let last = self.encoder_layers() - 1;
        let mut h = *self
            .encode(tape, store, x, last)
            .last()
            .expect("stem output");
        for conv in &self.up {
            let y = tape.upsample2x(h);
            let y = conv.forward(tape, store, y);
            let y = tape.instance_norm(y);
            h = tape.relu(y);
        }
        if self.spec.input_skip {
            h = tape.concat_channels(h, x);
        }
        let y = self.out.forward(tape, store, h);
        tape.tanh(y)
    }

    /// Translate a batch of images (no gradient).
    pub fn translate(&self, store: &ParamStore, images: &[Image]) -> Result<Vec<Image>> {
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        self.check_input((first.height(), first.width()), first.channels())?;
        let batch = images_to_tensor(images)?;
        let mut tape = Tape::new();
        let x = tape.input(batch);
        let y = self.forward(&mut tape, store, x);
        tensor_to_images(tape.value(y))
    }
}

#[derive(Clone, Debug)]
struct PatchDiscriminator {
    layers: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    nets: Vec<PatchDiscriminator>,
}

const LEAK: f64 = 0.2;

impl Discriminator {
    pub fn new(
        spec: &DiscriminatorSpec,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if spec.scales == 0 || spec.base_channels == 0 {
            return Err(Error::Config(
                "discriminator scales and channels must be positive".into(),
            ));
        }
        let c = spec.base_channels;
        let cin = spec.image_channels + spec.conditioning_channels;
        let nets = (0..spec.scales)
            .map(|s| {
                let n = |k: usize| format!("disc.s{s}.conv{k}");
                PatchDiscriminator {
                    layers: vec![
                        Conv2d::new(store, &n(0), cin, c, 3, 2, 1, INIT_STD, rng),
                        Conv2d::new(store, &n(1), c, 2 * c, 3, 2, 1, INIT_STD, rng),
                        Conv2d::new(store, &n(2), 2 * c, 4 * c, 3, 1, 1, INIT_STD, rng),
                        Conv2d::new(store, &n(3), 4 * c, 1, 3, 1, 1, INIT_STD, rng),
                    ],
                }
            })
            .collect();
        Ok(Discriminator {
            spec: spec.clone(),
            nets,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn input_channels(&self) -> usize {
        self.spec.image_channels + self.spec.conditioning_channels
    }

    /// One raw (pre-activation) prediction map per scale; scale `s` sees the
    /// input average-pooled `s` times.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = tape.value(x).dims4();
        if c != self.input_channels() {
            return Err(invalid!(
                "discriminator expects {} input channels, got {c}",
                self.input_channels()
            ));
        }
        let min_side = 4usize << (self.nets.len() - 1);
        if h < min_side || w < min_side {
            return Err(invalid!(
                "discriminator input {h}x{w} too small for {} scales",
                self.nets.len()
            ));
        }
        let mut maps = Vec::with_capacity(self.nets.len());
        let mut input = x;
        for (s, net) in self.nets.iter().enumerate() {
            if s > 0 {
                input = tape.avg_pool2x(input);
            }
            let last = net.layers.len() - 1;
            let mut h = input;
            for (k, conv) in net.layers.iter().enumerate() {
                h = conv.forward(tape, store, h);
                if k == last {
                    break;
                }
                if k > 0 {
                    h = tape.instance_norm(h);
                }
                h = tape.leaky_relu(h, LEAK);
            }
            maps.push(h);
        }
        Ok(maps)
    }
}

#[derive(Clone, Debug)]
struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

/// H: generator encoder taps followed by a two-layer MLP per tap.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    spec: ExtractorSpec,
    heads: Vec<ProjectionHead>,
}

impl FeatureExtractor {
    pub fn new(
        spec: &ExtractorSpec,
        generator: &Generator,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if spec.tap_layers.is_empty() || spec.embed_dim == 0 {
            return Err(Error::Config(
                "extractor needs at least one tap and a positive embed_dim".into(),
            ));
        }
        if let Some(&bad) = spec
            .tap_layers
            .iter()
            .find(|&&l| l >= generator.encoder_layers())
        {
            return Err(Error::Config(format!(
                "tap layer {bad} is not an encoder layer (encoder has {})",
                generator.encoder_layers()
            )));
        }
        let heads = spec
            .tap_layers
            .iter()
            .enumerate()
            .map(|(k, &l)| {
                let cin = encoder_channels(generator.spec(), l);
                ProjectionHead {
                    fc1: Linear::new(
                        store,
                        &format!("extractor.head{k}.fc1"),
                        cin,
                        spec.embed_dim,
                        INIT_STD,
                        rng,
                    ),
                    fc2: Linear::new(
                        store,
                        &format!("extractor.head{k}.fc2"),
                        spec.embed_dim,
                        spec.embed_dim,
                        INIT_STD,
                        rng,
                    ),
                }
            })
            .collect();
        Ok(FeatureExtractor {
            spec: spec.clone(),
            heads,
        })
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn layers(&self) -> usize {
        self.heads.len()
    }

    /// Encoder maps `[n, c_l, h_l, w_l]` at every tap.
    pub fn tap_maps(
        &self,
        generator: &Generator,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Vec<Var> {
        let last = *self.spec.tap_layers.iter().max().expect("non-empty taps");
        let all = generator.encode(tape, store, x, last);
        self.spec.tap_layers.iter().map(|&l| all[l]).collect()
    }

    /// Embed `positions` of sample `sample` from tap `layer`: `[S, embed_dim]`.
    #[allow(clippy::too_many_arguments)]
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        tap_map: Var,
        sample: usize,
        positions: &[usize],
        normalize: bool,
    ) -> Var {
        let head = &self.heads[layer];
        let rows = tape.gather(tap_map, sample, positions);
        let h = head.fc1.forward(tape, store, rows);
        let h = tape.relu(h);
        let h = head.fc2.forward(tape, store, h);
        if normalize {
            tape.l2_normalize_rows(h)
        } else {
            h
        }
    }

    /// Per-layer feature sets of sample `sample`; all locations when
    /// `locations` is `None`.
    #[allow(clippy::too_many_arguments)]
    pub fn extract(
        &self,
        generator: &Generator,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        sample: usize,
        locations: Option<&[Vec<usize>]>,
        normalize: bool,
    ) -> Result<Vec<Var>> {
        if let Some(locs) = locations {
            if locs.len() != self.layers() {
                return Err(invalid!(
                    "{} location sets for {} layers",
                    locs.len(),
                    self.layers()
                ));
            }
        }
        let maps = self.tap_maps(generator, tape, store, x);
        let mut out = Vec::with_capacity(maps.len());
        for (l, &m) in maps.iter().enumerate() {
            let (_, _, h, w) = tape.value(m).dims4();
            let all: Vec<usize>;
            let positions = match locations {
                Some(locs) => &locs[l][..],
                None => {
                    all = (0..h * w).collect();
                    &all[..]
                }
            };
            out.push(self.embed(tape, store, l, m, sample, positions, normalize));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub extractor: ExtractorSpec,
}

/// G and H share `gen_store`; D owns `disc_store`.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub spec: ModelSpec,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub extractor: FeatureExtractor,
    pub gen_store: ParamStore,
    pub disc_store: ParamStore,
}

impl ModelBundle {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut gen_store = ParamStore::new();
        let generator = Generator::new(&spec.generator, &mut gen_store, &mut rng)?;
        let extractor =
            FeatureExtractor::new(&spec.extractor, &generator, &mut gen_store, &mut rng)?;
        let mut drng = ChaCha8Rng::seed_from_u64(seed);
        drng.set_stream(2);
        let mut disc_store = ParamStore::new();
        let discriminator = Discriminator::new(&spec.discriminator, &mut disc_store, &mut drng)?;
        Ok(ModelBundle {
            spec: spec.clone(),
            generator,
            discriminator,
            extractor,
            gen_store,
            disc_store,
        })
    }

    pub fn parameter_counts(&self) -> (usize, usize) {
        (
            self.gen_store.scalar_count(),
            self.disc_store.scalar_count(),
        )
    }
}

/// Stack equally shaped images into `[n, c, h, w]`.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| invalid!("empty image batch"))?;
    let (h, w, c) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        first.ensure_same_shape(img, "batch")?;
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4();
    t.data()
        .chunks(c * h * w)
        .take(n)
        .map(|chunk| Image::from_vec(c, h, w, chunk.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Uniform};

    fn small_spec() -> ModelSpec {
        ModelSpec {
            generator: GeneratorSpec {
                base_channels: 4,
                residual_blocks: 1,
                ..Default::default()
            },
            discriminator: DiscriminatorSpec {
                base_channels: 4,
                ..Default::default()
            },
            extractor: ExtractorSpec {
                embed_dim: 32,
                ..Default::default()
            },
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        Image::from_fn(3, h, w, |_, _, _| u.sample(&mut rng))
    }

    #[test]
    fn generator_shape_range_and_determinism() {
        let spec = ModelSpec::default();
        let m = ModelBundle::new(&spec, 3).unwrap();
        let img = random_image(48, 48, 1);
        let a = m
            .generator
            .translate(&m.gen_store, std::slice::from_ref(&img))
            .unwrap();
        let b = m.generator.translate(&m.gen_store, &[img]).unwrap();
        assert_eq!(a[0].shape(), (48, 48, 3));
        assert!(a[0].data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a, b);
        let again = ModelBundle::new(&spec, 3).unwrap();
        assert_eq!(again.gen_store, m.gen_store);
    }

    #[test]
    fn generator_rejects_indivisible_input() {
        let m = ModelBundle::new(&small_spec(), 0).unwrap();
        assert!(m
            .generator
            .translate(&m.gen_store, &[random_image(10, 12, 0)])
            .is_err());
    }

    #[test]
    fn discriminator_arity_and_channels() {
        let mut spec = small_spec();
        let m = ModelBundle::new(&spec, 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 3, 16, 16]));
        let maps = m
            .discriminator
            .forward(&mut tape, &m.disc_store, x)
            .unwrap();
        assert_eq!(maps.len(), 2);
        for &map in &maps {
            let (n, c, h, w) = tape.value(map).dims4();
            assert_eq!((n, c), (2, 1));
            assert!(h < 16 && w < 16);
            assert!(tape.value(map).all_finite());
        }
        let six = tape.input(Tensor::zeros(&[1, 6, 16, 16]));
        assert!(m
            .discriminator
            .forward(&mut tape, &m.disc_store, six)
            .is_err());

        spec.discriminator.conditioning_channels = 3;
        let cond = ModelBundle::new(&spec, 0).unwrap();
        assert_eq!(cond.discriminator.input_channels(), 6);
        assert!(cond
            .discriminator
            .forward(&mut tape, &cond.disc_store, six)
            .is_ok());
    }

    #[test]
    fn extractor_arity_normalization_and_determinism() {
        let m = ModelBundle::new(&small_spec(), 5).unwrap();
        let img = images_to_tensor(&[random_image(16, 16, 2)]).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(img.clone());
            let feats = m
                .extractor
                .extract(&m.generator, &mut tape, &m.gen_store, x, 0, None, true)
                .unwrap();
            feats
                .iter()
                .map(|&f| tape.value(f).clone())
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].dims2(), (256, 32));
        assert_eq!(a[1].dims2(), (64, 32));
        assert_eq!(a[2].dims2(), (16, 32));
        for t in &a {
            let mut unit = 0;
            for row in t.data().chunks(32) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                // a location whose tapped activations are all zero stays zero
                assert!((n - 1.0).abs() < 1e-6 || n == 0.0, "{n}");
                unit += usize::from(n > 0.5);
            }
            assert!(unit * 2 > t.dims2().0);
        }
        assert_eq!(a, run());
    }

    #[test]
    fn invalid_tap_layer_is_a_config_error() {
        let mut spec = small_spec();
        spec.extractor.tap_layers = vec![0, 9];
        assert!(matches!(ModelBundle::new(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_counts_are_pure_functions_of_spec() {
        let a = ModelBundle::new(&small_spec(), 1).unwrap();
        let b = ModelBundle::new(&small_spec(), 2).unwrap();
        assert_eq!(a.parameter_counts(), b.parameter_counts());
        assert!(a.parameter_counts().0 > 0);
    }
}
