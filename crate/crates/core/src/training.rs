//! Alternating discriminator / generator optimization of the combined
//! objective, with a step-decay learning-rate schedule, checkpoints, and a
//! per-epoch run manifest.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config;
use crate::error::{invalid, Error, Result};
use crate::eval::EmbedderSpec;
use crate::image::Image;
use crate::io;
use crate::losses::{
    capit_objective, discriminator_batch, gan_loss_d, gan_loss_g, l1_star_with_grad,
    patchnce_star_on_tape, GanForm, GanMode, GeneratorTerms, NceConfig, ObjectiveWeights,
    PatchEmbedder, WindowSpec,
};
use crate::masking::{
    build_foreground_mask, default_fg_classes, joint_background, BinaryMask, DEFAULT_THRESHOLD,
};
use crate::models::{images_to_tensor, ModelBundle, ModelSpec};
use crate::nn::{Adam, AdamConfig, ParamGrads, ParamStore, Tape, Tensor, Var};
use crate::pairing::{
    pair_traversals, split_by_location, CoarsePairManifest, DEFAULT_MAX_DISTANCE,
};
use crate::synthdata::{SynthConfig, SynthDataset};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    /// Threshold the simulated instance proposals.
    #[default]
    Proposals,
    /// Use the exact sprite masks.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub max_distance: f64,
    /// Fraction of source route length assigned to training.
    pub split_boundary: f64,
    pub mask_threshold: f64,
    pub fg_classes: Vec<String>,
    pub mask_source: MaskSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            max_distance: DEFAULT_MAX_DISTANCE,
            split_boundary: 0.8,
            mask_threshold: DEFAULT_THRESHOLD,
            fg_classes: default_fg_classes().into_iter().collect(),
            mask_source: MaskSource::Proposals,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub use_mask: bool,
    pub use_misalign: bool,
    pub use_nce: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            use_mask: true,
            use_misalign: true,
            use_nce: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_constant: usize,
    pub epochs_decay: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_constant: 50,
            epochs_decay: 50,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 4,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.epochs_constant + self.epochs_decay
    }
}

/// Everything a command may read from a configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub loss: ObjectiveWeights,
    pub window: WindowSpec,
    pub toggles: LossToggles,
    pub nce: NceConfig,
    pub train: TrainConfig,
    pub eval: EmbedderSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            model: ModelSpec::default(),
            loss: ObjectiveWeights::default(),
            window: WindowSpec::square(3),
            toggles: LossToggles::default(),
            nce: NceConfig::default(),
            train: TrainConfig::default(),
            eval: EmbedderSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let cfg: RunConfig = config::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn echo(&self) -> Result<String> {
        config::echo(self)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |m: String| Err(Error::Config(m));
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        if t.epochs() == 0 {
            return bad("train needs at least one epoch".into());
        }
        if t.batch_size == 0 || t.checkpoint_every == 0 {
            return bad("train.batch_size and train.checkpoint_every must be positive".into());
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.data.split_boundary > 0.0 && self.data.split_boundary < 1.0) {
            return bad("data.split_boundary must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.data.mask_threshold) {
            return bad("data.mask_threshold must lie in [0, 1]".into());
        }
        if !(self.data.max_distance > 0.0) {
            return bad("data.max_distance must be positive".into());
        }
        if !(self.loss.lambda_l1 >= 0.0 && self.loss.lambda_nce >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        let want_cond = if self.loss.gan_mode == GanMode::Conditional {
            self.model.generator.image_channels
        } else {
            0
        };
        if self.model.discriminator.conditioning_channels != want_cond {
            return bad(format!(
                "model.discriminator.conditioning_channels is {} but gan_mode {} needs {want_cond}",
                self.model.discriminator.conditioning_channels, self.loss.gan_mode
            ));
        }
        self.nce.validate()?;
        if self.nce.layers != self.model.extractor.tap_layers.len() {
            return bad(format!(
                "nce.layers = {} but model.extractor.tap_layers has {} entries",
                self.nce.layers,
                self.model.extractor.tap_layers.len()
            ));
        }
        Ok(())
    }

    /// Switch GAN feeding mode, keeping D's input width consistent.
    pub fn set_gan_mode(&mut self, mode: GanMode) {
        self.loss.gan_mode = mode;
        self.model.discriminator.conditioning_channels = match mode {
            GanMode::Conditional => self.model.generator.image_channels,
            _ => 0,
        };
    }

    /// Window actually used: a single pixel when misalignment search is off.
    pub fn effective_window(&self) -> WindowSpec {
        if self.toggles.use_misalign {
            self.window
        } else {
            WindowSpec::square(0)
        }
    }

    pub fn effective_weights(&self) -> ObjectiveWeights {
        let mut w = self.loss.clone();
        if !self.toggles.use_nce {
            w.lambda_nce = 0.0;
        }
        w
    }
}

/// `lr` on the constant segment, then linear decay reaching 0 one epoch
/// after the last.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs() {
        return Err(invalid!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.epochs()
        ));
    }
    if epoch < cfg.epochs_constant {
        return Ok(cfg.lr);
    }
    let into = (epoch - cfg.epochs_constant) as f64;
    Ok(cfg.lr * (1.0 - into / cfg.epochs_decay as f64))
}

/// One coarse pair ready for training: images plus the joint background mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub source_index: usize,
    pub target_index: usize,
    pub source: Image,
    pub target: Image,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub pairs: CoarsePairManifest,
    pub train: Vec<TrainPair>,
    pub test: Vec<TrainPair>,
    /// Target-domain images of the training region, the pool unpaired real
    /// batches are drawn from.
    pub target_pool: Vec<Image>,
}

fn frame_mask(
    ds: &SynthDataset,
    source_side: bool,
    k: usize,
    cfg: &RunConfig,
) -> Result<BinaryMask> {
    let t = if source_side { &ds.source } else { &ds.target };
    match cfg.data.mask_source {
        MaskSource::Exact => Ok(t.masks[k].clone()),
        MaskSource::Proposals => {
            let classes: BTreeSet<String> = cfg.data.fg_classes.iter().cloned().collect();
            build_foreground_mask(&t.proposals[k], cfg.data.mask_threshold, &classes)
        }
    }
}

/// Pair the traversals by GPS, split by route position, and build masks.
pub fn prepare_data(ds: &SynthDataset, cfg: &RunConfig) -> Result<PreparedData> {
    let pairs = pair_traversals(&ds.source.poses, &ds.target.poses, cfg.data.max_distance)?;
    let (train_m, test_m) = split_by_location(&pairs, &ds.source.poses, cfg.data.split_boundary)?;
    let build = |m: &CoarsePairManifest| -> Result<Vec<TrainPair>> {
        m.pairs
            .iter()
            .map(|p| {
                let s = ds
                    .source
                    .index_of(&p.source_frame)
                    .ok_or_else(|| invalid!("unknown frame {}", p.source_frame))?;
                let t = ds
                    .target
                    .index_of(&p.target_frame)
                    .ok_or_else(|| invalid!("unknown frame {}", p.target_frame))?;
                let (h, w, _) = ds.source.images[s].shape();
                let mask = if cfg.toggles.use_mask {
                    joint_background(
                        &frame_mask(ds, true, s, cfg)?,
                        &frame_mask(ds, false, t, cfg)?,
                    )?
                } else {
                    BinaryMask::all_background(h, w)
                };
                Ok(TrainPair {
                    source_index: s,
                    target_index: t,
                    source: ds.source.images[s].clone(),
                    target: ds.target.images[t].clone(),
                    mask,
                })
            })
            .collect()
    };
    let train = build(&train_m)?;
    let test = build(&test_m)?;
    if train.is_empty() {
        return Err(invalid!("no coarse pairs fall in the training split"));
    }
    let mut pool_ids: Vec<usize> = train.iter().map(|p| p.target_index).collect();
    pool_ids.sort_unstable();
    pool_ids.dedup();
    Ok(PreparedData {
        pairs,
        train,
        test,
        target_pool: pool_ids
            .into_iter()
            .map(|k| ds.target.images[k].clone())
            .collect(),
    })
}

/// Scalar terms of one step (or their epoch means).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub gan_d: f64,
    pub gan_g: f64,
    pub l1_star: f64,
    pub nce: f64,
    pub total: f64,
}

impl LossTerms {
    fn all_finite(&self) -> bool {
        [self.gan_d, self.gan_g, self.l1_star, self.nce, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source: Vec<Image>,
    pub target: Vec<Image>,
    /// Independent target-domain batch for unpaired feeding.
    pub target_prime: Vec<Image>,
    pub masks: Vec<BinaryMask>,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub terms: LossTerms,
    pub grad_norm_g: f64,
    pub grad_norm_encoder_from_nce: f64,
}

/// Models plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub models: ModelBundle,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Epochs completed so far.
    pub epoch: usize,
    pub rows: Vec<EpochRow>,
}

fn abort(epoch: usize, batch: usize, detail: impl Into<String>) -> Error {
    Error::NumericAbort {
        epoch,
        batch,
        detail: detail.into(),
    }
}

fn seed_from(values: &[f64], scale: f64, like: &Tensor) -> Result<Tensor> {
    Tensor::from_vec(like.shape(), values.iter().map(|v| v * scale).collect())
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let models = ModelBundle::new(&cfg.model, cfg.seed)?;
        let adam = AdamConfig {
            beta1: cfg.train.adam_beta1,
            beta2: cfg.train.adam_beta2,
            ..AdamConfig::default()
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            opt_g: Adam::new(&models.gen_store, adam),
            opt_d: Adam::new(&models.disc_store, adam),
            models,
            epoch: 0,
            rows: Vec::new(),
        })
    }

    fn discriminate(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let maps = self
            .models
            .discriminator
            .forward(tape, &self.models.disc_store, x)?;
        Ok(match self.cfg.loss.gan_form {
            GanForm::CrossEntropy => maps.into_iter().map(|m| tape.sigmoid(m)).collect(),
            GanForm::LeastSquares => maps,
        })
    }

    fn d_input(tape: &mut Tape, image: &Tensor, cond: Option<&Tensor>) -> Var {
        let x = tape.input(image.clone());
        match cond {
            Some(c) => {
                let c = tape.input(c.clone());
                tape.concat_channels(c, x)
            }
            None => x,
        }
    }

    /// One D update on the mode's real/fake feed, then one G+H update on
    /// the combined objective.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        lr: f64,
        batch_id: usize,
        rng: &mut impl Rng,
    ) -> Result<StepReport> {
        let epoch = self.epoch;
        let n = batch.source.len();
        if n == 0 || batch.target.len() != n || batch.masks.len() != n {
            return Err(invalid!("malformed batch"));
        }
        if let Some(b) = batch.masks.iter().position(|m| m.background_count() == 0) {
            return Err(Error::Degenerate(format!(
                "batch element {b} has no joint background pixels"
            )));
        }
        let weights = self.cfg.effective_weights();
        let window = self.cfg.effective_window();
        let form = self.cfg.loss.gan_form;
        let real_a = images_to_tensor(&batch.source)?;
        let real_b = images_to_tensor(&batch.target)?;
        let real_b_prime = images_to_tensor(&batch.target_prime)?;
        let (_, _, h, w) = real_a.dims4();
        self.models
            .generator
            .check_input((h, w), real_a.shape()[1])?;

        // generator forward
        let mut tape_g = Tape::new();
        let xa = tape_g.input(real_a.clone());
        let fake_var = self
            .models
            .generator
            .forward(&mut tape_g, &self.models.gen_store, xa);
        let fake = tape_g.value(fake_var).clone();
        if !fake.all_finite() {
            return Err(abort(
                epoch,
                batch_id,
                "generator produced non-finite pixels",
            ));
        }

        // discriminator update
        let feed = discriminator_batch(
            self.cfg.loss.gan_mode,
            &real_a,
            &real_b,
            Some(&real_b_prime),
            &fake,
        )?;
        let mut tape_d = Tape::new();
        let xr = Self::d_input(&mut tape_d, feed.real, feed.conditioning);
        let xf = Self::d_input(&mut tape_d, feed.fake, feed.conditioning);
        let pr = self.discriminate(&mut tape_d, xr)?;
        let pf = self.discriminate(&mut tape_d, xf)?;
        let scales = pr.len() as f64;
        let mut gan_d = 0.0;
        let mut seeds = Vec::new();
        for (&r, &f) in pr.iter().zip(&pf) {
            let (tr, tf) = (tape_d.value(r), tape_d.value(f));
            let l = gan_loss_d(tr.data(), tf.data(), form)
                .map_err(|e| abort(epoch, batch_id, e.to_string()))?;
            gan_d += l.value / scales;
            seeds.push((r, seed_from(&l.grad_real, 1.0 / scales, tr)?));
            seeds.push((f, seed_from(&l.grad_fake, 1.0 / scales, tf)?));
        }
        let d_grads = tape_d.backward(&seeds).into_params();
        if !gan_d.is_finite() || !d_grads.all_finite() {
            return Err(abort(
                epoch,
                batch_id,
                format!("discriminator loss {gan_d}"),
            ));
        }
        self.opt_d.step(&mut self.models.disc_store, &d_grads, lr);

        // adversarial gradient on the generated batch, through the updated D
        let mut tape_a = Tape::new();
        let fake_leaf = tape_a.input(fake.clone());
        let xf = match feed.conditioning {
            Some(c) => {
                let c = tape_a.input(c.clone());
                tape_a.concat_channels(c, fake_leaf)
            }
            None => fake_leaf,
        };
        let pf = self.discriminate(&mut tape_a, xf)?;
        let mut gan_g = 0.0;
        let mut seeds = Vec::new();
        for &f in &pf {
            let tf = tape_a.value(f);
            let l =
                gan_loss_g(tf.data(), form).map_err(|e| abort(epoch, batch_id, e.to_string()))?;
            gan_g += l.value / scales;
            seeds.push((f, seed_from(&l.grad_fake, 1.0 / scales, tf)?));
        }
        let mut fake_grad = tape_a
            .backward(&seeds)
            .wrt(fake_leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(fake.shape()));

        // masked window L1, batch mean
        let fakes = crate::models::tensor_to_images(&fake)?;
        let per = fake.len() / n;
        let mut l1 = 0.0;
        for (b, ((g, t), m)) in fakes
            .iter()
            .zip(&batch.target)
            .zip(&batch.masks)
            .enumerate()
        {
            let (v, grad) = l1_star_with_grad(g, t, m, window)?;
            l1 += v / n as f64;
            let scale = weights.lambda_l1 / n as f64;
            for (acc, d) in fake_grad.data_mut()[b * per..(b + 1) * per]
                .iter_mut()
                .zip(grad.data())
            {
                *acc += scale * d;
            }
        }

        // masked patch contrastive term through the shared encoder
        let mut nce = 0.0;
        let mut nce_param_grads = ParamGrads::new();
        if weights.lambda_nce > 0.0 {
            let mut tape_h = Tape::new();
            let g = tape_h.input(fake.clone());
            let t = tape_h.input(real_b.clone());
            let net = PatchEmbedder {
                generator: &self.models.generator,
                extractor: &self.models.extractor,
                store: &self.models.gen_store,
            };
            let out =
                patchnce_star_on_tape(net, &mut tape_h, g, t, &batch.masks, &self.cfg.nce, rng)?;
            nce = out.value;
            let seeds: Vec<(Var, Tensor)> = out
                .seeds
                .into_iter()
                .map(|(v, mut s)| {
                    s.scale(weights.lambda_nce);
                    (v, s)
                })
                .collect();
            let grads = tape_h.backward(&seeds);
            if let Some(dg) = grads.wrt(g) {
                fake_grad.add_assign(dg);
            }
            nce_param_grads = grads.into_params();
        }
        let encoder_norm = nce_param_grads.norm();

        let terms_g = GeneratorTerms {
            gan_g,
            l1_star: l1,
            patchnce_star: nce,
        };
        let terms = LossTerms {
            gan_d,
            gan_g,
            l1_star: l1,
            nce,
            total: capit_objective(terms_g, &weights),
        };
        if !terms.all_finite() || !fake_grad.all_finite() {
            return Err(abort(
                epoch,
                batch_id,
                format!("non-finite loss terms {terms:?}"),
            ));
        }

        let mut g_grads = tape_g.backward(&[(fake_var, fake_grad)]).into_params();
        g_grads.merge(nce_param_grads);
        if !g_grads.all_finite() {
            return Err(abort(epoch, batch_id, "non-finite generator gradients"));
        }
        let grad_norm_g = g_grads.norm();
        self.opt_g.step(&mut self.models.gen_store, &g_grads, lr);
        Ok(StepReport {
            terms,
            grad_norm_g,
            grad_norm_encoder_from_nce: encoder_norm,
        })
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(16 + epoch as u64);
        rng
    }

    /// Run the next epoch over `data.train` in a seed-determined order.
    pub fn run_epoch(&mut self, data: &PreparedData) -> Result<EpochRow> {
        let epoch = self.epoch;
        let lr = lr_at(epoch, &self.cfg.train)?;
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        let mut batches = 0;
        for (batch_id, chunk) in order.chunks(self.cfg.train.batch_size).enumerate() {
            let batch = Batch {
                source: chunk
                    .iter()
                    .map(|&k| data.train[k].source.clone())
                    .collect(),
                target: chunk
                    .iter()
                    .map(|&k| data.train[k].target.clone())
                    .collect(),
                target_prime: chunk
                    .iter()
                    .map(|_| data.target_pool[rng.random_range(0..data.target_pool.len())].clone())
                    .collect(),
                masks: chunk.iter().map(|&k| data.train[k].mask.clone()).collect(),
            };
            let t = self.train_step(&batch, lr, batch_id, &mut rng)?.terms;
            sum.gan_d += t.gan_d;
            sum.gan_g += t.gan_g;
            sum.l1_star += t.l1_star;
            sum.nce += t.nce;
            sum.total += t.total;
            batches += 1;
        }
        let k = batches as f64;
        let row = EpochRow {
            epoch,
            lr,
            gan_d: sum.gan_d / k,
            gan_g: sum.gan_g / k,
            l1_star: sum.l1_star / k,
            nce: sum.nce / k,
            total: sum.total / k,
        };
        self.rows.push(row);
        self.epoch += 1;
        Ok(row)
    }

    pub fn translate(&self, images: &[Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            out.extend(
                self.models
                    .generator
                    .translate(&self.models.gen_store, chunk)?,
            );
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut header = String::new();
        let _ = writeln!(header, "epoch = {}", self.epoch);
        let _ = writeln!(header, "seed = {}", self.cfg.seed);
        header.push_str("\n[config]\n");
        header.push_str(&self.cfg.echo()?);
        header.push_str("\n[curve]\n");
        header.push_str(&curve_text(&self.rows));
        let mut blobs = Vec::new();
        let mut push_store = |prefix: &str, store: &ParamStore, opt: &Adam| -> Result<()> {
            for (name, t) in store.iter() {
                blobs.push((format!("{prefix}.param.{name}"), t.clone()));
            }
            let (steps, m, v) = opt.state();
            let steps: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
            blobs.push((
                format!("{prefix}.adam.steps"),
                Tensor::from_vec(&[steps.len()], steps)?,
            ));
            for (k, (m, v)) in m.iter().zip(v).enumerate() {
                blobs.push((format!("{prefix}.adam.m.{k}"), m.clone()));
                blobs.push((format!("{prefix}.adam.v.{k}"), v.clone()));
            }
            Ok(())
        };
        push_store("gen", &self.models.gen_store, &self.opt_g)?;
        push_store("disc", &self.models.disc_store, &self.opt_d)?;
        Ok(Checkpoint { header, blobs })
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        let integrity = |m: String| Error::Integrity(m);
        let (head, rest) = ck
            .header
            .split_once("\n[config]\n")
            .ok_or_else(|| integrity("checkpoint header lacks a config block".into()))?;
        let (cfg_text, curve) = rest
            .split_once("\n[curve]\n")
            .ok_or_else(|| integrity("checkpoint header lacks a curve block".into()))?;
        let epoch = head
            .lines()
            .find_map(|l| l.strip_prefix("epoch = "))
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| integrity("checkpoint header lacks an epoch".into()))?;
        let cfg: RunConfig = config::parse_str(cfg_text).map_err(|e| integrity(e.to_string()))?;
        let mut trainer = Trainer::new(&cfg)?;
        trainer.epoch = epoch;
        trainer.rows = parse_curve(curve).map_err(|e| integrity(e.to_string()))?;
        if trainer.rows.len() != epoch {
            return Err(integrity(format!(
                "checkpoint curve has {} rows for epoch {epoch}",
                trainer.rows.len()
            )));
        }
        let mut restore = |prefix: &str, store: &mut ParamStore, opt: &mut Adam| -> Result<()> {
            let params = ck
                .take_prefixed(&format!("{prefix}.param."))
                .into_iter()
                .map(|(n, t)| (n[prefix.len() + 7..].to_string(), t))
                .collect();
            store.load(params)?;
            let mut steps = ck.take_prefixed(&format!("{prefix}.adam.steps"));
            let steps = steps
                .pop()
                .ok_or_else(|| integrity(format!("missing {prefix} optimizer steps")))?
                .1;
            let mut moments = ck.take_prefixed(&format!("{prefix}.adam."));
            let v: Vec<Tensor> = moments
                .iter()
                .filter(|(n, _)| n.starts_with(&format!("{prefix}.adam.v.")))
                .map(|(_, t)| t.clone())
                .collect();
            moments.retain(|(n, _)| n.starts_with(&format!("{prefix}.adam.m.")));
            let m = moments.into_iter().map(|(_, t)| t).collect();
            opt.restore(steps.data().iter().map(|&s| s as u64).collect(), m, v)
        };
        restore("gen", &mut trainer.models.gen_store, &mut trainer.opt_g)?;
        restore("disc", &mut trainer.models.disc_store, &mut trainer.opt_d)?;
        if !ck.blobs.is_empty() {
            return Err(integrity(format!(
                "unexpected checkpoint blob {}",
                ck.blobs[0].0
            )));
        }
        Ok(trainer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub gan_d: f64,
    pub gan_g: f64,
    pub l1_star: f64,
    pub nce: f64,
    pub total: f64,
}

const CURVE_HEADER: &str = "epoch,lr,uGAN_d,uGAN_g,l1_star,nce,total";

fn curve_text(rows: &[EpochRow]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.gan_d, r.gan_g, r.l1_star, r.nce, r.total
        );
    }
    s
}

fn parse_curve(text: &str) -> Result<Vec<EpochRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(CURVE_HEADER) {
        return Err(invalid!("missing curve header"));
    }
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 7 {
                return Err(invalid!("curve row {line:?} needs 7 fields"));
            }
            let f = |k: usize| {
                cols[k]
                    .parse::<f64>()
                    .map_err(|e| invalid!("curve field {:?}: {e}", cols[k]))
            };
            Ok(EpochRow {
                epoch: cols[0]
                    .parse()
                    .map_err(|e| invalid!("curve epoch {:?}: {e}", cols[0]))?,
                lr: f(1)?,
                gan_d: f(2)?,
                gan_g: f(3)?,
                l1_star: f(4)?,
                nce: f(5)?,
                total: f(6)?,
            })
        })
        .collect()
}

/// Resolved config, dataset hash, per-epoch loss rows, and checkpoint paths
/// (relative to the run directory). Wall-clock times go to a separate
/// `timing.csv` so that the manifest itself is reproducible.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config_echo: String,
    pub dataset_hash: String,
    pub parameter_counts: (usize, usize),
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub rows: Vec<EpochRow>,
    pub checkpoints: Vec<String>,
    pub abort: Option<String>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("format = capit-run/1\n");
        let _ = writeln!(s, "dataset_hash = {}", self.dataset_hash);
        let _ = writeln!(
            s,
            "parameters.generator_and_heads = {}",
            self.parameter_counts.0
        );
        let _ = writeln!(s, "parameters.discriminator = {}", self.parameter_counts.1);
        let _ = writeln!(s, "pairs.train = {}", self.train_pairs);
        let _ = writeln!(s, "pairs.test = {}", self.test_pairs);
        if let Some(a) = &self.abort {
            let _ = writeln!(s, "abort = {a}");
        }
        s.push_str("\n[config]\n");
        s.push_str(&self.config_echo);
        s.push_str("\n[epochs]\n");
        s.push_str(&curve_text(&self.rows));
        s.push_str("\n[checkpoints]\n");
        for c in &self.checkpoints {
            s.push_str(c);
            s.push('\n');
        }
        s
    }
}

pub struct TrainingOutcome {
    pub manifest: RunManifest,
    pub trainer: Trainer,
    pub data: PreparedData,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch_{epoch:04}.ckpt")
}

/// Train for the configured schedule, writing `manifest`, `timing.csv`, and
/// checkpoints under `out`. With `resume`, continue from that checkpoint; its
/// embedded configuration must equal `cfg`.
pub fn run_training(
    ds: &SynthDataset,
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let data = prepare_data(ds, cfg)?;
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::from_checkpoint(Checkpoint::read(path)?)?;
            if t.cfg != *cfg {
                return Err(Error::Integrity(format!(
                    "{}: checkpoint was written under a different configuration",
                    path.display()
                )));
            }
            t
        }
        None => Trainer::new(cfg)?,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest {
        config_echo: cfg.echo()?,
        dataset_hash: ds.hash.clone(),
        parameter_counts: trainer.models.parameter_counts(),
        train_pairs: data.train.len(),
        test_pairs: data.test.len(),
        rows: trainer.rows.clone(),
        checkpoints: (1..=trainer.epoch)
            .filter(|e| e % cfg.train.checkpoint_every == 0)
            .map(checkpoint_name)
            .collect(),
        abort: None,
    };
    let manifest_path = out.join("manifest");
    let timing_path = out.join("timing.csv");
    let mut timing = if resume.is_some() && timing_path.exists() {
        io::read_text(&timing_path)?
    } else {
        "epoch,seconds\n".to_string()
    };
    io::write_text(&manifest_path, &manifest.to_text())?;
    let total = cfg.train.epochs();
    while trainer.epoch < total {
        let started = Instant::now();
        match trainer.run_epoch(&data) {
            Ok(row) => {
                manifest.rows.push(row);
                let _ = writeln!(
                    timing,
                    "{},{:.3}",
                    row.epoch,
                    started.elapsed().as_secs_f64()
                );
                log::info!(
                    "epoch {} lr {:.2e} d {:.4} g {:.4} l1 {:.4} nce {:.4} total {:.4}",
                    row.epoch,
                    row.lr,
                    row.gan_d,
                    row.gan_g,
                    row.l1_star,
                    row.nce,
                    row.total
                );
            }
            Err(e @ Error::NumericAbort { .. }) => {
                manifest.abort = Some(e.to_string());
                io::write_text(&manifest_path, &manifest.to_text())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        let done = trainer.epoch;
        if done % cfg.train.checkpoint_every == 0 || done == total {
            let name = checkpoint_name(done);
            trainer.to_checkpoint()?.write(&out.join(&name))?;
            if !manifest.checkpoints.contains(&name) {
                manifest.checkpoints.push(name);
            }
        }
        io::write_text(&manifest_path, &manifest.to_text())?;
        io::write_text(&timing_path, &timing)?;
    }
    Ok(TrainingOutcome {
        manifest,
        trainer,
        data,
    })
}

/// Final checkpoint named in a run directory's manifest.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let text = io::read_text(&run_dir.join("manifest"))?;
    let (_, list) = text.split_once("\n[checkpoints]\n").ok_or_else(|| {
        Error::Integrity(format!("{}: manifest lacks checkpoints", run_dir.display()))
    })?;
    let last = list
        .lines()
        .rfind(|l| !l.trim().is_empty())
        .ok_or_else(|| {
            Error::Integrity(format!("{}: no checkpoints recorded", run_dir.display()))
        })?;
    Ok(run_dir.join(last.trim()))
}
