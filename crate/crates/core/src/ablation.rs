//! Preset sweeps over loss toggles, GAN feeding mode, window size, and mask
//! threshold, each trained and evaluated on the same data.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{evaluate, Embedder, MetricsReport};
use crate::image::Image;
use crate::losses::{GanMode, WindowSpec};
use crate::synthdata::{frame_id, SynthDataset};
use crate::training::{run_training, LossToggles, PreparedData, RunConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// One row (1 to 5) of the loss-term ablation.
    Row(u8),
    /// All five rows.
    Rows,
    Window,
    MaskThreshold,
    GanMode,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rows" => Preset::Rows,
            "window" => Preset::Window,
            "mask-threshold" => Preset::MaskThreshold,
            "gan-mode" => Preset::GanMode,
            _ => match s.strip_prefix("row").and_then(|r| r.parse::<u8>().ok()) {
                Some(k @ 1..=5) => Preset::Row(k),
                _ => {
                    return Err(Error::Config(format!(
                        "unknown preset {s:?}; expected row1..row5, rows, window, mask-threshold, gan-mode"
                    )))
                }
            },
        })
    }
}

pub const ROW_LABELS: [&str; 5] = [
    "cGAN + L1",
    "cGAN + L1 (+mask)",
    "uGAN + L1 (+mask)",
    "uGAN + L1 (+mask) + NCE (+mask)",
    "uGAN + L1 (+mask + misalignment) + NCE (+mask)",
];

/// Configuration of loss-ablation row `k`: only the GAN mode and the loss
/// toggles change.
pub fn row_config(k: u8, base: &RunConfig) -> Result<RunConfig> {
    let (mode, use_mask, use_nce, use_misalign) = match k {
        1 => (GanMode::Conditional, false, false, false),
        2 => (GanMode::Conditional, true, false, false),
        3 => (GanMode::Unpaired, true, false, false),
        4 => (GanMode::Unpaired, true, true, false),
        5 => (GanMode::Unpaired, true, true, true),
        _ => return Err(Error::Config(format!("ablation rows are 1..=5, got {k}"))),
    };
    let mut c = base.clone();
    c.set_gan_mode(mode);
    c.toggles = LossToggles {
        use_mask,
        use_misalign,
        use_nce,
    };
    Ok(c)
}

/// `(column id, column label, config)` for every run of a preset.
pub fn preset_runs(preset: Preset, base: &RunConfig) -> Result<Vec<(String, String, RunConfig)>> {
    let full = row_config(5, base)?;
    Ok(match preset {
        Preset::Row(k) => vec![(
            format!("row{k}"),
            ROW_LABELS[k as usize - 1].to_string(),
            row_config(k, base)?,
        )],
        Preset::Rows => (1..=5)
            .map(|k| {
                Ok((
                    format!("row{k}"),
                    ROW_LABELS[k as usize - 1].to_string(),
                    row_config(k, base)?,
                ))
            })
            .collect::<Result<_>>()?,
        Preset::Window => [1, 3, 5]
            .into_iter()
            .map(|k| {
                let mut c = full.clone();
                c.window = WindowSpec::square(k);
                (format!("k{k}"), format!("k = {k}"), c)
            })
            .collect(),
        Preset::MaskThreshold => [0.9, 0.7, 0.5, 0.3, 0.1]
            .into_iter()
            .map(|t| {
                let mut c = full.clone();
                c.data.mask_threshold = t;
                (format!("t{t}"), format!("threshold {t}"), c)
            })
            .collect(),
        Preset::GanMode => [
            (GanMode::Conditional, "conditional-GAN + L1"),
            (GanMode::Paired, "paired-GAN + L1"),
            (GanMode::Unpaired, "unpaired-GAN + L1"),
        ]
        .into_iter()
        .map(|(mode, label)| {
            let mut c = base.clone();
            c.set_gan_mode(mode);
            c.toggles = LossToggles {
                use_mask: false,
                use_misalign: false,
                use_nce: false,
            };
            (mode.to_string(), label.to_string(), c)
        })
        .collect(),
    })
}

/// Distinct source frames of the test split, in frame order.
pub fn test_frames(data: &PreparedData) -> Vec<usize> {
    let mut ids: Vec<usize> = data.test.iter().map(|p| p.source_index).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Metrics of `trainer`'s translations of the test-split source frames.
pub fn evaluate_test_split(
    trainer: &Trainer,
    data: &PreparedData,
    ds: &SynthDataset,
    embedder: &Embedder,
) -> Result<MetricsReport> {
    let frames = test_frames(data);
    let inputs: Vec<Image> = frames
        .iter()
        .map(|&k| ds.source.images[k].clone())
        .collect();
    let preds = trainer.translate(&inputs)?;
    evaluate(&label(&frames, preds), ds, embedder)
}

/// Metrics of the raw adverse test frames (no adaptation).
pub fn evaluate_untranslated(
    data: &PreparedData,
    ds: &SynthDataset,
    embedder: &Embedder,
) -> Result<MetricsReport> {
    let frames = test_frames(data);
    let raw = frames
        .iter()
        .map(|&k| ds.source.images[k].clone())
        .collect();
    evaluate(&label(&frames, raw), ds, embedder)
}

fn label(frames: &[usize], images: Vec<Image>) -> Vec<(String, Image)> {
    frames.iter().map(|&k| frame_id(k)).zip(images).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationColumn {
    pub id: String,
    pub label: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub preset: String,
    pub untranslated: MetricsReport,
    pub columns: Vec<AblationColumn>,
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset);
        let _ = writeln!(s, "dataset_hash = {}", self.untranslated.dataset_hash);
        let _ = writeln!(s, "embedder.seed = {}", self.untranslated.embedder.seed);
        let _ = writeln!(s, "embedder.dim = {}", self.untranslated.embedder.dim);
        let _ = writeln!(s, "test_frames = {}", self.untranslated.frames);
        s.push_str("\ncolumn,label,fid,masked_psnr_db,loc_err_mean_m,loc_err_median_m\n");
        let mut row = |id: &str, label: &str, m: &MetricsReport| {
            let _ = writeln!(
                s,
                "{id},\"{label}\",{},{},{},{}",
                m.fid, m.masked_psnr_db, m.loc_err_mean, m.loc_err_median
            );
        };
        row("none", "no adaptation", &self.untranslated);
        for c in &self.columns {
            row(&c.id, &c.label, &c.metrics);
        }
        s
    }
}

/// Train and evaluate every run of `preset`; run directories go under `out`.
pub fn run_ablation(
    ds: &SynthDataset,
    preset: Preset,
    preset_name: &str,
    base: &RunConfig,
    out: &Path,
) -> Result<AblationReport> {
    let runs = preset_runs(preset, base)?;
    let embedder = Embedder::new(&base.eval)?;
    let mut columns = Vec::with_capacity(runs.len());
    let mut untranslated = None;
    for (id, label, cfg) in runs {
        log::info!("ablation {preset_name}: training {id} ({label})");
        let outcome = run_training(ds, &cfg, &out.join(&id), None)?;
        if untranslated.is_none() {
            untranslated = Some(evaluate_untranslated(&outcome.data, ds, &embedder)?);
        }
        let metrics = evaluate_test_split(&outcome.trainer, &outcome.data, ds, &embedder)?;
        columns.push(AblationColumn { id, label, metrics });
    }
    Ok(AblationReport {
        preset: preset_name.to_string(),
        untranslated: untranslated.expect("every preset has at least one run"),
        columns,
    })
}
