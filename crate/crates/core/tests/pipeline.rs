use std::path::{Path, PathBuf};

use capit_core::ablation::{run_ablation, Preset};
use capit_core::checkpoint::Checkpoint;
use capit_core::eval::{evaluate, Embedder};
use capit_core::synthdata::{frame_id, generate_dataset, invert_adverse, SynthDataset};
use capit_core::training::{checkpoint_name, latest_checkpoint, run_training, RunConfig};
use capit_core::Error;

fn tiny() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
    RunConfig::read(&path).unwrap()
}

fn dataset(cfg: &RunConfig, dir: &Path) -> SynthDataset {
    generate_dataset(&cfg.synth, &dir.join("data")).unwrap()
}

fn four_epochs() -> RunConfig {
    let mut cfg = tiny();
    cfg.train.epochs_constant = 2;
    cfg.train.epochs_decay = 2;
    cfg.train.checkpoint_every = 1;
    cfg
}

#[test]
fn resuming_reproduces_the_uninterrupted_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = four_epochs();
    let ds = dataset(&cfg, dir.path());
    let full = run_training(&ds, &cfg, &dir.path().join("full"), None).unwrap();
    assert_eq!(full.manifest.rows.len(), 4);

    let ck: PathBuf = dir.path().join("full").join(checkpoint_name(2));
    let resumed = run_training(&ds, &cfg, &dir.path().join("resumed"), Some(&ck)).unwrap();
    assert_eq!(resumed.manifest.rows, full.manifest.rows);
    let probe = vec![ds.source.images[0].clone()];
    assert_eq!(
        resumed.trainer.translate(&probe).unwrap(),
        full.trainer.translate(&probe).unwrap()
    );
}

#[test]
fn resume_refuses_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = four_epochs();
    let ds = dataset(&cfg, dir.path());
    run_training(&ds, &cfg, &dir.path().join("a"), None).unwrap();
    let mut other = cfg.clone();
    other.loss.lambda_l1 = 3.0;
    let ck = dir.path().join("a").join(checkpoint_name(1));
    let err = run_training(&ds, &other, &dir.path().join("b"), Some(&ck))
        .err()
        .expect("resume must fail");
    assert!(matches!(err, Error::Integrity(_)), "{err}");
}

#[test]
fn corrupted_checkpoints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let ds = dataset(&cfg, dir.path());
    let run = dir.path().join("run");
    run_training(&ds, &cfg, &run, None).unwrap();
    let ck = latest_checkpoint(&run).unwrap();
    assert!(Checkpoint::read(&ck).is_ok());

    let mut bytes = std::fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&ck, &bytes).unwrap();
    assert!(matches!(Checkpoint::read(&ck), Err(Error::Integrity(_))));
    let err = run_training(&ds, &cfg, &dir.path().join("again"), Some(&ck))
        .err()
        .expect("resume must fail");
    assert!(matches!(err, Error::Integrity(_)), "{err}");
}

#[test]
fn manifest_records_every_epoch_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = four_epochs();
    let ds = dataset(&cfg, dir.path());
    let run = dir.path().join("run");
    let out = run_training(&ds, &cfg, &run, None).unwrap();
    let text = std::fs::read_to_string(run.join("manifest")).unwrap();
    assert_eq!(text, out.manifest.to_text());
    assert!(text.contains(&ds.hash));
    assert!(text.contains("epoch,lr,uGAN_d,uGAN_g,l1_star,nce,total"));
    for e in 1..=4 {
        assert!(run.join(checkpoint_name(e)).is_file());
    }
    assert_eq!(
        latest_checkpoint(&run).unwrap(),
        run.join(checkpoint_name(4))
    );
    let timing = std::fs::read_to_string(run.join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 5);
    assert!(!text.contains("seconds"));
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let ds = dataset(&cfg, dir.path());
    let back = SynthDataset::load(&dir.path().join("data")).unwrap();
    assert_eq!(back.hash, ds.hash);
    assert_eq!(back.len(), cfg.synth.n_scenes);
    assert_eq!(back.source.poses, ds.source.poses);
    assert_eq!(back.clean, ds.clean);

    std::fs::remove_file(
        dir.path()
            .join("data/images/adverse")
            .join(format!("{}.png", frame_id(0))),
    )
    .unwrap();
    assert!(SynthDataset::load(&dir.path().join("data")).is_err());
}

#[test]
fn oracle_translation_beats_raw_frames() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.synth.n_scenes = 20;
    let ds = dataset(&cfg, dir.path());
    let emb = Embedder::new(&cfg.eval).unwrap();
    let raw: Vec<_> = (0..ds.len())
        .map(|k| (frame_id(k), ds.source.images[k].clone()))
        .collect();
    let oracle: Vec<_> = raw
        .iter()
        .map(|(id, img)| (id.clone(), invert_adverse(img, &cfg.synth.adverse).unwrap()))
        .collect();
    let r = evaluate(&raw, &ds, &emb).unwrap();
    let o = evaluate(&oracle, &ds, &emb).unwrap();
    assert!(
        o.masked_psnr_db > r.masked_psnr_db + 3.0,
        "{} vs {}",
        o.masked_psnr_db,
        r.masked_psnr_db
    );
    assert!(o.fid < r.fid);
    assert_eq!(o.frames, ds.len());
}

#[test]
fn single_row_ablation_reports_baseline_and_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let ds = dataset(&cfg, dir.path());
    let report = run_ablation(
        &ds,
        Preset::Row(1),
        "row1",
        &cfg,
        &dir.path().join("ablate"),
    )
    .unwrap();
    assert_eq!(report.columns.len(), 1);
    let text = report.to_text();
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("none,") || l.starts_with("row1,"))
        .collect();
    assert_eq!(rows.len(), 2, "{text}");
    assert!(dir.path().join("ablate/row1/manifest").is_file());
}
