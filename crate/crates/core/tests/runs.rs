use std::path::Path;

use asrl::config::RunConfig;
use asrl::datapipe::ImageDataset;
use asrl::evalkit::evaluate;
use asrl::trainer::{records_to_csv, Checkpoint, Trainer};

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn reduced(name: &str, iters: u64) -> RunConfig {
    RunConfig::load(&configs_dir().join(name)).unwrap().reduced(iters)
}

fn dataset(cfg: &RunConfig) -> ImageDataset {
    ImageDataset::load(&cfg.data.source, &cfg.load_options()).unwrap()
}

#[test]
fn every_preset_round_trips_through_its_resolved_form() {
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::load(&path).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg, "{}", path.display());
    }
}

#[test]
fn checkpoint_file_resumes_exactly() {
    let cfg = reduced("wgan_gp_resnet.json", 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");

    let mut full = Trainer::new(cfg.train_config(), dataset(&cfg)).unwrap();
    let mut expected = Vec::new();
    full.run(|r| {
        let _: () = expected.push(r.clone());
        Ok(())
    }, |_| Ok(())).unwrap();

    let mut first = Trainer::new(cfg.train_config(), dataset(&cfg)).unwrap();
    let mut got = Vec::new();
    for _ in 0..3 {
        got.push(first.g_iteration().unwrap());
    }
    first.save_checkpoint(&path).unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::load(&path).unwrap(), dataset(&cfg)).unwrap();
    resumed.run(|r| {
        let _: () = got.push(r.clone());
        Ok(())
    }, |_| Ok(())).unwrap();

    assert_eq!(records_to_csv(&got), records_to_csv(&expected));
    assert_eq!(resumed.generator(), full.generator());
    assert_eq!(resumed.discriminator(), full.discriminator());
}

#[test]
fn resume_rejects_a_different_dataset() {
    let cfg = reduced("gan_dcgan.json", 2);
    let mut t = Trainer::new(cfg.train_config(), dataset(&cfg)).unwrap();
    t.g_iteration().unwrap();
    let ckpt = t.checkpoint().unwrap();
    let other = ImageDataset::load("synth:ramp:16", &cfg.load_options()).unwrap();
    assert!(Trainer::resume(&ckpt, other).is_err());
}

#[test]
fn checkpoint_generator_matches_trainer() {
    let cfg = reduced("noise128_dcgan_wgan_gp.json", 2);
    let mut t = Trainer::new(cfg.train_config(), dataset(&cfg)).unwrap();
    t.run(|_| Ok(()), |_| Ok(())).unwrap();
    let batch = t.dataset().head(4).unwrap();
    let from_ckpt = t.checkpoint().unwrap().generator().unwrap();
    assert_eq!(&from_ckpt, t.generator());
    let a = t.generate(&batch).unwrap();
    let b = asrl::trainer::generate(&from_ckpt, &batch, cfg.train.seed).unwrap();
    assert_eq!(a, b);
    let report = evaluate(&batch, &a, 0.02).unwrap();
    assert!(report.l1.is_finite() && report.bicubic_l1.is_finite());
}
