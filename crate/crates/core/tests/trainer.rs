use std::fs;
use std::path::Path;

use facecomp_core::checkpoint::{self, load_checkpoint, read_manifest, CheckpointError, SaveOptions};
use facecomp_core::geometry::Rect;
use facecomp_core::imaging::Image;
use facecomp_core::networks::{DecoderMode, ModelConfig};
use facecomp_core::sprites::generate_sprites;
use facecomp_core::trainer::{batch_indices, DatasetSpec, TrainConfig, TrainError, Trainer};

fn config(steps: u64) -> TrainConfig {
    let mut c = TrainConfig::new(
        ModelConfig::toy(DecoderMode::Cam),
        DatasetSpec::Sprites {
            count: 8,
            seed: 3,
            bias: None,
        },
        steps,
    );
    c.batch_size = 4;
    c.losses.r1_interval = 4;
    c
}

fn images() -> Vec<Image> {
    generate_sprites(8, 32, 3, None).unwrap().into_iter().map(|l| l.pixels).collect()
}

fn params_equal(a: &Trainer, b: &Trainer) -> bool {
    let pa = a.model().named_parameters();
    let pb = b.model().named_parameters();
    pa.len() == pb.len() && pa.iter().zip(&pb).all(|((na, ta), (nb, tb))| na == nb && ta.equal(tb))
}

#[test]
fn smoke_run_writes_one_checkpoint_and_ten_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(config(10), dir.path()).unwrap();
    let mut seen = 0;
    let last = t.run(|_, r| {
        assert!(r.is_finite());
        seen += 1;
    });
    assert_eq!(seen, 10);
    assert_eq!(last.unwrap().unwrap(), dir.path().join("ckpt-00000010"));
    let ckpts: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("ckpt-"))
        .collect();
    assert_eq!(ckpts.len(), 1);
    let csv = fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,l1,perceptual,g_adv,d_adv,r1");
    assert_eq!(lines.len(), 11);
    for (i, l) in lines[1..].iter().enumerate() {
        let f: Vec<f64> = l.split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(f[0] as usize, i + 1);
        assert!(f.iter().all(|v| v.is_finite()));
        // the penalty is only evaluated on lazy steps
        assert_eq!(f[5] != 0.0, (i + 1) % 4 == 0, "row {l}");
    }
}

#[test]
fn identical_seeds_give_identical_loss_logs() {
    let run = |dir: &Path| {
        let mut t = Trainer::with_images(config(4), &images(), dir).unwrap();
        t.run(|_, _| {}).unwrap();
        fs::read_to_string(dir.join("losses.csv")).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let imgs = images();
    let straight_dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::with_images(config(6), &imgs, straight_dir.path()).unwrap();
    straight.run(|_, _| {}).unwrap();

    let split_dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::with_images(config(3), &imgs, split_dir.path()).unwrap();
    let ckpt = first.run(|_, _| {}).unwrap().unwrap();
    // a stray row past the checkpoint must be discarded on resume
    let mut log = fs::read_to_string(first.loss_path()).unwrap();
    log.push_str("4,9,9,9,9,9\n");
    fs::write(first.loss_path(), log).unwrap();
    drop(first);

    let loaded = load_checkpoint(&ckpt).unwrap();
    let mut cfg = loaded.manifest.training.clone().unwrap();
    cfg.steps = 6;
    let mut resumed = Trainer::resume_with_images(loaded, cfg, &imgs, &ckpt).unwrap();
    assert_eq!(resumed.step(), 3);
    resumed.run(|_, _| {}).unwrap();

    assert!(params_equal(&straight, &resumed));
    assert_eq!(
        fs::read_to_string(straight.loss_path()).unwrap(),
        fs::read_to_string(resumed.loss_path()).unwrap()
    );
}

#[test]
fn batches_cover_each_epoch_once() {
    let n = 10;
    let mut seen: Vec<usize> = (1..=5).flat_map(|s| batch_indices(7, s, 2, n)).collect();
    seen.sort();
    assert_eq!(seen, (0..n).collect::<Vec<_>>());
    assert_ne!(batch_indices(7, 1, 10, n), batch_indices(7, 6, 10, n));
}

fn trained(dir: &Path, steps: u64) -> Trainer {
    let mut t = Trainer::with_images(config(steps), &images(), dir).unwrap();
    t.run(|_, _| {}).unwrap();
    t
}

#[test]
fn checkpoint_round_trip_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let t = trained(dir.path(), 2);
    let first = t.last_checkpoint().unwrap().to_path_buf();
    let loaded = load_checkpoint(&first).unwrap();
    for ((na, a), (nb, b)) in t.model().named_parameters().iter().zip(loaded.model.named_parameters()) {
        assert_eq!(na, &nb);
        assert!(a.equal(&b), "{na}");
    }
    let second = dir.path().join("again");
    let m2 = checkpoint::save_checkpoint(
        &second,
        &loaded.model,
        SaveOptions {
            iteration: loaded.manifest.iteration,
            optimizer: loaded.optimizer.as_ref(),
            training: loaded.manifest.training.as_ref(),
            loss_curve: loaded.loss_curve.as_deref(),
        },
    )
    .unwrap();
    let mut m1 = loaded.manifest.clone();
    m1.created_at = m2.created_at.clone();
    assert_eq!(m1, m2);
    let third = load_checkpoint(&second).unwrap();
    let m3 = checkpoint::save_checkpoint(
        &dir.path().join("third"),
        &third.model,
        SaveOptions {
            iteration: third.manifest.iteration,
            optimizer: third.optimizer.as_ref(),
            training: third.manifest.training.as_ref(),
            loss_curve: third.loss_curve.as_deref(),
        },
    )
    .unwrap();
    let strip = |p: &Path| {
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("manifest.json")).unwrap()).unwrap();
        v["created_at"] = serde_json::Value::Null;
        serde_json::to_string_pretty(&v).unwrap()
    };
    assert_eq!(strip(&second), strip(&dir.path().join("third")));
    assert_eq!(m2.blobs, m3.blobs);

    let x = Image::filled(32, 32, [0.3, 0.6, 0.2]);
    assert_eq!(t.model().decode(&t.model().encode(&x).unwrap()).unwrap(), third.model.decode(&third.model.encode(&x).unwrap()).unwrap());
}

#[test]
fn corrupt_blob_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let t = trained(dir.path(), 1);
    let ckpt = t.last_checkpoint().unwrap();
    let path = ckpt.join("generator.safetensors");
    let mut bytes = fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x55;
    fs::write(&path, bytes).unwrap();
    match load_checkpoint(ckpt) {
        Err(CheckpointError::Corrupt { file, .. }) => assert_eq!(file, "generator.safetensors"),
        other => panic!("expected corruption error, got {other:?}"),
    }
}

#[test]
fn unknown_format_version_asks_for_migration() {
    let dir = tempfile::tempdir().unwrap();
    let t = trained(dir.path(), 1);
    let ckpt = t.last_checkpoint().unwrap();
    let mpath = ckpt.join("manifest.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
    v["format_version"] = 2.into();
    fs::write(&mpath, v.to_string()).unwrap();
    let err = load_checkpoint(ckpt).unwrap_err();
    assert!(matches!(err, CheckpointError::Version { found: 2, expected: 1 }));
    assert!(err.to_string().contains("migrate"));
}

#[test]
fn edited_boxes_are_used_and_resized_boxes_fail_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let t = trained(dir.path(), 1);
    let ckpt = t.last_checkpoint().unwrap();
    let mpath = ckpt.join("manifest.json");
    let original = fs::read_to_string(&mpath).unwrap();

    let m = read_manifest(ckpt).unwrap();
    let nose = m.boxes.boxes()[2];
    let moved = Rect::new(nose.top + 4, nose.left, nose.bottom + 4, nose.right);
    let mut v: serde_json::Value = serde_json::from_str(&original).unwrap();
    v["boxes"]["boxes"]["nose"] = serde_json::to_value(moved).unwrap();
    fs::write(&mpath, v.to_string()).unwrap();
    let loaded = load_checkpoint(ckpt).unwrap();
    assert_eq!(loaded.model.boxes().boxes()[2], moved);
    assert_ne!(loaded.model.encoder.latent_boxes(), t.model().encoder.latent_boxes());

    let grown = Rect::new(nose.top, nose.left, nose.bottom + 4, nose.right);
    v["boxes"]["boxes"]["nose"] = serde_json::to_value(grown).unwrap();
    fs::write(&mpath, v.to_string()).unwrap();
    match load_checkpoint(ckpt) {
        Err(CheckpointError::Parameter { name, .. }) => assert!(name.starts_with("encoder.heads"), "{name}"),
        other => panic!("expected a named parameter error, got {other:?}"),
    }
}

#[test]
fn non_finite_loss_aborts_with_step_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::with_images(config(3), &images(), dir.path()).unwrap();
    t.train_step().unwrap();
    let ckpt = t.save_checkpoint().unwrap();
    let (_, p) = t
        .model()
        .named_parameters()
        .into_iter()
        .find(|(n, _)| n.starts_with("decoder.to_rgb"))
        .unwrap();
    let _ = tch::no_grad(|| p.shallow_clone().fill_(f64::NAN));
    match t.train_step() {
        Err(TrainError::NonFinite { step, last_checkpoint }) => {
            assert_eq!(step, 2);
            assert_eq!(last_checkpoint.unwrap(), ckpt);
        }
        other => panic!("expected non-finite abort, got {other:?}"),
    }
    assert_eq!(t.step(), 1);
    assert!(matches!(
        checkpoint::save_checkpoint(&dir.path().join("bad"), t.model(), SaveOptions::default()),
        Err(CheckpointError::NonFinite { .. })
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(1);
    c.device = "cuda:7".into();
    assert!(matches!(Trainer::with_images(c, &images(), dir.path()), Err(TrainError::Config(_))));
    let mut c = config(1);
    c.batch_size = 0;
    assert!(Trainer::with_images(c, &images(), dir.path()).is_err());
    assert!(Trainer::with_images(config(1), &[], dir.path()).is_err());
}
