use revcore::data::dir::{read_dataset, write_dataset, Manifest};
use revcore::data::{make_toy_dataset, Pairing, ToyKind};
use revcore::model::Regime;
use revcore::train::{inspect, load_generator_pair, read_rgck};
use revcore::{fit, DatasetSpec, TrainConfig, Trainer};

#[test]
fn dataset_directory_to_logged_checkpointed_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("ds");
    let ds = make_toy_dataset(ToyKind::ColormapSeg, 4, 16, 2).unwrap();
    let manifest = Manifest {
        kind: "colormap-seg".into(),
        n: 4,
        size: 16,
        seed: 2,
        pairing: Pairing::Paired,
    };
    write_dataset(&ds, &manifest, &root, false).unwrap();
    let (back, m) = read_dataset(&root).unwrap();
    assert_eq!(back, ds);
    assert_eq!(m, manifest);

    let cfg = TrainConfig {
        width: 2,
        depth: 3,
        disc_width: 4,
        epochs: 1,
        epochs_decay: 1,
        dataset: DatasetSpec::Dir { path: root },
        checkpoint_dir: Some(tmp.path().join("ck")),
        checkpoint_every: 3,
        log_path: Some(tmp.path().join("log.jsonl")),
        ..TrainConfig::default()
    };
    let out = fit(&cfg, None, None).unwrap();
    assert!(out.finished);
    assert_eq!(out.iterations, 8);

    let log = std::fs::read_to_string(tmp.path().join("log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 9);
    assert_eq!(lines[0]["header"]["iters_per_epoch"], 4);
    for (i, l) in lines[1..].iter().enumerate() {
        assert_eq!(l["iter"], i);
        assert!(l["total_g"].as_f64().unwrap().is_finite());
    }
    // Second epoch decays linearly to zero.
    assert_eq!(lines[8]["lr"], 0.0);

    let mut names: Vec<String> = std::fs::read_dir(tmp.path().join("ck"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["final.rgck", "init.rgck", "iter_000003.rgck", "iter_000006.rgck"]
    );

    let entries = read_rgck(&tmp.path().join("ck/final.rgck")).unwrap();
    let info = inspect(&entries).unwrap();
    assert_eq!(
        (info.generator.width, info.generator.depth, info.generator.image_size),
        (2, 3, 16)
    );
    assert_eq!((info.disc_width, info.iter), (Some(4), Some(8)));

    let ds = cfg.dataset.load().unwrap();
    let mut trainer = Trainer::<f32>::new(cfg, ds).unwrap();
    trainer.restore(&entries).unwrap();
    assert_eq!(trainer.model.regime, Regime::Paired);
    let (pair, store) = load_generator_pair::<f32>(&entries).unwrap();
    let x = trainer.dataset.a[0].to_tensor::<f32>();
    let ours = pair.translate_xy(&store, &x).unwrap();
    let theirs = trainer.model.pair.translate_xy(&trainer.store, &x).unwrap();
    assert!(ours.bit_eq(&theirs));
}
