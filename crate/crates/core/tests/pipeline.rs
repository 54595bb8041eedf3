use itnet::builder::{build_itnet, HyperParams, ParamStore};
use itnet::graph::{execute, ExecMode};
use itnet::ntf::NtfFile;
use itnet::train::{
    evaluate, gen_synthetic_dataset, hparams_from_checkpoint, params_from_checkpoint, train, Dataset, TrainConfig,
};

fn scratch_dir(tag: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("itnet-pipeline-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn checkpoint_on_disk_reproduces_evaluation() {
    let hp = HyperParams::new(2, 3, 1, 4, 3, 16, 24, false);
    let g = build_itnet(&hp).unwrap();
    let data = gen_synthetic_dataset(5, 8, 16, 24, 3).unwrap();
    let eval = gen_synthetic_dataset(6, 4, 16, 24, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let (summary, ckpt) = train(&g, ParamStore::init(&g, 1), &data, &eval, &cfg).unwrap();
    assert_eq!(summary.losses.len(), 4);
    assert!(summary.losses.iter().all(|l| l.is_finite()));

    let dir = scratch_dir("ckpt");
    let path = dir.join("model.ntf");
    ckpt.save(&path).unwrap();
    let loaded = NtfFile::load(&path).unwrap();
    let hp2 = hparams_from_checkpoint(&loaded).unwrap();
    assert_eq!(hp2, hp);
    let g2 = build_itnet(&hp2).unwrap();
    let p2 = params_from_checkpoint(&g2, &loaded, 0).unwrap();
    let m = evaluate(&g2, &p2, &eval, 2, 255).unwrap();
    assert_eq!(&m, &summary.history.last().unwrap().miou);
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn dataset_survives_ntf_files() {
    let d = gen_synthetic_dataset(2, 3, 8, 16, 5).unwrap();
    let dir = scratch_dir("data");
    let path = dir.join("d.ntf");
    d.to_ntf().save(&path).unwrap();
    let back = Dataset::from_ntf(&NtfFile::load(&path).unwrap()).unwrap();
    assert_eq!(back.images(), d.images());
    assert_eq!(back.labels(), d.labels());
    assert_eq!(back.classes(), 5);
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn double_precision_agrees_with_single() {
    let g = build_itnet(&HyperParams::new(2, 2, 1, 4, 3, 16, 16, true)).unwrap();
    let p32 = ParamStore::<f32>::init(&g, 4);
    let p64: ParamStore<f64> = p32.cast();
    let d = gen_synthetic_dataset(0, 2, 16, 16, 3).unwrap();
    let (x32, _) = d.batch::<f32>(&[0, 1], &[]);
    let (x64, _) = d.batch::<f64>(&[0, 1], &[]);
    let a = execute(&g, &x32, &p32, ExecMode::Infer).unwrap();
    let b = execute(&g, &x64, &p64, ExecMode::Infer).unwrap();
    for i in 0..2 {
        let (u, v) = (a.output(i).unwrap(), b.output(i).unwrap());
        let worst = u
            .data()
            .iter()
            .zip(v.data())
            .map(|(&s, &t)| (s as f64 - t).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "output {i}: {worst}");
    }
}
