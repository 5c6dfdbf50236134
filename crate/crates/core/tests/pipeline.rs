use cireg::eval::{self, SynthKind};
use cireg::io::{self, ElementType};
use cireg::loss::{LossConfig, NccMode};
use cireg::net::{Deformation, DeformationModel, IdentityMap, NetConfig};
use cireg::opt::{self, TrainConfig};
use cireg::volume::Geometry;

fn small_net() -> NetConfig {
    NetConfig {
        num_layers: 3,
        hidden_units: 32,
        ..NetConfig::default()
    }
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        points_per_epoch: 400,
        learning_rate: 1e-4,
        deterministic: true,
        log_every: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn translation_is_partly_recovered() {
    let g = Geometry::new([24, 24, 24], [1.0; 3], [0.0; 3]).unwrap();
    let case = eval::synthetic_case(SynthKind::Translation, 2.0, &g, 3).unwrap();
    let before = eval::tre(&IdentityMap, &case.landmarks, &g).unwrap();
    let loss = LossConfig {
        ncc_mode: NccMode::BatchGlobal,
        ..LossConfig::default()
    };
    let (model, log) = opt::register(
        &case.source,
        &case.target,
        &small_net(),
        &loss,
        &small_train(150),
    )
    .unwrap();
    let after = eval::tre(&model, &case.landmarks, &g).unwrap();
    assert!(
        (before.mean - 2.0).abs() < 1e-9,
        "translation TRE {}",
        before.mean
    );
    assert!(
        after.mean < 0.8 * before.mean,
        "TRE {} -> {}",
        before.mean,
        after.mean
    );
    let first = log.records.first().unwrap().similarity;
    let last = log.records.last().unwrap().similarity;
    assert!(last < first, "similarity {first} -> {last}");
    assert_eq!(eval::jacdet_grid(&model, &g).negative_fraction, 0.0);
}

#[test]
fn checkpoint_roundtrip_preserves_the_map() {
    let g = Geometry::new([16, 16, 16], [1.0, 1.2, 0.8], [1.0, 2.0, 3.0]).unwrap();
    let case = eval::synthetic_case(SynthKind::Sinusoidal, 2.0, &g, 1).unwrap();
    let (model, _) = opt::register(
        &case.source,
        &case.target,
        &small_net(),
        &LossConfig::default(),
        &small_train(3),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    model.save(&path).unwrap();
    let loaded = DeformationModel::load(&path).unwrap();
    assert_eq!(loaded.params(), model.params());
    for p in [[3.0, 4.0, 5.0], [10.5, 9.25, 7.0]] {
        assert_eq!(loaded.map(p), model.map(p));
    }
}

#[test]
fn deterministic_runs_are_bitwise_identical() {
    let g = Geometry::new([16, 16, 16], [1.0; 3], [0.0; 3]).unwrap();
    let case = eval::synthetic_case(SynthKind::Sinusoidal, 2.0, &g, 2).unwrap();
    let run = || {
        opt::register(
            &case.source,
            &case.target,
            &small_net(),
            &LossConfig::default(),
            &small_train(4),
        )
        .unwrap()
        .0
    };
    let a = run();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(run);
    let bits = |m: &DeformationModel| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn synthetic_pair_survives_disk_and_warps_back() {
    let g = Geometry::new([20, 18, 16], [1.0; 3], [0.0; 3]).unwrap();
    let case = eval::synthetic_case(SynthKind::Sinusoidal, 2.5, &g, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("source.mhd");
    io::write_volume(&src, &case.source, ElementType::Float32).unwrap();
    let source = io::read_volume(&src).unwrap();
    assert_eq!(source.geometry, g);

    // Warping the source through the true deformation reproduces the target in the interior.
    let warped = eval::warp_volume(&source, &case.deformation);
    let mut worst = 0.0f64;
    for i in 0..g.len() {
        let idx = g.voxel_index(i);
        if idx.iter().zip(g.dims).all(|(&c, d)| c >= 4 && c + 4 < d) {
            worst = worst.max((warped.data[i] - case.target.data[i]).abs());
        }
    }
    assert!(worst < 0.05, "max interior residual {worst}");

    let lm_t = dir.path().join("t.txt");
    let lm_s = dir.path().join("s.txt");
    io::write_landmarks(&lm_t, &case.landmarks.target).unwrap();
    io::write_landmarks(&lm_s, &case.landmarks.source).unwrap();
    let lm = eval::LandmarkSet::new(
        io::read_landmarks(&lm_t).unwrap(),
        io::read_landmarks(&lm_s).unwrap(),
        1,
    )
    .unwrap();
    let exact = eval::tre(&case.deformation, &lm, &g).unwrap();
    assert!(exact.mean < 1e-9, "true map TRE {}", exact.mean);
}

#[test]
fn config_file_drives_registration_settings() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(
        &path,
        "preset = \"small-motion\"\n[net]\nhidden_units = 16\n[loss]\nncc_mode = \"batch_global\"\n[train]\nepochs = 2\n",
    )
    .unwrap();
    let cfg = io::read_config(&path).unwrap();
    assert_eq!(cfg.net.num_layers, 3);
    assert_eq!(cfg.net.hidden_units, 16);
    assert_eq!(cfg.train.epochs, 2);
    assert_eq!(cfg.train.points_per_epoch, 10_000);
    assert_eq!(cfg.loss.ncc_mode, NccMode::BatchGlobal);
    let again = io::parse_config(&cfg.to_toml(), true).unwrap();
    assert_eq!(again.net, cfg.net);
    assert_eq!(again.loss, cfg.loss);
    assert_eq!(again.train, cfg.train);
}
