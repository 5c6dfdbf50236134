use std::path::Path;
use std::process::{Command, Output};

fn cireg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cireg"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CIREG_THREADS")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn synth(dir: &Path) {
    let out = cireg(
        &[
            "synth",
            "--kind",
            "sinusoidal",
            "--amplitude",
            "3",
            "--dims",
            "20,20,20",
            "--seed",
            "5",
            "--out-prefix",
            "case",
        ],
        dir,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn identity_jacdet_is_one_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let out = cireg(
        &[
            "jacdet",
            "--identity",
            "--dims",
            "5,4,3",
            "--spacing",
            "1,2,3",
            "--out",
            "j.mhd",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let s = json(&out);
    assert_eq!(s["negative_fraction"], 0.0);
    assert_eq!(s["min"], 1.0);
    assert_eq!(s["max"], 1.0);
    assert_eq!(s["voxels"], 60);
    assert!(dir.path().join("j.raw").exists());
}

#[test]
fn synth_writes_every_artifact_and_identity_tre_matches_summary() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for f in [
        "source", "target", "mask", "field_x", "field_y", "field_z", "jacdet",
    ] {
        assert!(dir.path().join(format!("case_{f}.mhd")).exists(), "{f}");
        assert!(dir.path().join(format!("case_{f}.raw")).exists(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("case_synth.json")).unwrap())
            .unwrap();
    let out = cireg(
        &[
            "tre",
            "--identity",
            "--landmarks-target",
            "case_landmarks_target.txt",
            "--landmarks-source",
            "case_landmarks_source.txt",
            "--geometry-from",
            "case_target.mhd",
            "--out",
            "tre.json",
            "--out-csv",
            "tre.csv",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let t = json(&out);
    assert_eq!(t["landmarks"], 216);
    let mean = t["mean_mm"].as_f64().unwrap();
    assert!((mean - summary["initial_tre_mm"].as_f64().unwrap()).abs() < 1e-9);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("tre.json")).unwrap())
            .unwrap();
    assert_eq!(report["per_landmark"].as_array().unwrap().len(), 216);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("tre.csv"))
            .unwrap()
            .lines()
            .count(),
        217
    );
}

#[test]
fn register_warp_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let register = |model: &str| {
        cireg(
            &[
                "--deterministic",
                "register",
                "--source",
                "case_source.mhd",
                "--target",
                "case_target.mhd",
                "--mask",
                "case_mask.mhd",
                "--set",
                "net.hidden_units=16",
                "--epochs",
                "6",
                "--points",
                "200",
                "--ncc-mode",
                "batch_global",
                "--out-model",
                model,
                "--out-log",
                "log.csv",
                "--out-config",
                "effective.toml",
                "--quiet",
            ],
            dir.path(),
        )
    };
    let out = register("a.bin");
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(register("b.bin").status.success());
    assert_eq!(
        std::fs::read(dir.path().join("a.bin")).unwrap(),
        std::fs::read(dir.path().join("b.bin")).unwrap()
    );

    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("net.omega = 32.0 (default)"), "{stderr}");
    assert!(!stderr.contains("train.epochs ="), "{stderr}");
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(
        log.lines().next(),
        Some("epoch,similarity,regulariser,total")
    );
    assert_eq!(log.lines().last().unwrap().split(',').next(), Some("5"));
    let effective = std::fs::read_to_string(dir.path().join("effective.toml")).unwrap();
    assert!(effective.contains("hidden_units = 16"), "{effective}");
    assert!(effective.contains("deterministic = true"), "{effective}");

    let out = cireg(
        &[
            "warp",
            "--volume",
            "case_source.mhd",
            "--model",
            "a.bin",
            "--out",
            "warped.mhd",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("warped.raw").exists());

    let out = cireg(
        &[
            "jacdet",
            "--model",
            "a.bin",
            "--geometry-from",
            "case_target.mhd",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(json(&out)["voxels"], 8000);
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = cireg(
        &["selfcheck", "--nets", "3", "--out", "report.json"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(json(&out)["passed"], true);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["gradients"].as_array().unwrap().len(), 3);
    assert_eq!(
        report["gradients"][0]["report"]["components"]
            .as_array()
            .unwrap()
            .len(),
        5
    );
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cireg(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(cireg(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(
        cireg(&["jacdet", "--identity"], dir.path()).status.code(),
        Some(1)
    );
    let missing = cireg(
        &[
            "warp", "--volume", "none.mhd", "--model", "none.bin", "--out", "o.mhd",
        ],
        dir.path(),
    );
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("none.mhd"));

    synth(dir.path());
    let base = [
        "register",
        "--source",
        "case_source.mhd",
        "--target",
        "case_target.mhd",
        "--out-model",
        "m.bin",
    ];
    let bad_key = cireg(&[&base[..], &["--set", "net.depth=4"]].concat(), dir.path());
    assert_eq!(bad_key.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("net.depth"));
    std::fs::write(dir.path().join("bad.toml"), "[train]\nepochs = \"many\"\n").unwrap();
    let bad_type = cireg(&[&base[..], &["--config", "bad.toml"]].concat(), dir.path());
    assert_eq!(bad_type.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_type.stderr).contains("train.epochs"));

    std::fs::write(dir.path().join("lm.txt"), "1 2 3\n4 5\n").unwrap();
    let bad_lm = cireg(
        &[
            "tre",
            "--identity",
            "--landmarks-target",
            "lm.txt",
            "--landmarks-source",
            "lm.txt",
            "--spacing",
            "1,1,1",
        ],
        dir.path(),
    );
    assert_eq!(bad_lm.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_lm.stderr).contains("lm.txt:2"));
}

#[test]
fn raw_inputs_need_explicit_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<u8> = (0..27i16).flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(dir.path().join("vol.raw"), data).unwrap();
    let no_geom = cireg(
        &[
            "warp", "--volume", "vol.raw", "--model", "m.bin", "--out", "w.mhd",
        ],
        dir.path(),
    );
    assert_eq!(no_geom.status.code(), Some(1));

    let truncated = cireg(
        &[
            "warp",
            "--volume",
            "vol.raw",
            "--model",
            "m.bin",
            "--out",
            "w.mhd",
            "--raw-dims",
            "4,3,3",
            "--raw-spacing",
            "1,1,1",
        ],
        dir.path(),
    );
    assert_eq!(truncated.status.code(), Some(2));
}
