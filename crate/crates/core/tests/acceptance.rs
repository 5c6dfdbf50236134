//! Acceptance suite. Prints one `PASS`, `FAIL` or `SKIP` line per criterion and
//! always exits successfully; the lines are the verdict.
//!
//! Environment:
//! - `CIREG_ACCEPTANCE_SKIP_LONG=1` skips the three full registration runs
//!   behind criteria 6, 8 and 9.
//! - `DIRLAB_DIR` points at a directory holding `manifest.toml` (see README)
//!   and enables criterion 7.

use cireg::energy::{self, EnergyParams};
use cireg::eval::{self, SynthKind};
use cireg::grad::{self, GradCheckProblem};
use cireg::loss::{self, LossConfig, NccMode};
use cireg::net::{Deformation, DeformationModel, Encoder, IdentityMap, NetConfig, Normalization};
use cireg::opt::{self, Preset, TrainConfig, TrainingLog};
use cireg::volume::Geometry;
use cireg::{Mat3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

struct Verdict {
    id: usize,
    name: &'static str,
    status: &'static str,
    detail: String,
}

impl Verdict {
    fn new(id: usize, name: &'static str, passed: bool, detail: String) -> Self {
        let status = if passed { "PASS" } else { "FAIL" };
        Self {
            id,
            name,
            status,
            detail,
        }
    }

    fn skip(id: usize, name: &'static str, detail: impl Into<String>) -> Self {
        Self {
            id,
            name,
            status: "SKIP",
            detail: detail.into(),
        }
    }

    fn print(&self) {
        println!(
            "{} criterion {} ({}): {}",
            self.status, self.id, self.name, self.detail
        );
    }
}

fn random_params(rng: &mut ChaCha8Rng) -> EnergyParams {
    EnergyParams {
        a1: rng.gen_range(0.01..10.0),
        a2: rng.gen_range(0.01..10.0),
        a3: rng.gen_range(0.01..10.0),
        a4: rng.gen_range(0.01..10.0),
        alpha: rng.gen_range(1.01..6.0),
        ..EnergyParams::default()
    }
}

fn energy_normalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let worst = (0..100)
        .map(|_| energy::density(&Mat3::IDENTITY, &random_params(&mut rng)).abs())
        .fold(0.0, f64::max);
    Verdict::new(
        1,
        "energy normalization",
        worst <= 1e-12,
        format!("max |W(I)| = {worst:.2e} over 100 parameter sets (tol 1e-12)"),
    )
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>();
        if n > 1e-4 && n <= 1.0 {
            return Mat3::from_quaternion(q);
        }
    }
}

fn conformal_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let p = random_params(&mut rng);
        let c = rng.gen_range(0.5..2.0);
        let j = random_rotation(&mut rng).scaled(c);
        // Independent of energy::distortion_ratios.
        let d = j.det();
        let length = p.a1 * j.frob_sq().powf(4.5) / d.powi(3);
        let area = p.a2 * j.cofactor().frob_sq().powi(3) / d.powi(4);
        let expect_length = p.a1 * 3f64.powf(4.5);
        let expect_area = p.a2 * 27.0;
        worst = worst
            .max(((length - expect_length) / expect_length).abs())
            .max(((area - expect_area) / expect_area).abs());
    }
    Verdict::new(
        2,
        "conformal invariance",
        worst <= 1e-9,
        format!("max relative deviation {worst:.2e} over 200 similarity transforms (tol 1e-9)"),
    )
}

fn tiny_geometry() -> Geometry {
    Geometry::new([14, 12, 13], [1.0, 1.25, 0.9], [2.0, -3.0, 1.0]).unwrap()
}

fn tiny_model(
    rng: &mut ChaCha8Rng,
    layers: std::ops::RangeInclusive<usize>,
    hidden: std::ops::RangeInclusive<usize>,
) -> DeformationModel {
    let seed = rng.gen();
    let cfg = NetConfig {
        num_layers: rng.gen_range(layers),
        hidden_units: rng.gen_range(hidden),
        encoder: if rng.gen_bool(0.5) {
            Encoder::Periodic
        } else {
            Encoder::Fourier
        },
        fourier_features: 6,
        fourier_sigma: 0.5,
        seed,
        ..NetConfig::default()
    };
    let mut m = DeformationModel::new(cfg, Normalization::from_geometry(&tiny_geometry())).unwrap();
    m.randomize_output_layer(0.02, seed ^ 7);
    m
}

fn gradient_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..20 {
        let model = tiny_model(&mut rng, 2..=3, 4..=16);
        let loss = LossConfig {
            window_n: 3,
            ncc_mode: if rng.gen_bool(0.5) {
                NccMode::Windowed
            } else {
                NccMode::BatchGlobal
            },
            ..LossConfig::default()
        };
        let problem =
            GradCheckProblem::synthetic(&model, tiny_geometry(), 6, loss, rng.gen()).unwrap();
        let report = grad::check_gradients(&model, &problem, 1e-4).unwrap();
        worst = worst.max(report.max_rel_error());
        failures += usize::from(!report.passed);
    }
    Verdict::new(
        3,
        "gradient exactness",
        failures == 0,
        format!("max relative error {worst:.2e} over 20 nets x 5 components, {failures} failing (tol 1e-4)"),
    )
}

fn spatial_jacobian_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = tiny_geometry();
    let h = 1e-3;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let model = tiny_model(&mut rng, 2..=4, 8..=32);
        for _ in 0..20 {
            let p: Vec3 = g.index_to_world(std::array::from_fn(|a| {
                rng.gen_range(0.0..(g.dims[a] - 1) as f64)
            }));
            let (_, j) = model.spatial_jacobian(p);
            let mut fd = [0.0; 9];
            for k in 0..3 {
                let at = |s: f64| {
                    let mut q = p;
                    q[k] += s * h;
                    model.forward(q)
                };
                let (p1, m1, p2, m2) = (at(1.0), at(-1.0), at(2.0), at(-2.0));
                for i in 0..3 {
                    fd[3 * i + k] = (8.0 * (p1[i] - m1[i]) - (p2[i] - m2[i])) / (12.0 * h);
                }
            }
            let diff = (0..9).map(|e| (j.m[e] - fd[e]).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(diff / j.frob());
        }
    }
    Verdict::new(
        4,
        "spatial Jacobian exactness",
        worst <= 1e-6,
        format!("max relative error {worst:.2e} over 1000 (model, point) pairs (tol 1e-6)"),
    )
}

fn identity_start() -> Verdict {
    let g = Geometry::new([24, 20, 16], [1.0, 1.5, 2.0], [-5.0, 3.0, 0.0]).unwrap();
    let case = eval::synthetic_case(SynthKind::Sinusoidal, 3.0, &g, 9).unwrap();
    let image = case.source.clone().with_mask(vec![true; g.len()]).unwrap();
    let model =
        DeformationModel::new(NetConfig::default(), Normalization::from_geometry(&g)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = opt::sample_batch(&image, 500, &mut rng).unwrap();

    let max_disp = batch
        .iter()
        .map(|&p| {
            let q = model.map(p);
            (0..3).map(|a| (q[a] - p[a]).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let jac = eval::jacdet_grid(&model, &g);
    let mut ok = max_disp == 0.0 && jac.min_value == 1.0 && jac.max_value == 1.0;
    let mut detail = format!(
        "max |Φ(p) − p| = {max_disp:.1e}, det ∇Φ in [{}, {}]",
        jac.min_value, jac.max_value
    );
    let global = LossConfig {
        ncc_mode: NccMode::BatchGlobal,
        ..LossConfig::default()
    };
    let terms = loss::total_loss(&image, &image, &model, &batch, &global).unwrap();
    ok &= terms.regulariser == 0.0 && (terms.total + 1.0).abs() <= 1e-9;
    detail += &format!(
        ", batch_global: regulariser {:.1e}, total {:.12}",
        terms.regulariser, terms.total
    );

    // Windowed mode at identity gives Σ²/(Σ² + eps) per window, Σ the window's
    // centred sum of squares, so it reaches −1 only on well-textured windows.
    let windowed = LossConfig::default();
    let terms = loss::total_loss(&image, &image, &model, &batch, &windowed).unwrap();
    let r = (windowed.window_n / 2) as i64;
    let expected = -batch
        .iter()
        .map(|p| {
            let mut vals = Vec::new();
            for k in -r..=r {
                for j in -r..=r {
                    for i in -r..=r {
                        let o = [
                            i as f64 * g.spacing[0],
                            j as f64 * g.spacing[1],
                            k as f64 * g.spacing[2],
                        ];
                        vals.push(image.sample([p[0] + o[0], p[1] + o[1], p[2] + o[2]]));
                    }
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let ss: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum();
            if ss / (vals.len() as f64) < windowed.variance_eps {
                0.0
            } else {
                ss * ss / (ss * ss + windowed.variance_eps)
            }
        })
        .sum::<f64>()
        / batch.len() as f64;
    ok &= terms.regulariser == 0.0 && (terms.total - expected).abs() <= 1e-12;
    detail += &format!(
        ", windowed: total {:.12} vs variance-floor closed form {:.12}",
        terms.total, expected
    );
    Verdict::new(5, "identity start", ok, detail)
}

struct Run {
    encoder: Encoder,
    model: DeformationModel,
    log: TrainingLog,
    seconds: f64,
}

fn synthetic_run(case: &eval::SynthCase, encoder: Encoder, label: &str) -> Run {
    let mut net = NetConfig {
        encoder,
        ..NetConfig::default()
    };
    let mut train = TrainConfig {
        deterministic: true,
        log_every: 1,
        ..TrainConfig::default()
    };
    Preset::SmallMotion.apply(&mut net, &mut train);
    let loss = LossConfig {
        ncc_mode: NccMode::BatchGlobal,
        ..LossConfig::default()
    };
    let start = Instant::now();
    let epochs = train.epochs;
    let (model, log) = opt::register_with(&case.source, &case.target, &net, &loss, &train, |r| {
        if r.epoch % 250 == 0 || r.epoch + 1 == epochs {
            eprintln!(
                "  [{label}] epoch {:>5}/{epochs}  similarity {:+.5}  regulariser {:.4}  {:.0}s",
                r.epoch,
                r.similarity,
                r.regulariser,
                start.elapsed().as_secs_f64()
            );
        }
    })
    .unwrap();
    Run {
        encoder,
        model,
        log,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn synthetic_recovery(case: &eval::SynthCase, g: &Geometry, run: &Run) -> Verdict {
    let initial = eval::tre(&IdentityMap, &case.landmarks, g).unwrap();
    let fin = eval::tre(&run.model, &case.landmarks, g).unwrap();
    let jac = eval::jacdet_grid(&run.model, g);
    let folds_ok = jac.negative_fraction == 0.0;
    let start_ok = initial.mean >= 5.0;
    let (passed, band) = if fin.mean <= 1.0 {
        (true, "")
    } else if fin.mean <= 1.5 {
        (true, " [report-only band (1.0, 1.5]]")
    } else {
        (false, "")
    };
    Verdict::new(
        6,
        "synthetic recovery",
        passed && folds_ok && start_ok,
        format!(
            "TRE {:.3} mm -> {:.3} mm (target <= 1.0, fail > 1.5){band}; initial >= 5 mm: {start_ok}; \
             negative jacdet fraction {} (min {:.3}, max {:.3}); {:.0}s",
            initial.mean, fin.mean, jac.negative_fraction, jac.min_value, jac.max_value, run.seconds
        ),
    )
}

/// Block means of the total loss over consecutive 100-epoch blocks and the
/// standard error of each mean.
fn block_stats(log: &TrainingLog, window: usize) -> Vec<(f64, f64)> {
    let means = log.block_means(window);
    means
        .iter()
        .enumerate()
        .map(|(b, &mean)| {
            let vals: Vec<f64> = log
                .records
                .iter()
                .filter(|r| r.epoch / window == b)
                .map(|r| r.total)
                .collect();
            let n = vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            (mean, (var / n).sqrt())
        })
        .collect()
}

fn encoder_parity(runs: &[&Run]) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for run in runs {
        let stats = block_stats(&run.log, 100);
        let mut strict_rises = 0;
        let mut significant_rises = 0;
        for w in stats.windows(2) {
            let (a, sa) = w[0];
            let (b, sb) = w[1];
            if b > a {
                strict_rises += 1;
                if b - a > 2.0 * (sa * sa + sb * sb).sqrt() {
                    significant_rises += 1;
                }
            }
        }
        let finite = run.log.records.iter().all(|r| r.total.is_finite());
        ok &= finite
            && significant_rises == 0
            && stats.len() >= 2
            && stats.last().unwrap().0 < stats[0].0;
        parts.push(format!(
            "{:?}: block mean {:.4} -> {:.4}, {} of {} block steps rise ({} beyond 2 standard errors)",
            run.encoder,
            stats.first().map_or(f64::NAN, |s| s.0),
            stats.last().map_or(f64::NAN, |s| s.0),
            strict_rises,
            stats.len().saturating_sub(1),
            significant_rises
        ));
    }
    Verdict::new(8, "encoder parity", ok, parts.join("; "))
}

fn determinism(a: &Run, b: &Run) -> Verdict {
    let bytes = |m: &DeformationModel| {
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        buf
    };
    let (x, y) = (bytes(&a.model), bytes(&b.model));
    Verdict::new(
        9,
        "determinism",
        x == y,
        format!(
            "checkpoints of two seeded runs: {} vs {} bytes, identical: {}",
            x.len(),
            y.len(),
            x == y
        ),
    )
}

#[derive(serde::Deserialize)]
struct Manifest {
    case: Vec<ManifestCase>,
}

#[derive(serde::Deserialize)]
struct ManifestCase {
    dataset: String,
    name: String,
    spacing: Vec3,
    landmarks_target: String,
    landmarks_source: String,
}

fn dataset_reproduction() -> Verdict {
    const NAME: &str = "dataset reproduction";
    let Some(dir) = std::env::var_os("DIRLAB_DIR").map(std::path::PathBuf::from) else {
        return Verdict::skip(7, NAME, "DIRLAB_DIR not set");
    };
    let text = match std::fs::read_to_string(dir.join("manifest.toml")) {
        Ok(t) => t,
        Err(e) => {
            return Verdict::skip(
                7,
                NAME,
                format!("{}: {e}", dir.join("manifest.toml").display()),
            )
        }
    };
    let manifest: Manifest = match toml::from_str(&text) {
        Ok(m) => m,
        Err(e) => return Verdict::new(7, NAME, false, format!("manifest.toml: {e}")),
    };
    let mut copd = Vec::new();
    let mut dct = Vec::new();
    let mut copd01 = None;
    for c in &manifest.case {
        let load = |f: &str| cireg::io::read_landmarks(dir.join(f));
        let (t, s) = match (load(&c.landmarks_target), load(&c.landmarks_source)) {
            (Ok(t), Ok(s)) => (t, s),
            (Err(e), _) | (_, Err(e)) => return Verdict::new(7, NAME, false, e.to_string()),
        };
        let g = Geometry::new([1, 1, 1], c.spacing, [0.0; 3]).unwrap();
        let lm = eval::LandmarkSet::new(t, s, 1).unwrap();
        let mean = eval::tre(&IdentityMap, &lm, &g).unwrap().mean;
        match c.dataset.as_str() {
            "copd" => {
                if c.name.trim_start_matches("copd").trim_start_matches('0') == "1" {
                    copd01 = Some(mean);
                }
                copd.push(mean);
            }
            "4dct" => dct.push(mean),
            other => return Verdict::new(7, NAME, false, format!("unknown dataset {other:?}")),
        }
    }
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let checks = [
        ("COPD case 01", copd01, 26.33),
        ("COPD average", avg(&copd), 23.36),
        ("4DCT average", avg(&dct), 8.46),
    ];
    let mut ok = true;
    let mut any = false;
    let mut parts = Vec::new();
    for (label, got, expect) in checks {
        match got {
            Some(v) => {
                any = true;
                let hit = (v - expect).abs() <= 0.05;
                ok &= hit;
                parts.push(format!("{label} {v:.2} mm (expected {expect:.2})"));
            }
            None => parts.push(format!("{label} not in manifest")),
        }
    }
    if !any {
        return Verdict::skip(7, NAME, parts.join("; "));
    }
    Verdict::new(7, NAME, ok, parts.join("; ") + " (tol 0.05 mm)")
}

fn main() {
    let mut verdicts = Vec::new();
    let mut run = |f: fn() -> Verdict| {
        let v = f();
        v.print();
        verdicts.push(v);
    };
    run(energy_normalization);
    run(conformal_invariance);
    run(gradient_exactness);
    run(spatial_jacobian_exactness);
    run(identity_start);

    let skip_long = std::env::var("CIREG_ACCEPTANCE_SKIP_LONG").is_ok_and(|v| v == "1");
    let mut late = Vec::new();
    if skip_long {
        for (id, name) in [
            (6, "synthetic recovery"),
            (8, "encoder parity"),
            (9, "determinism"),
        ] {
            late.push(Verdict::skip(id, name, "CIREG_ACCEPTANCE_SKIP_LONG=1"));
        }
    } else {
        let g = Geometry::new([64, 64, 64], [1.0; 3], [0.0; 3]).unwrap();
        let case = eval::synthetic_case(SynthKind::Sinusoidal, 8.0, &g, 0).unwrap();
        eprintln!(
            "  synthetic 64^3 sinusoidal pair, max displacement 8 mm; three registrations follow"
        );
        let periodic = synthetic_run(&case, Encoder::Periodic, "periodic");
        let v6 = synthetic_recovery(&case, &g, &periodic);
        v6.print();
        late.push(v6);
        let fourier = synthetic_run(&case, Encoder::Fourier, "fourier");
        let v8 = encoder_parity(&[&periodic, &fourier]);
        v8.print();
        late.push(v8);
        let repeat = synthetic_run(&case, Encoder::Periodic, "periodic repeat");
        let v9 = determinism(&periodic, &repeat);
        v9.print();
        late.push(v9);
    }
    let v7 = dataset_reproduction();
    v7.print();
    verdicts.push(v7);
    for v in late {
        if skip_long {
            v.print();
        }
        verdicts.push(v);
    }

    verdicts.sort_by_key(|v| v.id);
    println!();
    println!("acceptance summary");
    for v in &verdicts {
        println!("{} criterion {} ({})", v.status, v.id, v.name);
    }
}
