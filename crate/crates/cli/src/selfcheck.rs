use cireg::energy::{self, EnergyParams};
use cireg::grad::{self, GradCheckProblem, GradCheckReport};
use cireg::loss::{LossConfig, NccMode};
use cireg::net::{DeformationModel, Encoder, NetConfig, Normalization};
use cireg::volume::Geometry;
use cireg::{Mat3, Result};
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Args)]
pub struct SelfcheckArgs {
    /// Number of random tiny networks for the gradient check.
    #[arg(long, default_value_t = 20)]
    nets: usize,
    /// Maximum relative error accepted by the gradient check.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Random Jacobians for the energy finite-difference suite.
    #[arg(long, default_value_t = 200)]
    energy_cases: usize,
    /// Random similarity transforms for the conformal-invariance suite.
    #[arg(long, default_value_t = 200)]
    conformal_cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct NetCheck {
    layers: usize,
    hidden: usize,
    encoder: Encoder,
    ncc_mode: NccMode,
    report: GradCheckReport,
}

#[derive(Serialize)]
struct SuiteSummary {
    cases: usize,
    max_error: f64,
    tolerance: f64,
    passed: bool,
}

#[derive(Serialize)]
struct Report {
    gradients: Vec<NetCheck>,
    gradients_passed: bool,
    energy_fd: SuiteSummary,
    conformal: SuiteSummary,
    passed: bool,
}

const ENERGY_STEP: f64 = 1e-6;
const ENERGY_TOLERANCE: f64 = 1e-6;
const CONFORMAL_TOLERANCE: f64 = 1e-9;

pub fn run(a: &SelfcheckArgs) -> Result<ExitCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut gradients = Vec::with_capacity(a.nets);
    for i in 0..a.nets {
        let check = gradient_case(&mut rng, a.tolerance)?;
        eprintln!(
            "gradient net {:>2}: {} layers x {:<2} {:<8} {:<12} max rel error {:.2e} {}",
            i,
            check.layers,
            check.hidden,
            format!("{:?}", check.encoder).to_lowercase(),
            format!("{:?}", check.ncc_mode).to_lowercase(),
            check.report.max_rel_error(),
            if check.report.passed { "ok" } else { "FAILED" }
        );
        gradients.push(check);
    }
    let gradients_passed = gradients.iter().all(|c| c.report.passed);
    let energy_fd = energy_suite(&mut rng, a.energy_cases);
    eprintln!(
        "energy gradient: max error {:.2e} over {} cases",
        energy_fd.max_error, energy_fd.cases
    );
    let conformal = conformal_suite(&mut rng, a.conformal_cases);
    eprintln!(
        "conformal invariance: max error {:.2e} over {} cases",
        conformal.max_error, conformal.cases
    );

    let passed = gradients_passed && energy_fd.passed && conformal.passed;
    let report = Report {
        gradients,
        gradients_passed,
        energy_fd,
        conformal,
        passed,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(p) = &a.out {
        std::fs::write(p, &text).map_err(|e| cireg::Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    println!(
        "{}",
        serde_json::json!({
            "gradients_passed": report.gradients_passed,
            "energy_fd_passed": report.energy_fd.passed,
            "conformal_passed": report.conformal.passed,
            "passed": passed,
        })
    );
    Ok(if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    })
}

fn gradient_case(rng: &mut ChaCha8Rng, tolerance: f64) -> Result<NetCheck> {
    let geometry = Geometry::new([14, 12, 13], [1.0, 1.25, 0.9], [2.0, -3.0, 1.0])?;
    let layers = rng.gen_range(2..=3);
    let hidden = rng.gen_range(4..=16);
    let encoder = if rng.gen_bool(0.5) {
        Encoder::Periodic
    } else {
        Encoder::Fourier
    };
    let ncc_mode = if rng.gen_bool(0.5) {
        NccMode::Windowed
    } else {
        NccMode::BatchGlobal
    };
    let seed = rng.gen();
    let cfg = NetConfig {
        num_layers: layers,
        hidden_units: hidden,
        omega: 32.0,
        encoder,
        fourier_features: 6,
        fourier_sigma: 0.5,
        seed,
    };
    let mut model = DeformationModel::new(cfg, Normalization::from_geometry(&geometry))?;
    model.randomize_output_layer(0.02, seed ^ 1);
    let loss = LossConfig {
        window_n: 3,
        ncc_mode,
        ..LossConfig::default()
    };
    let problem = GradCheckProblem::synthetic(&model, geometry, 6, loss, seed ^ 2)?;
    let report = grad::check_gradients(&model, &problem, tolerance)?;
    Ok(NetCheck {
        layers,
        hidden,
        encoder,
        ncc_mode,
        report,
    })
}

fn random_jacobian(rng: &mut ChaCha8Rng) -> Mat3 {
    loop {
        let m: [f64; 9] =
            std::array::from_fn(|i| if i % 4 == 0 { 1.0 } else { 0.0 } + rng.gen_range(-0.4..0.4));
        let j = Mat3::new(m);
        if j.det() > 0.3 {
            return j;
        }
    }
}

fn energy_suite(rng: &mut ChaCha8Rng, cases: usize) -> SuiteSummary {
    let mut max_error = 0.0f64;
    for _ in 0..cases {
        let params = EnergyParams {
            a1: rng.gen_range(0.1..2.0),
            a2: rng.gen_range(0.1..2.0),
            a3: rng.gen_range(0.1..2.0),
            a4: rng.gen_range(0.1..2.0),
            alpha: rng.gen_range(1.5..3.0),
            ..EnergyParams::default()
        };
        let j = random_jacobian(rng);
        let g = energy::density_grad(&j, &params);
        for k in 0..9 {
            let mut plus = j;
            let mut minus = j;
            plus.m[k] += ENERGY_STEP;
            minus.m[k] -= ENERGY_STEP;
            let fd = (energy::density(&plus, &params) - energy::density(&minus, &params))
                / (2.0 * ENERGY_STEP);
            let err = (g.m[k] - fd).abs() / g.m[k].abs().max(1.0);
            max_error = max_error.max(if err.is_nan() { f64::INFINITY } else { err });
        }
    }
    SuiteSummary {
        cases,
        max_error,
        tolerance: ENERGY_TOLERANCE,
        passed: max_error <= ENERGY_TOLERANCE,
    }
}

fn conformal_suite(rng: &mut ChaCha8Rng, cases: usize) -> SuiteSummary {
    let length_ref = 81.0 * 3f64.sqrt();
    let area_ref = 27.0;
    let mut max_error = 0.0f64;
    for _ in 0..cases {
        let q = loop {
            let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let n = q.iter().map(|v| v * v).sum::<f64>();
            if n > 1e-4 && n <= 1.0 {
                break q;
            }
        };
        let c = rng.gen_range(0.5..2.0);
        let j = Mat3::from_quaternion(q).scaled(c);
        let (length, area) = energy::distortion_ratios(&j);
        let err = ((length - length_ref) / length_ref)
            .abs()
            .max(((area - area_ref) / area_ref).abs());
        max_error = max_error.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    SuiteSummary {
        cases,
        max_error,
        tolerance: CONFORMAL_TOLERANCE,
        passed: max_error <= CONFORMAL_TOLERANCE,
    }
}
