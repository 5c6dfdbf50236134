use cireg::eval::{self, LandmarkSet, SynthKind};
use cireg::io::{self, ByteOrder, ElementType, RawSpec, RunConfig};
use cireg::net::{DeformationModel, IdentityMap};
use cireg::opt::{self, Preset};
use cireg::volume::{Geometry, Volume};
use cireg::{Error, Vec3};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

mod selfcheck;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "cireg",
    version,
    about = "Deformable 3D registration with a sine-activated coordinate network"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "CIREG_THREADS")]
    threads: Option<usize>,

    /// Reduce gradients in a fixed order so runs are bitwise reproducible.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Fit a deformation mapping target coordinates into the source image.
    Register(RegisterArgs),
    /// Resample a volume through a model: out(p) = volume(Φ(p)).
    Warp(WarpArgs),
    /// Target registration error on paired landmarks.
    Tre(TreArgs),
    /// Jacobian determinant of a model at every voxel center.
    Jacdet(JacdetArgs),
    /// Write a synthetic image pair with a known deformation.
    Synth(SynthArgs),
    /// Gradient, energy and invariance self-tests.
    Selfcheck(selfcheck::SelfcheckArgs),
}

/// Geometry for inputs that are bare raw files rather than `.mhd` headers.
#[derive(Args, Clone, Default)]
struct RawArgs {
    /// Raw input dimensions, e.g. 512,512,121.
    #[arg(long, value_parser = parse_dims)]
    raw_dims: Option<[usize; 3]>,
    /// Raw input spacing in mm.
    #[arg(long, value_parser = parse_vec3)]
    raw_spacing: Option<Vec3>,
    /// Raw input origin in mm.
    #[arg(long, value_parser = parse_vec3)]
    raw_origin: Option<Vec3>,
    /// Raw element type: int16, uint16 or float32.
    #[arg(long, default_value = "int16")]
    raw_type: String,
    /// Raw payload is big-endian.
    #[arg(long)]
    raw_big_endian: bool,
}

impl RawArgs {
    fn load(&self, path: &Path) -> cireg::Result<Volume> {
        let is_header = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("mhd"));
        if is_header {
            return io::read_volume(path);
        }
        let (Some(dims), Some(spacing)) = (self.raw_dims, self.raw_spacing) else {
            return Err(Error::InvalidConfig(format!(
                "{} is not a .mhd header; pass --raw-dims and --raw-spacing to read it as raw",
                path.display()
            )));
        };
        let spec = RawSpec {
            geometry: Geometry::new(dims, spacing, self.raw_origin.unwrap_or([0.0; 3]))?,
            element_type: self.raw_type.parse()?,
            byte_order: if self.raw_big_endian {
                ByteOrder::Big
            } else {
                ByteOrder::Little
            },
        };
        io::read_raw(path, &spec)
    }
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Sampling mask on the target grid (nonzero = inside); whole volume if absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// large-motion or small-motion.
    #[arg(long)]
    preset: Option<String>,
    /// Override any setting, e.g. --set train.epochs=500 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// windowed or batch_global.
    #[arg(long)]
    ncc_mode: Option<String>,
    /// periodic or fourier.
    #[arg(long)]
    encoder: Option<String>,
    /// Seed for both network initialization and point sampling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_model: PathBuf,
    /// Training log (CSV: epoch, similarity, regulariser, total).
    #[arg(long)]
    out_log: Option<PathBuf>,
    /// Write the effective configuration (TOML).
    #[arg(long)]
    out_config: Option<PathBuf>,
    /// Suppress per-epoch progress.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    raw: RawArgs,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output header (.mhd); the payload is written beside it.
    #[arg(long)]
    out: PathBuf,
    /// Output element type.
    #[arg(long, default_value = "float32")]
    out_type: String,
    #[command(flatten)]
    raw: RawArgs,
}

/// Model to evaluate: a checkpoint or the identity map.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct ModelArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Evaluate the identity map instead of a checkpoint.
    #[arg(long)]
    identity: bool,
}

impl ModelArgs {
    fn load(&self) -> cireg::Result<Option<DeformationModel>> {
        self.model.as_ref().map(DeformationModel::load).transpose()
    }
}

/// Grid to evaluate on: a volume header or explicit dims/spacing/origin.
#[derive(Args)]
struct GridArgs {
    /// Take dims, spacing and origin from this .mhd header.
    #[arg(long, conflicts_with_all = ["dims", "spacing"])]
    geometry_from: Option<PathBuf>,
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    #[arg(long, value_parser = parse_vec3)]
    spacing: Option<Vec3>,
    #[arg(long, value_parser = parse_vec3)]
    origin: Option<Vec3>,
}

impl GridArgs {
    /// `need_dims` is false when only spacing and origin matter.
    fn geometry(&self, need_dims: bool) -> cireg::Result<Geometry> {
        if let Some(path) = &self.geometry_from {
            return io::read_header(path)?.geometry();
        }
        let spacing = self
            .spacing
            .ok_or_else(|| Error::InvalidConfig("pass --geometry-from or --spacing".into()))?;
        let dims = match (self.dims, need_dims) {
            (Some(d), _) => d,
            (None, false) => [1, 1, 1],
            (None, true) => {
                return Err(Error::InvalidConfig(
                    "pass --geometry-from or --dims with --spacing".into(),
                ))
            }
        };
        Geometry::new(dims, spacing, self.origin.unwrap_or([0.0; 3]))
    }
}

#[derive(Args)]
struct TreArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Landmarks in the target (fixed) image, voxel indices.
    #[arg(long)]
    landmarks_target: PathBuf,
    /// Corresponding landmarks in the source (moving) image.
    #[arg(long)]
    landmarks_source: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    /// First voxel index in the landmark files (DIRLab uses 1).
    #[arg(long, default_value_t = 1)]
    index_base: u8,
    /// JSON report (mean, std, per_landmark).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-landmark CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct JacdetArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Determinant field as a float32 volume (.mhd).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary JSON (also printed to stdout).
    #[arg(long)]
    out_summary: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// translation, scaling or sinusoidal.
    #[arg(long)]
    kind: String,
    /// mm for translation and sinusoidal (maximum displacement), factor for scaling.
    #[arg(long)]
    amplitude: f64,
    #[arg(long, value_parser = parse_dims, default_value = "64,64,64")]
    dims: [usize; 3],
    #[arg(long, value_parser = parse_vec3, default_value = "1,1,1")]
    spacing: Vec3,
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
    origin: Vec3,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output files are named <prefix>_source.mhd, <prefix>_target.mhd, ...
    #[arg(long)]
    out_prefix: PathBuf,
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split([',', 'x', ' ']).filter(|p| !p.is_empty()).collect();
    if parts.len() != 3 {
        return Err(format!("expected three values like 1,2,3, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("cannot parse {p:?}"))?);
    }
    out.try_into()
        .map_err(|_| "expected three values".to_string())
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    parse_triple(s)
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    parse_triple(s)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match &cli.command {
        Command::Register(a) => register(a, cli.deterministic),
        Command::Warp(a) => warp(a),
        Command::Tre(a) => tre(a),
        Command::Jacdet(a) => jacdet(a),
        Command::Synth(a) => synth(a),
        Command::Selfcheck(a) => selfcheck::run(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numerical() => EXIT_NUMERICAL,
        Error::InvalidConfig(_) | Error::ConfigKey { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn write_text(path: &Path, text: &str) -> cireg::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn build_config(a: &RegisterArgs, deterministic: bool) -> cireg::Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => io::read_config(p)?,
        None => io::parse_config("", true)?,
    };
    if let Some(p) = &a.preset {
        let preset: Preset = p.parse()?;
        cfg.set("preset", preset.name())?;
    }
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let flags = [
        ("train.epochs", a.epochs.map(|v| v.to_string())),
        ("train.points_per_epoch", a.points.map(|v| v.to_string())),
        ("train.learning_rate", a.lr.map(|v| format!("{v:?}"))),
        ("loss.lambda", a.lambda.map(|v| format!("{v:?}"))),
        ("loss.ncc_mode", a.ncc_mode.clone()),
        ("net.encoder", a.encoder.clone()),
        ("net.seed", a.seed.map(|v| v.to_string())),
        ("train.seed", a.seed.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    if deterministic {
        cfg.set("train.deterministic", "true")?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn register(a: &RegisterArgs, deterministic: bool) -> cireg::Result<ExitCode> {
    let cfg = build_config(a, deterministic)?;
    for d in &cfg.defaults_applied {
        eprintln!("config: {d}");
    }
    let source = a.raw.load(&a.source)?;
    let target = a.raw.load(&a.target)?;
    let mask = match &a.mask {
        Some(p) => {
            let m = a.raw.load(p)?;
            if m.geometry != target.geometry {
                return Err(Error::Shape(format!(
                    "mask grid {:?} differs from target grid {:?}",
                    m.geometry, target.geometry
                )));
            }
            m.data.iter().map(|&v| v != 0.0).collect()
        }
        None => {
            eprintln!("note: no --mask given; sampling the whole target volume");
            vec![true; target.geometry.len()]
        }
    };
    let target = target.with_mask(mask)?;
    if let Some(p) = &a.out_config {
        write_text(p, &cfg.to_toml())?;
    }

    let start = std::time::Instant::now();
    let quiet = a.quiet;
    let (model, log) =
        opt::register_with(&source, &target, &cfg.net, &cfg.loss, &cfg.train, |r| {
            if !quiet {
                eprintln!(
                    "epoch {:>6}  similarity {:+.6}  regulariser {:.6}  total {:+.6}  [{:.0}s]",
                    r.epoch,
                    r.similarity,
                    r.regulariser,
                    r.total,
                    start.elapsed().as_secs_f64()
                );
            }
        })?;
    model.save(&a.out_model)?;
    if let Some(p) = &a.out_log {
        log.write_csv(p)?;
    }
    eprintln!(
        "wrote {} after {} epochs in {:.1}s",
        a.out_model.display(),
        cfg.train.epochs,
        start.elapsed().as_secs_f64()
    );
    Ok(ExitCode::SUCCESS)
}

fn warp(a: &WarpArgs) -> cireg::Result<ExitCode> {
    let vol = a.raw.load(&a.volume)?;
    let model = DeformationModel::load(&a.model)?;
    let out = eval::warp_volume(&vol, &model);
    io::write_volume(&a.out, &out, a.out_type.parse::<ElementType>()?)?;
    Ok(ExitCode::SUCCESS)
}

fn tre(a: &TreArgs) -> cireg::Result<ExitCode> {
    let grid = a.grid.geometry(false)?;
    let lm = LandmarkSet::new(
        io::read_landmarks(&a.landmarks_target)?,
        io::read_landmarks(&a.landmarks_source)?,
        a.index_base,
    )?;
    let report = match a.model.load()? {
        Some(m) => eval::tre(&m, &lm, &grid)?,
        None => eval::tre(&IdentityMap, &lm, &grid)?,
    };
    if let Some(p) = &a.out {
        write_text(p, &report.to_json())?;
    }
    if let Some(p) = &a.out_csv {
        write_text(p, &report.to_csv())?;
    }
    println!(
        "{}",
        serde_json::json!({"landmarks": lm.count(), "mean_mm": report.mean, "std_mm": report.std})
    );
    Ok(ExitCode::SUCCESS)
}

fn jacdet(a: &JacdetArgs) -> cireg::Result<ExitCode> {
    let grid = a.grid.geometry(true)?;
    let field = match a.model.load()? {
        Some(m) => eval::jacdet_grid(&m, &grid),
        None => eval::jacdet_grid(&IdentityMap, &grid),
    };
    if let Some(p) = &a.out {
        io::write_volume(p, &field.to_volume(), ElementType::Float32)?;
    }
    let summary = serde_json::to_string_pretty(&field.summary()).expect("summary serializes");
    if let Some(p) = &a.out_summary {
        write_text(p, &summary)?;
    }
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn synth(a: &SynthArgs) -> cireg::Result<ExitCode> {
    let kind: SynthKind = a.kind.parse()?;
    let grid = Geometry::new(a.dims, a.spacing, a.origin)?;
    let case = eval::synthetic_case(kind, a.amplitude, &grid, a.seed)?;
    let prefix = a.out_prefix.to_string_lossy().into_owned();
    let path = |suffix: &str| PathBuf::from(format!("{prefix}_{suffix}"));
    if let Some(dir) = path("x").parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }

    io::write_volume(path("source.mhd"), &case.source, ElementType::Float32)?;
    io::write_volume(path("target.mhd"), &case.target, ElementType::Float32)?;
    let mask = Volume::new(grid, vec![1.0; grid.len()])?;
    io::write_volume(path("mask.mhd"), &mask, ElementType::UInt16)?;
    let field = case.deformation.dense_field(&grid);
    for (axis, name) in ["field_x.mhd", "field_y.mhd", "field_z.mhd"]
        .iter()
        .enumerate()
    {
        let comp = Volume::new(grid, field.iter().map(|d| d[axis]).collect())?;
        io::write_volume(path(name), &comp, ElementType::Float32)?;
    }
    let true_jac = eval::jacdet_grid(&case.deformation, &grid);
    io::write_volume(
        path("jacdet.mhd"),
        &true_jac.to_volume(),
        ElementType::Float32,
    )?;
    io::write_landmarks(path("landmarks_target.txt"), &case.landmarks.target)?;
    io::write_landmarks(path("landmarks_source.txt"), &case.landmarks.source)?;

    let initial = eval::tre(&IdentityMap, &case.landmarks, &grid)?;
    let max_disp = field
        .iter()
        .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
        .fold(0.0, f64::max);
    let summary = serde_json::json!({
        "kind": a.kind,
        "amplitude": a.amplitude,
        "dims": a.dims,
        "spacing": a.spacing,
        "seed": a.seed,
        "landmarks": case.landmarks.count(),
        "landmark_index_base": 1,
        "initial_tre_mm": initial.mean,
        "max_displacement_mm": max_disp,
        "true_jacdet": true_jac.summary(),
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&path("synth.json"), &text)?;
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}
