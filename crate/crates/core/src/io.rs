//! Volumes, landmarks and run configuration on disk.
//!
//! Volumes use the MetaImage convention: a `key = value` text header (`.mhd`)
//! next to a raw payload, or a bare raw file whose geometry is supplied by the
//! caller. Voxels are stored x-fastest.

use crate::energy::EnergyParams;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, NccMode};
use crate::net::{Encoder, NetConfig};
use crate::opt::{Preset, TrainConfig};
use crate::volume::{Geometry, Volume};
use crate::Vec3;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ElementType {
    Int16,
    UInt16,
    Float32,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::Int16 | ElementType::UInt16 => 2,
            ElementType::Float32 => 4,
        }
    }

    pub fn meta_name(self) -> &'static str {
        match self {
            ElementType::Int16 => "MET_SHORT",
            ElementType::UInt16 => "MET_USHORT",
            ElementType::Float32 => "MET_FLOAT",
        }
    }

    fn from_meta(name: &str) -> Option<Self> {
        match name {
            "MET_SHORT" => Some(ElementType::Int16),
            "MET_USHORT" => Some(ElementType::UInt16),
            "MET_FLOAT" => Some(ElementType::Float32),
            _ => None,
        }
    }
}

impl std::str::FromStr for ElementType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "int16" | "short" | "met_short" => Ok(ElementType::Int16),
            "uint16" | "ushort" | "met_ushort" => Ok(ElementType::UInt16),
            "float32" | "float" | "met_float" => Ok(ElementType::Float32),
            other => Err(Error::InvalidConfig(format!(
                "unknown element type {other:?} (expected int16, uint16 or float32)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ByteOrder {
    Little,
    Big,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
    pub element_type: ElementType,
    pub byte_order: ByteOrder,
    pub data_path: PathBuf,
}

impl VolumeHeader {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, self.origin)
    }
}

/// Layout of a bare raw file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSpec {
    pub geometry: Geometry,
    pub element_type: ElementType,
    pub byte_order: ByteOrder,
}

fn header_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Header {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_numbers<T: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| header_err(path, format!("{key}: cannot parse {t:?}")))
        })
        .collect::<Result<_>>()?;
    <[T; 3]>::try_from(parts)
        .map_err(|p| header_err(path, format!("{key}: expected 3 values, found {}", p.len())))
}

fn parse_bool(path: &Path, key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(header_err(
            path,
            format!("{key}: expected True or False, found {other:?}"),
        )),
    }
}

pub fn read_header(path: impl AsRef<Path>) -> Result<VolumeHeader> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dims = None;
    let mut spacing = [1.0; 3];
    let mut origin = [0.0; 3];
    let mut element = None;
    let mut byte_order = ByteOrder::Little;
    let mut data = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(header_err(
                path,
                format!("expected `key = value`, found {line:?}"),
            ));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NDims" if value != "3" => {
                return Err(header_err(
                    path,
                    format!("only 3D volumes are supported, NDims = {value}"),
                ))
            }
            "DimSize" => dims = Some(parse_numbers::<usize>(path, key, value)?),
            "ElementSpacing" | "ElementSize" => spacing = parse_numbers(path, key, value)?,
            "Offset" | "Origin" | "Position" => origin = parse_numbers(path, key, value)?,
            "ElementType" => {
                element = Some(ElementType::from_meta(value).ok_or_else(|| {
                    Error::UnknownElementType {
                        path: path.to_path_buf(),
                        element: value.to_string(),
                    }
                })?)
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => {
                byte_order = if parse_bool(path, key, value)? {
                    ByteOrder::Big
                } else {
                    ByteOrder::Little
                }
            }
            "CompressedData" if parse_bool(path, key, value)? => {
                return Err(header_err(path, "compressed payloads are not supported"))
            }
            "ElementNumberOfChannels" if value != "1" => {
                return Err(header_err(
                    path,
                    "only single-channel volumes are supported",
                ))
            }
            "ElementDataFile" => {
                if value.eq_ignore_ascii_case("LOCAL") || value.starts_with("LIST") {
                    return Err(header_err(
                        path,
                        format!("ElementDataFile = {value} is not supported"),
                    ));
                }
                let dir = path.parent().unwrap_or_else(|| Path::new(""));
                data = Some(dir.join(value));
            }
            _ => {}
        }
    }
    let dims = dims.ok_or_else(|| header_err(path, "missing DimSize"))?;
    let element_type = element.ok_or_else(|| header_err(path, "missing ElementType"))?;
    let data_path = data.ok_or_else(|| header_err(path, "missing ElementDataFile"))?;
    let header = VolumeHeader {
        dims,
        spacing,
        origin,
        element_type,
        byte_order,
        data_path,
    };
    header
        .geometry()
        .map_err(|e| header_err(path, e.to_string()))?;
    Ok(header)
}

/// Reads a MetaImage header and its payload.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let header = read_header(path)?;
    read_raw(
        &header.data_path,
        &RawSpec {
            geometry: header.geometry()?,
            element_type: header.element_type,
            byte_order: header.byte_order,
        },
    )
}

pub fn read_raw(path: impl AsRef<Path>, spec: &RawSpec) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let size = spec.element_type.size();
    let expected = spec.geometry.len() * size;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let big = spec.byte_order == ByteOrder::Big;
    let data = bytes
        .chunks_exact(size)
        .map(|c| match spec.element_type {
            ElementType::Int16 => {
                let b = [c[0], c[1]];
                (if big {
                    i16::from_be_bytes(b)
                } else {
                    i16::from_le_bytes(b)
                }) as f64
            }
            ElementType::UInt16 => {
                let b = [c[0], c[1]];
                (if big {
                    u16::from_be_bytes(b)
                } else {
                    u16::from_le_bytes(b)
                }) as f64
            }
            ElementType::Float32 => {
                let b = [c[0], c[1], c[2], c[3]];
                (if big {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                }) as f64
            }
        })
        .collect();
    Volume::new(spec.geometry, data)
}

fn encode(vol: &Volume, element_type: ElementType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(vol.data.len() * element_type.size());
    for (i, &v) in vol.data.iter().enumerate() {
        let range_err = |lo: f64, hi: f64| {
            Error::Shape(format!(
                "voxel {i} value {v} is not representable as {} (range {lo}..={hi})",
                element_type.meta_name()
            ))
        };
        match element_type {
            ElementType::Int16 => {
                let r = v.round();
                if !(r >= i16::MIN as f64 && r <= i16::MAX as f64) {
                    return Err(range_err(i16::MIN as f64, i16::MAX as f64));
                }
                out.extend_from_slice(&(r as i16).to_le_bytes());
            }
            ElementType::UInt16 => {
                let r = v.round();
                if !(r >= 0.0 && r <= u16::MAX as f64) {
                    return Err(range_err(0.0, u16::MAX as f64));
                }
                out.extend_from_slice(&(r as u16).to_le_bytes());
            }
            ElementType::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    Ok(out)
}

/// Writes `path` (a `.mhd` header) and a little-endian payload beside it with
/// the same stem and a `.raw` extension.
pub fn write_volume(path: impl AsRef<Path>, vol: &Volume, element_type: ElementType) -> Result<()> {
    let path = path.as_ref();
    let raw_path = path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| header_err(path, "volume path needs a UTF-8 file name"))?
        .to_string();
    let g = &vol.geometry;
    let fmt3 = |v: Vec3| format!("{} {} {}", v[0], v[1], v[2]);
    let header = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\n\
         Offset = {}\nElementSpacing = {}\nDimSize = {} {} {}\nElementType = {}\nElementDataFile = {}\n",
        fmt3(g.origin),
        fmt3(g.spacing),
        g.dims[0],
        g.dims[1],
        g.dims[2],
        element_type.meta_name(),
        raw_name
    );
    let payload = encode(vol, element_type)?;
    std::fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    std::fs::write(path, header).map_err(|e| Error::io(path, e))
}

/// Loads a mask volume: nonzero voxels are inside.
pub fn read_mask(path: impl AsRef<Path>) -> Result<(Geometry, Vec<bool>)> {
    let v = read_volume(path)?;
    Ok((v.geometry, v.data.iter().map(|&x| x != 0.0).collect()))
}

/// Whitespace-separated numeric triples, one per line; blank lines ignored.
pub fn read_landmarks(path: impl AsRef<Path>) -> Result<Vec<Vec3>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(&text, path)
}

pub fn parse_landmarks(text: &str, path: &Path) -> Result<Vec<Vec3>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 coordinates, found {}",
                tokens.len()
            )));
        }
        let mut p = [0.0; 3];
        for (a, t) in tokens.iter().enumerate() {
            p[a] = t
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("not a number: {t:?}")))?;
        }
        points.push(p);
    }
    Ok(points)
}

pub fn write_landmarks(path: impl AsRef<Path>, points: &[Vec3]) -> Result<()> {
    let path = path.as_ref();
    let text: String = points
        .iter()
        .map(|p| format!("{} {} {}\n", p[0], p[1], p[2]))
        .collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Every setting of a run, as loaded from a configuration file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// `key = value` for every setting that was not given explicitly.
    pub defaults_applied: Vec<String>,
    /// Keys that were ignored (only when not strict).
    pub unknown_keys: Vec<String>,
}

impl RunConfig {
    pub fn energy(&self) -> &EnergyParams {
        &self.loss.energy
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    /// Applies `section.key = value`, with `value` in TOML syntax (bare
    /// strings are accepted for enum settings).
    pub fn set(&mut self, key_path: &str, value: &str) -> Result<()> {
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        if key_path == "preset" {
            return self.apply_preset(&parsed);
        }
        let (section, key) = key_path.split_once('.').ok_or_else(|| Error::ConfigKey {
            key: key_path.into(),
            message: "expected section.key".into(),
        })?;
        if set_key(self, section, key, &parsed)? {
            let prefix = format!("{key_path} = ");
            self.defaults_applied.retain(|d| !d.starts_with(&prefix));
            Ok(())
        } else {
            Err(Error::ConfigKey {
                key: key_path.into(),
                message: "unknown setting".into(),
            })
        }
    }

    fn apply_preset(&mut self, value: &toml::Value) -> Result<()> {
        let name = value
            .as_str()
            .ok_or_else(|| type_error("preset", "a string", value))?;
        let preset: Preset = name.parse().map_err(|e: Error| Error::ConfigKey {
            key: "preset".into(),
            message: e.to_string(),
        })?;
        preset.apply(&mut self.net, &mut self.train);
        self.preset = Some(preset);
        Ok(())
    }

    /// The effective settings as TOML, in the same layout the reader accepts.
    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct Loss {
            lambda: f64,
            window_n: usize,
            ncc_mode: NccMode,
            variance_eps: f64,
        }
        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(skip_serializing_if = "Option::is_none")]
            preset: Option<&'static str>,
            net: &'a NetConfig,
            loss: Loss,
            energy: &'a EnergyParams,
            train: &'a TrainConfig,
        }
        let out = Out {
            preset: self.preset.map(Preset::name),
            net: &self.net,
            loss: Loss {
                lambda: self.loss.lambda,
                window_n: self.loss.window_n,
                ncc_mode: self.loss.ncc_mode,
                variance_eps: self.loss.variance_eps,
            },
            energy: &self.loss.energy,
            train: &self.train,
        };
        toml::to_string(&out).expect("config serializes")
    }
}

/// All recognized settings, as `(section, key)`.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("net", "num_layers"),
    ("net", "hidden_units"),
    ("net", "omega"),
    ("net", "encoder"),
    ("net", "fourier_features"),
    ("net", "fourier_sigma"),
    ("net", "seed"),
    ("loss", "lambda"),
    ("loss", "window_n"),
    ("loss", "ncc_mode"),
    ("loss", "variance_eps"),
    ("energy", "a1"),
    ("energy", "a2"),
    ("energy", "a3"),
    ("energy", "a4"),
    ("energy", "alpha"),
    ("energy", "eps_det"),
    ("train", "epochs"),
    ("train", "points_per_epoch"),
    ("train", "learning_rate"),
    ("train", "adam_beta1"),
    ("train", "adam_beta2"),
    ("train", "adam_eps"),
    ("train", "seed"),
    ("train", "deterministic"),
    ("train", "log_every"),
];

fn type_error(key: &str, expected: &str, found: &toml::Value) -> Error {
    Error::ConfigKey {
        key: key.into(),
        message: format!("expected {expected}, found {} `{found}`", found.type_str()),
    }
}

fn get_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        other => Err(type_error(key, "a number", other)),
    }
}

fn get_u64(key: &str, v: &toml::Value) -> Result<u64> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        other => Err(type_error(key, "a nonnegative integer", other)),
    }
}

fn get_usize(key: &str, v: &toml::Value) -> Result<usize> {
    get_u64(key, v).map(|x| x as usize)
}

fn get_bool(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| type_error(key, "true or false", v))
}

fn get_choice<T>(key: &str, v: &toml::Value, choices: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    let s = v.as_str().ok_or_else(|| type_error(key, "a string", v))?;
    choices
        .iter()
        .find(|(n, _)| *n == s)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::ConfigKey {
            key: key.into(),
            message: format!(
                "unknown value {s:?} (expected one of {})",
                choices
                    .iter()
                    .map(|(n, _)| *n)
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        })
}

/// Returns `Ok(false)` for an unrecognized key.
fn set_key(cfg: &mut RunConfig, section: &str, key: &str, v: &toml::Value) -> Result<bool> {
    let path = format!("{section}.{key}");
    let p = path.as_str();
    let (net, loss, train) = (&mut cfg.net, &mut cfg.loss, &mut cfg.train);
    match (section, key) {
        ("net", "num_layers") => net.num_layers = get_usize(p, v)?,
        ("net", "hidden_units") => net.hidden_units = get_usize(p, v)?,
        ("net", "omega") => net.omega = get_f64(p, v)?,
        ("net", "encoder") => {
            net.encoder = get_choice(
                p,
                v,
                &[
                    ("periodic", Encoder::Periodic),
                    ("fourier", Encoder::Fourier),
                ],
            )?
        }
        ("net", "fourier_features") => net.fourier_features = get_usize(p, v)?,
        ("net", "fourier_sigma") => net.fourier_sigma = get_f64(p, v)?,
        ("net", "seed") => net.seed = get_u64(p, v)?,
        ("loss", "lambda") => loss.lambda = get_f64(p, v)?,
        ("loss", "window_n") => loss.window_n = get_usize(p, v)?,
        ("loss", "ncc_mode") => {
            loss.ncc_mode = get_choice(
                p,
                v,
                &[
                    ("windowed", NccMode::Windowed),
                    ("batch_global", NccMode::BatchGlobal),
                ],
            )?
        }
        ("loss", "variance_eps") => loss.variance_eps = get_f64(p, v)?,
        ("energy", "a1") => loss.energy.a1 = get_f64(p, v)?,
        ("energy", "a2") => loss.energy.a2 = get_f64(p, v)?,
        ("energy", "a3") => loss.energy.a3 = get_f64(p, v)?,
        ("energy", "a4") => loss.energy.a4 = get_f64(p, v)?,
        ("energy", "alpha") => loss.energy.alpha = get_f64(p, v)?,
        ("energy", "eps_det") => loss.energy.eps_det = get_f64(p, v)?,
        ("train", "epochs") => train.epochs = get_usize(p, v)?,
        ("train", "points_per_epoch") => train.points_per_epoch = get_usize(p, v)?,
        ("train", "learning_rate") => train.learning_rate = get_f64(p, v)?,
        ("train", "adam_beta1") => train.adam_beta1 = get_f64(p, v)?,
        ("train", "adam_beta2") => train.adam_beta2 = get_f64(p, v)?,
        ("train", "adam_eps") => train.adam_eps = get_f64(p, v)?,
        ("train", "seed") => train.seed = get_u64(p, v)?,
        ("train", "deterministic") => train.deterministic = get_bool(p, v)?,
        ("train", "log_every") => train.log_every = get_usize(p, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn current_value(cfg: &RunConfig, section: &str, key: &str) -> String {
    let t: toml::Table = cfg.to_toml().parse().expect("round-trips");
    t.get(section)
        .and_then(|s| s.get(key))
        .map(|v| v.to_string())
        .unwrap_or_default()
}

/// Parses configuration text. With `strict`, unknown keys are errors;
/// otherwise they are collected in [`RunConfig::unknown_keys`].
pub fn parse_config(text: &str, strict: bool) -> Result<RunConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| syntax_error(text, &e))?;
    let mut cfg = RunConfig::default();
    if let Some(p) = table.get("preset") {
        cfg.apply_preset(p)?;
    }
    let mut explicit = std::collections::HashSet::new();
    let mut unknown = Vec::new();
    for (name, value) in &table {
        if name == "preset" {
            continue;
        }
        let toml::Value::Table(section) = value else {
            if CONFIG_KEYS.iter().any(|(s, _)| s == name) {
                return Err(type_error(name, "a [section]", value));
            }
            unknown.push(name.clone());
            continue;
        };
        for (key, v) in section {
            if set_key(&mut cfg, name, key, v)? {
                explicit.insert((name.as_str(), key.as_str()));
            } else {
                unknown.push(format!("{name}.{key}"));
            }
        }
    }
    if strict {
        if let Some(k) = unknown.first() {
            return Err(Error::ConfigKey {
                key: k.clone(),
                message: "unknown setting".into(),
            });
        }
    }
    cfg.defaults_applied = CONFIG_KEYS
        .iter()
        .filter(|k| !explicit.contains(*k))
        .map(|(s, k)| {
            let origin = match cfg.preset {
                Some(p) => format!("default, preset {}", p.name()),
                None => "default".to_string(),
            };
            format!("{s}.{k} = {} ({origin})", current_value(&cfg, s, k))
        })
        .collect();
    cfg.unknown_keys = unknown;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a configuration file in strict mode.
pub fn read_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, true)
}

/// Names the key on the offending line of a TOML syntax error.
fn syntax_error(text: &str, e: &toml::de::Error) -> Error {
    let Some(span) = e.span() else {
        return Error::InvalidConfig(e.message().to_string());
    };
    let mut section = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') && trimmed.ends_with(']') {
            section = trimmed
                .trim_matches(|c| c == '[' || c == ']')
                .trim()
                .to_string();
        }
        if span.start < offset + line.len() {
            key = trimmed
                .split_once('=')
                .map(|(k, _)| k.trim().to_string())
                .unwrap_or_default();
            break;
        }
        offset += line.len();
    }
    if key.is_empty() {
        return Error::InvalidConfig(e.message().to_string());
    }
    let path = if section.is_empty() {
        key
    } else {
        format!("{section}.{key}")
    };
    Error::ConfigKey {
        key: path,
        message: e.message().to_string(),
    }
}
