//! Flat `key=value` text configuration for training runs and phantom specs.
//!
//! Blank lines and lines starting with `#` are ignored. Keys mirror the
//! field names of [`TrainConfig`] and [`PhantomSpec`]; ranges are written
//! `lo,hi` and extents `AxBxC`.

use std::path::Path;

use rand25d_core::phantom::PhantomSpec;
use rand25d_core::pipeline::TrainConfig;

use crate::error::{Error, Result};

pub const TRAIN_KEYS: [&str; 11] = [
    "p",
    "m",
    "lr",
    "plateau_patience",
    "early_stop_patience",
    "minibatch",
    "folds",
    "seed",
    "max_epochs",
    "unet_depth",
    "unet_base",
];

pub const PHANTOM_KEYS: [&str; 10] = [
    "dims",
    "n_target_vessels",
    "n_distractors",
    "radius",
    "distractor_radius",
    "target_intensity",
    "distractor_intensity",
    "noise",
    "foreground_budget",
    "control_points",
];

/// One setting: line number, key, value.
pub type Setting = (usize, String, String);

/// Every setting line of `text`; on error, the line number and reason.
pub fn parse_lines(text: &str) -> std::result::Result<Vec<Setting>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| (i + 1, format!("expected `key=value`, found `{line}`")))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("invalid value `{v}` for `{key}`"))
}

pub fn parse_range(key: &str, v: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = v
        .split_once(',')
        .ok_or_else(|| format!("`{key}` expects `lo,hi`, found `{v}`"))?;
    Ok((parse_num(key, lo.trim())?, parse_num(key, hi.trim())?))
}

/// Parses `AxBxC` with every extent at least 1.
pub fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split('x').collect();
    let bad = || format!("dims must be AxBxC with positive extents, found `{s}`");
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(parts) {
        *d = p.parse().map_err(|_| bad())?;
        if *d == 0 {
            return Err(bad());
        }
    }
    Ok(dims)
}

pub fn set_train_key(cfg: &mut TrainConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    match key {
        "p" => cfg.p = parse_num(key, v)?,
        "m" => cfg.m = parse_num(key, v)?,
        "lr" => cfg.lr = parse_num(key, v)?,
        "plateau_patience" => cfg.plateau_patience = parse_num(key, v)?,
        "early_stop_patience" => cfg.early_stop_patience = parse_num(key, v)?,
        "minibatch" => cfg.minibatch = parse_num(key, v)?,
        "folds" => cfg.folds = parse_num(key, v)?,
        "seed" => cfg.seed = parse_num(key, v)?,
        "max_epochs" => cfg.max_epochs = parse_num(key, v)?,
        "unet_depth" => cfg.unet_depth = parse_num(key, v)?,
        "unet_base" => cfg.unet_base = parse_num(key, v)?,
        _ => return Err(format!("unknown training key `{key}`")),
    }
    Ok(())
}

pub fn set_phantom_key(
    spec: &mut PhantomSpec,
    key: &str,
    v: &str,
) -> std::result::Result<(), String> {
    match key {
        "dims" => spec.dims = parse_dims(v)?,
        "n_target_vessels" => spec.n_target_vessels = parse_num(key, v)?,
        "n_distractors" => spec.n_distractors = parse_num(key, v)?,
        "radius" => spec.radius = parse_range(key, v)?,
        "distractor_radius" => spec.distractor_radius = parse_range(key, v)?,
        "target_intensity" => spec.target_intensity = parse_range(key, v)?,
        "distractor_intensity" => spec.distractor_intensity = parse_range(key, v)?,
        "noise" => spec.noise = parse_num(key, v)?,
        "foreground_budget" => spec.foreground_budget = parse_num(key, v)?,
        "control_points" => spec.control_points = parse_num(key, v)?,
        _ => return Err(format!("unknown phantom key `{key}`")),
    }
    Ok(())
}

fn apply_file<C>(
    path: &Path,
    target: &mut C,
    set: fn(&mut C, &str, &str) -> std::result::Result<(), String>,
) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let config_err = |(line, reason): (usize, String)| Error::Config {
        path: path.to_path_buf(),
        line,
        reason,
    };
    for (line, k, v) in parse_lines(&text).map_err(config_err)? {
        set(target, &k, &v).map_err(|r| config_err((line, r)))?;
    }
    Ok(())
}

/// Applies the settings of `path` on top of `cfg`.
pub fn apply_train_file(path: &Path, cfg: &mut TrainConfig) -> Result<()> {
    apply_file(path, cfg, set_train_key)
}

pub fn load_phantom_spec(path: &Path) -> Result<PhantomSpec> {
    let mut spec = PhantomSpec::default();
    apply_file(path, &mut spec, set_phantom_key)?;
    spec.validate()?;
    Ok(spec)
}

/// `key=value` overrides from the command line.
pub fn apply_overrides(cfg: &mut TrainConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects key=value, found `{o}`")))?;
        set_train_key(cfg, k.trim(), v.trim()).map_err(Error::Usage)?;
    }
    Ok(())
}

/// One `key=value` line per field, in [`TRAIN_KEYS`] order; floats use the
/// shortest representation that parses back to the same value.
pub fn train_config_lines(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    let values = [
        cfg.p.to_string(),
        cfg.m.to_string(),
        cfg.lr.to_string(),
        cfg.plateau_patience.to_string(),
        cfg.early_stop_patience.to_string(),
        cfg.minibatch.to_string(),
        cfg.folds.to_string(),
        cfg.seed.to_string(),
        cfg.max_epochs.to_string(),
        cfg.unet_depth.to_string(),
        cfg.unet_base.to_string(),
    ];
    TRAIN_KEYS.into_iter().zip(values).collect()
}

pub fn phantom_spec_lines(spec: &PhantomSpec) -> Vec<(&'static str, String)> {
    let r = |(lo, hi): (f64, f64)| format!("{lo},{hi}");
    let [a, b, c] = spec.dims;
    let values = [
        format!("{a}x{b}x{c}"),
        spec.n_target_vessels.to_string(),
        spec.n_distractors.to_string(),
        r(spec.radius),
        r(spec.distractor_radius),
        r(spec.target_intensity),
        r(spec.distractor_intensity),
        spec.noise.to_string(),
        spec.foreground_budget.to_string(),
        spec.control_points.to_string(),
    ];
    PHANTOM_KEYS.into_iter().zip(values).collect()
}
