//! Training checkpoints: a text manifest followed by a little-endian f32
//! payload. The manifest records the configuration, the run state
//! (including the exact RNG position), the Adam step and a list of tensors
//! with their shapes; the payload holds those tensors back to back in
//! manifest order. See the README for the full layout.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand25d_core::metrics::BalanceSchedule;
use rand25d_core::optim::AdamState;
use rand25d_core::pipeline::{Model25D, Random25DLearner, RunState, TrainConfig, Trainer};
use rand_chacha::ChaCha8Rng;

use crate::config::{set_train_key, train_config_lines};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 9] = b"R25DCKPT\n";
pub const VERSION: u32 = 1;
const SECTIONS: [&str; 4] = ["model", "best", "adam_m", "adam_v"];

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub state: RunState,
    pub model: Model25D,
    /// Weights of the best validation epoch so far.
    pub best: Model25D,
    pub adam: AdamState<f32>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer<Random25DLearner>) -> Self {
        Checkpoint {
            cfg: t.cfg.clone(),
            state: t.state.clone(),
            model: t.learner.model.clone(),
            best: t.best.clone(),
            adam: t.learner.adam.clone(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer<Random25DLearner>> {
        let learner = Random25DLearner::with_state(self.model, self.adam)?;
        Ok(Trainer::from_parts(
            learner, self.cfg, self.state, self.best,
        ))
    }
}

fn shape_str(dims: &[usize]) -> String {
    dims.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn angles_str(a: &[f64]) -> String {
    a.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut h = format!("version={VERSION}\n");
    for (k, v) in train_config_lines(&ck.cfg) {
        h.push_str(&format!("config.{k}={v}\n"));
    }
    let s = &ck.state;
    let seed: String = s
        .rng
        .get_seed()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    h.push_str(&format!(
        "state.epoch={}\nstate.lr={}\nstate.balance_c={}\nstate.balance_epoch={}\nstate.best_val={}\n\
         state.best_epoch={}\nstate.since_plateau={}\nstate.since_best={}\nstate.stopped={}\n\
         rng.seed={seed}\nrng.stream={}\nrng.word_pos={}\nadam.step={}\n",
        s.epoch,
        s.lr,
        s.balance.c,
        s.balance.epoch,
        s.best_val,
        s.best_epoch,
        s.since_plateau,
        s.since_best,
        s.stopped,
        s.rng.get_stream(),
        s.rng.get_word_pos(),
        ck.adam.step,
    ));
    h.push_str(&format!(
        "angles.model={}\n",
        angles_str(ck.model.bank_p.angles())
    ));
    h.push_str(&format!(
        "angles.best={}\n",
        angles_str(ck.best.bank_p.angles())
    ));

    let names = ck.model.param_names();
    let mut payload: Vec<u8> = Vec::new();
    let mut put = |section: &str, h: &mut String, dims: &[usize], name: &str, vals: &[f32]| {
        h.push_str(&format!("tensor={section} {name} {}\n", shape_str(dims)));
        vals.iter()
            .for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
    };
    for (section, model) in [("model", &ck.model), ("best", &ck.best)] {
        for (name, p) in names.iter().zip(model.params()) {
            put(section, &mut h, p.dims(), name, p.values());
        }
    }
    for (section, moments) in [("adam_m", &ck.adam.m), ("adam_v", &ck.adam.v)] {
        for ((name, p), vals) in names.iter().zip(ck.model.params()).zip(moments) {
            put(section, &mut h, p.dims(), name, vals);
        }
    }
    h.push_str(&format!("payload_bytes={}\n\n", payload.len()));
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(h.as_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)).map_err(Error::io(path))
}

/// Loads a checkpoint with the configuration stored in it.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_checkpoint(&bytes, path, None)
}

/// Loads a checkpoint that must fit the model shapes of `cfg`; the
/// returned checkpoint carries `cfg`. Parameters whose shapes disagree are
/// listed in [`Error::ShapeMismatch`].
pub fn load_checkpoint_for(path: &Path, cfg: &TrainConfig) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_checkpoint(&bytes, path, Some(cfg))
}

struct Entry {
    offset: usize,
    value: String,
}

pub fn decode_checkpoint(
    bytes: &[u8],
    path: &Path,
    expected: Option<&TrainConfig>,
) -> Result<Checkpoint> {
    let err = |offset: usize, reason: String| Error::format(path, offset as u64, reason);
    if !bytes.starts_with(MAGIC) {
        return Err(err(0, "bad magic; not a checkpoint file".into()));
    }
    let mut offset = MAGIC.len();
    let mut keys: HashMap<String, Entry> = HashMap::new();
    let mut tensors: Vec<(usize, String, String, Vec<usize>)> = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err(offset, "manifest ends without a blank line".into()))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| err(offset, "manifest is not UTF-8".into()))?;
        let at = offset;
        offset += end + 1;
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(at, format!("expected `key=value`, found `{line}`")))?;
        if k == "tensor" {
            let parts: Vec<&str> = v.split(' ').collect();
            let [section, name, shape] = parts[..] else {
                return Err(err(at, format!("malformed tensor line `{line}`")));
            };
            if !SECTIONS.contains(&section) {
                return Err(err(at, format!("unknown tensor section `{section}`")));
            }
            let dims = if shape.is_empty() {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| err(at, format!("malformed shape `{shape}`")))?
            };
            tensors.push((at, section.to_string(), name.to_string(), dims));
        } else if keys
            .insert(
                k.to_string(),
                Entry {
                    offset: at,
                    value: v.to_string(),
                },
            )
            .is_some()
        {
            return Err(err(at, format!("duplicate key `{k}`")));
        }
    }
    let get = |k: &str| {
        keys.get(k)
            .ok_or_else(|| err(offset, format!("manifest lacks `{k}`")))
    };
    fn parse<T: std::str::FromStr>(e: &Entry, k: &str, path: &Path) -> Result<T> {
        e.value.parse().map_err(|_| {
            Error::format(
                path,
                e.offset as u64,
                format!("invalid value `{}` for `{k}`", e.value),
            )
        })
    }
    let num = |k: &str| -> Result<f64> { parse(get(k)?, k, path) };
    let int = |k: &str| -> Result<usize> { parse(get(k)?, k, path) };

    let version: u32 = parse(get("version")?, "version", path)?;
    if version != VERSION {
        return Err(err(
            get("version")?.offset,
            format!("unsupported version {version}"),
        ));
    }
    let mut stored_cfg = TrainConfig::default();
    for (k, _) in train_config_lines(&stored_cfg.clone()) {
        let key = format!("config.{k}");
        let e = get(&key)?;
        set_train_key(&mut stored_cfg, k, &e.value).map_err(|r| err(e.offset, r))?;
    }
    let cfg = expected.cloned().unwrap_or(stored_cfg);

    let seed_hex = &get("rng.seed")?.value;
    let mut seed = [0u8; 32];
    if seed_hex.len() != 64 {
        return Err(err(
            get("rng.seed")?.offset,
            "rng.seed must be 64 hex digits".into(),
        ));
    }
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| {
            err(
                get("rng.seed").map(|e| e.offset).unwrap_or(0),
                "rng.seed must be hex".into(),
            )
        })?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(parse(get("rng.stream")?, "rng.stream", path)?);
    rng.set_word_pos(parse(get("rng.word_pos")?, "rng.word_pos", path)?);
    let state = RunState {
        epoch: int("state.epoch")?,
        lr: num("state.lr")?,
        balance: BalanceSchedule {
            c: num("state.balance_c")?,
            epoch: int("state.balance_epoch")?,
        },
        best_val: num("state.best_val")?,
        best_epoch: int("state.best_epoch")?,
        since_plateau: int("state.since_plateau")?,
        since_best: int("state.since_best")?,
        stopped: parse(get("state.stopped")?, "state.stopped", path)?,
        rng,
    };
    let adam_step: u64 = parse(get("adam.step")?, "adam.step", path)?;

    // Shapes the configuration calls for, compared section by section.
    let mut model = Model25D::from_config(&cfg)?;
    let names = model.param_names();
    let want: Vec<Vec<usize>> = model.params().iter().map(|p| p.dims().to_vec()).collect();
    let mut mismatched: Vec<String> = Vec::new();
    let mut note = |n: &str| {
        if !mismatched.iter().any(|m| m == n) {
            mismatched.push(n.to_string());
        }
    };
    for section in SECTIONS {
        let found: Vec<_> = tensors.iter().filter(|t| t.1 == section).collect();
        for (name, dims) in names.iter().zip(&want) {
            match found.iter().find(|t| &t.2 == name) {
                Some(t) if &t.3 == dims => {}
                _ => note(name),
            }
        }
        for t in &found {
            if !names.contains(&t.2) {
                note(&t.2);
            }
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::ShapeMismatch { names: mismatched });
    }
    let mut expected_seq = SECTIONS
        .iter()
        .flat_map(|s| names.iter().map(move |n| (*s, n)));
    let in_order = tensors.len() == SECTIONS.len() * names.len()
        && tensors
            .iter()
            .zip(&mut expected_seq)
            .all(|(t, (s, n))| t.1 == s && &t.2 == n);
    if !in_order {
        return Err(err(
            tensors.first().map(|t| t.0).unwrap_or(offset),
            "tensor list out of order".into(),
        ));
    }

    let numel: usize = want.iter().map(|d| d.iter().product::<usize>()).sum();
    let declared = int("payload_bytes")?;
    let expected_bytes = 4 * SECTIONS.len() * numel;
    if declared != expected_bytes {
        return Err(err(
            get("payload_bytes")?.offset,
            format!("payload_bytes={declared} but the tensor list needs {expected_bytes}"),
        ));
    }
    let payload = &bytes[offset..];
    if payload.len() < expected_bytes {
        return Err(err(
            bytes.len(),
            format!(
                "payload truncated: expected {expected_bytes} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > expected_bytes {
        return Err(err(
            offset + expected_bytes,
            format!(
                "{} trailing bytes after the payload",
                payload.len() - expected_bytes
            ),
        ));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")));
    let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };

    let angles = |k: &str| -> Result<Vec<f64>> {
        let e = get(k)?;
        e.value
            .split(',')
            .map(|a| a.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| err(e.offset, format!("malformed angle list `{}`", e.value)))
    };
    let mut best = model.clone();
    for m in [&mut model, &mut best] {
        for p in m.params_mut() {
            let vals = take(p.len());
            p.values_mut().copy_from_slice(&vals);
        }
    }
    model.bank_p.set_angles(&angles("angles.model")?)?;
    best.bank_p.set_angles(&angles("angles.best")?)?;
    let sizes: Vec<usize> = want.iter().map(|d| d.iter().product()).collect();
    let m_moments: Vec<Vec<f32>> = sizes.iter().map(|&n| take(n)).collect();
    let v_moments: Vec<Vec<f32>> = sizes.iter().map(|&n| take(n)).collect();
    let adam = AdamState {
        step: adam_step,
        m: m_moments,
        v: v_moments,
    };
    Ok(Checkpoint {
        cfg,
        state,
        model,
        best,
        adam,
    })
}
