//! Checkpoints: one file per level, `DIR/level_<s>.ckpt`.
//!
//! Each file is a UTF-8 manifest of `key = value` lines ending with a line
//! `end`, followed by the MRTF blobs listed by its `tensor = NAME` lines, in
//! order. Floats whose exact value matters for resuming are stored as the hex
//! of their bit pattern.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::train::{Adam, EpochLog, TrainState};
use super::MrcnfModel;
use crate::cnf::CnfBlock;
use crate::dataio::Config;
use crate::error::{Error, Result};
use crate::tensor::{AnyTensor, Tensor};

pub const FORMAT: &str = "mrflow-checkpoint";
pub const VERSION: u32 = 1;
pub const TRAIN_LOG: &str = "train_log.csv";

pub fn level_path(dir: &Path, level: usize) -> PathBuf {
    dir.join(format!("level_{level}.ckpt"))
}

fn bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unbits(s: &str, offset: u64) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::format(offset, format!("bad float bits `{s}`")))
}

fn shape_text(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Serialized level checkpoint.
pub fn encode_level(model: &MrcnfModel, level: usize, state: &TrainState) -> Result<Vec<u8>> {
    encode_block(&model.config, model.layout.image_shape, level, model.block(level)?, state)
}

/// As [`encode_level`], from the parts (lets levels train without sharing the model).
pub fn encode_block(config: &Config, image_shape: [usize; 3], level: usize, block: &CnfBlock, state: &TrainState) -> Result<Vec<u8>> {
    let names = block.net.param_names();
    let mut m = String::new();
    let _ = writeln!(m, "format = {FORMAT}");
    let _ = writeln!(m, "version = {VERSION}");
    let _ = writeln!(m, "level = {level}");
    let _ = writeln!(m, "image_shape = {}", shape_text(&image_shape));
    let _ = writeln!(m, "state_shape = {}", shape_text(&block.state_shape));
    let _ = writeln!(
        m,
        "cond_shape = {}",
        block.cond_shape.map_or("none".to_string(), |c| shape_text(&c))
    );
    for line in config.to_text().lines() {
        let _ = writeln!(m, "config.{line}");
    }
    let _ = writeln!(m, "epoch = {}", state.epoch);
    let _ = writeln!(m, "lr = {}", bits(state.lr));
    let _ = writeln!(m, "best_loss = {}", bits(state.best_loss));
    let _ = writeln!(m, "bad_epochs = {}", state.bad_epochs);
    let _ = writeln!(m, "adam_t = {}", state.adam.t);
    for h in &state.history {
        let f: Vec<String> = h.to_fields().iter().map(|&v| bits(v)).collect();
        let _ = writeln!(m, "log = {},{}", h.epoch, f.join(","));
    }
    let mut blobs: Vec<(String, &Tensor)> = Vec::new();
    for (n, p) in names.iter().zip(block.net.params()) {
        blobs.push((n.clone(), p));
    }
    for (n, p) in names.iter().zip(&state.adam.m) {
        blobs.push((format!("adam.m.{n}"), p));
    }
    for (n, p) in names.iter().zip(&state.adam.v) {
        blobs.push((format!("adam.v.{n}"), p));
    }
    for (n, _) in &blobs {
        let _ = writeln!(m, "tensor = {n}");
    }
    m.push_str("end\n");
    let mut out = m.into_bytes();
    for (_, t) in blobs {
        out.extend(AnyTensor::F64(t.clone()).encode()?);
    }
    Ok(out)
}

/// A decoded level file.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelCheckpoint {
    pub level: usize,
    pub image_shape: [usize; 3],
    pub config: Config,
    pub params: Vec<Tensor>,
    pub state: TrainState,
}

struct Manifest<'a> {
    entries: Vec<(&'a str, &'a str, u64)>,
}

impl<'a> Manifest<'a> {
    fn one(&self, key: &str) -> Result<(&'a str, u64)> {
        self.entries
            .iter()
            .find(|(k, _, _)| *k == key)
            .map(|&(_, v, o)| (v, o))
            .ok_or_else(|| Error::format(0, format!("checkpoint manifest lacks `{key}`")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (v, o) = self.one(key)?;
        v.parse().map_err(|_| Error::format(o, format!("bad value for `{key}`: `{v}`")))
    }

    fn all(&self, key: &str) -> impl Iterator<Item = (&'a str, u64)> + '_ {
        let key = key.to_string();
        self.entries.iter().filter(move |(k, _, _)| *k == key).map(|&(_, v, o)| (v, o))
    }
}

fn parse_shape(v: &str, o: u64) -> Result<[usize; 3]> {
    let dims: Vec<usize> = v
        .split(',')
        .map(|d| d.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(o, format!("bad shape `{v}`")))?;
    dims.try_into().map_err(|_| Error::format(o, format!("shape `{v}` is not 3-D")))
}

pub fn decode_level(bytes: &[u8]) -> Result<LevelCheckpoint> {
    // manifest
    let mut entries = Vec::new();
    let mut pos = 0usize;
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(bytes.len() as u64, "checkpoint manifest is not terminated by `end`"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::format(pos as u64, "manifest is not UTF-8"))?;
        let offset = pos as u64;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::format(offset, format!("malformed manifest line `{line}`")))?;
        entries.push((k, v, offset));
    }
    let man = Manifest { entries };
    let (fmt, o) = man.one("format")?;
    if fmt != FORMAT {
        return Err(Error::format(o, format!("not a checkpoint (format `{fmt}`)")));
    }
    let version: u32 = man.num("version")?;
    if version != VERSION {
        let (_, o) = man.one("version")?;
        return Err(Error::format(o, format!("unsupported checkpoint version {version}")));
    }
    let config_text: String = man
        .entries
        .iter()
        .filter_map(|(k, v, _)| k.strip_prefix("config.").map(|k| format!("{k} = {v}\n")))
        .collect();
    let config = Config::parse(&config_text)?;
    let (shape_v, shape_o) = man.one("image_shape")?;
    let image_shape = parse_shape(shape_v, shape_o)?;
    let (lr, lr_o) = man.one("lr")?;
    let (best, best_o) = man.one("best_loss")?;
    let mut history = Vec::new();
    let level: usize = man.num("level")?;
    for (v, o) in man.all("log") {
        let parts: Vec<&str> = v.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::format(o, "log entry needs 6 fields"));
        }
        let epoch = parts[0].parse().map_err(|_| Error::format(o, "bad log epoch"))?;
        let f = parts[1..].iter().map(|p| unbits(p, o)).collect::<Result<Vec<_>>>()?;
        history.push(EpochLog {
            level,
            epoch,
            loss: f[0],
            bpd_contrib: f[1],
            ke: f[2],
            jn: f[3],
            grad_norm: f[4],
        });
    }
    // blobs
    let names: Vec<&str> = man.all("tensor").map(|(v, _)| v).collect();
    let mut tensors = Vec::with_capacity(names.len());
    for name in &names {
        let (t, used) = AnyTensor::decode(&bytes[pos..]).map_err(|e| match e {
            Error::Format { offset, message } => Error::format(pos as u64 + offset, format!("tensor `{name}`: {message}")),
            other => other,
        })?;
        tensors.push(t.into_f64().map_err(|e| Error::format(pos as u64, e.to_string()))?);
        pos += used;
    }
    if pos != bytes.len() {
        return Err(Error::format(pos as u64, "trailing bytes after the last tensor"));
    }
    if tensors.len() % 3 != 0 {
        return Err(Error::format(0, "tensor list must hold parameters and both Adam moments"));
    }
    let k = tensors.len() / 3;
    let v = tensors.split_off(2 * k);
    let m = tensors.split_off(k);
    Ok(LevelCheckpoint {
        level,
        image_shape,
        config,
        params: tensors,
        state: TrainState {
            epoch: man.num("epoch")?,
            lr: unbits(lr, lr_o)?,
            best_loss: unbits(best, best_o)?,
            bad_epochs: man.num("bad_epochs")?,
            adam: Adam {
                m,
                v,
                t: man.num("adam_t")?,
            },
            history,
        },
    })
}

/// Writes `level_<s>.ckpt` via a temporary file and rename.
pub fn save_level(dir: &Path, model: &MrcnfModel, level: usize, state: &TrainState) -> Result<()> {
    write_level(dir, level, &encode_level(model, level, state)?)
}

pub fn write_level(dir: &Path, level: usize, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = level_path(dir, level);
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, &path)?;
    Ok(())
}

pub fn load_level(path: &Path) -> Result<LevelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    decode_level(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Installs a level checkpoint into `model` after checking it belongs there.
pub fn apply_level(model: &mut MrcnfModel, ck: LevelCheckpoint) -> Result<TrainState> {
    model.layout.level_image_shape(ck.level)?;
    let (config, shape) = (model.config.clone(), model.layout.image_shape);
    apply_block(&config, shape, &mut model.blocks[ck.level - 1], ck)
}

/// As [`apply_level`], for a block held apart from its model. The epoch
/// target may differ, so a finished run can be extended.
pub fn apply_block(config: &Config, image_shape: [usize; 3], block: &mut CnfBlock, ck: LevelCheckpoint) -> Result<TrainState> {
    let same = Config {
        epochs: config.epochs,
        ..ck.config.clone()
    } == *config;
    if !same || ck.image_shape != image_shape {
        return Err(Error::Config(format!(
            "level {} checkpoint was written with a different configuration or image shape",
            ck.level
        )));
    }
    block.net.set_params(ck.params)?;
    Ok(ck.state)
}

/// Loads every level of a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<(MrcnfModel, Vec<TrainState>)> {
    let first = load_level(&level_path(dir, 1)).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::Config(format!("no checkpoint found in {}", dir.display()))
        }
        other => other,
    })?;
    let mut model = MrcnfModel::new(&first.config, first.image_shape)?;
    let mut states = vec![apply_level(&mut model, first)?];
    for s in 2..=model.levels() {
        let path = level_path(dir, s);
        if !path.exists() {
            return Err(Error::Config(format!("checkpoint {} is missing level {s}", dir.display())));
        }
        states.push(apply_level(&mut model, load_level(&path)?)?);
    }
    Ok((model, states))
}

/// Rewrites `train_log.csv` from the histories of all level files present.
pub fn write_train_log(dir: &Path, levels: usize) -> Result<()> {
    let mut out = String::from(EpochLog::CSV_HEADER);
    out.push('\n');
    for s in 1..=levels {
        let path = level_path(dir, s);
        if path.exists() {
            for row in load_level(&path)?.state.history {
                out.push_str(&row.csv_row());
                out.push('\n');
            }
        }
    }
    fs::write(dir.join(TRAIN_LOG), out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::rng::seeded;

    #[test]
    fn level_round_trip_is_bit_exact() {
        let cfg = Config {
            levels: 2,
            net_hidden: 3,
            net_blocks: 2,
            lr: 1.0 / 3.0,
            ..Config::default()
        };
        let mut model = MrcnfModel::new(&cfg, [1, 4, 4]).unwrap();
        model.blocks[0].net.randomize_output(0.7, &mut seeded(1));
        let mut st = TrainState::new(&model.blocks[0], cfg.lr);
        st.epoch = 2;
        st.best_loss = 0.1 + 0.2;
        st.adam.t = 17;
        st.adam.m[0].data_mut()[0] = f64::MIN_POSITIVE;
        st.history.push(EpochLog {
            level: 1,
            epoch: 1,
            loss: -1.5,
            bpd_contrib: 1e-300,
            ke: 3.0,
            jn: 0.25,
            grad_norm: 7.0,
        });
        let bytes = encode_level(&model, 1, &st).unwrap();
        let ck = decode_level(&bytes).unwrap();
        assert_eq!(ck.state, st);
        assert_eq!(ck.params, model.blocks[0].net.params());
        let mut fresh = MrcnfModel::new(&cfg, [1, 4, 4]).unwrap();
        apply_level(&mut fresh, ck).unwrap();
        assert_eq!(fresh.blocks[0], model.blocks[0]);
        assert_eq!(encode_level(&fresh, 1, &st).unwrap(), bytes);

        let mut other = cfg.clone();
        other.seed = 5;
        let mut wrong = MrcnfModel::new(&other, [1, 4, 4]).unwrap();
        assert!(apply_level(&mut wrong, decode_level(&bytes).unwrap()).is_err());
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let cfg = Config {
            levels: 1,
            net_hidden: 2,
            net_blocks: 1,
            ..Config::default()
        };
        let model = MrcnfModel::new(&cfg, [1, 2, 2]).unwrap();
        let st = TrainState::new(&model.blocks[0], cfg.lr);
        let bytes = encode_level(&model, 1, &st).unwrap();
        let cut = bytes.len() - 3;
        assert!(matches!(decode_level(&bytes[..cut]), Err(Error::Format { offset, .. }) if offset > 0));
        assert!(matches!(decode_level(b"format = other\nend\n"), Err(Error::Format { .. })));
        assert!(matches!(decode_level(b"format = mrflow-checkpoint\n"), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_level(&extra), Err(Error::Format { offset, .. }) if offset == bytes.len() as u64));
    }
}
