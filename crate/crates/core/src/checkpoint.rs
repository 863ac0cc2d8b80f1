//! Binary checkpoints: a versioned header, the run configuration text,
//! `key=value` metadata and named little-endian f64 blocks.
//!
//! Layout:
//! ```text
//! magic "CATTECKP" | version u32 | config (u64 len + UTF-8) | meta (u64 len + UTF-8)
//! | block count u64 | per block: name (u32 len + UTF-8), rows u64, cols u64, rows·cols f64
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::{CatteModel, Fitted};
use crate::odeint::TimeGrid;
use crate::train::Adam;

pub const MAGIC: &[u8; 8] = b"CATTECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub meta: BTreeMap<String, String>,
    pub blocks: Vec<Block>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

// Guards allocations against corrupt length fields.
const MAX_LEN: u64 = 1 << 32;

fn read_string(r: &mut impl Read, len: u64) -> Result<String> {
    if len > MAX_LEN {
        return Err(corrupt(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| corrupt("string is not UTF-8"))
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) {
        debug_assert_eq!(rows * cols, data.len());
        self.blocks.push(Block {
            name: name.into(),
            rows,
            cols,
            data,
        });
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| corrupt(format!("missing block '{name}'")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| corrupt(format!("missing metadata '{key}'")))
    }

    fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse().map_err(|_| corrupt(format!("bad metadata {key} = {v}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.config.len() as u64).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(corrupt(format!("metadata entry '{k}' cannot be encoded")));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(self.blocks.len() as u64).to_le_bytes())?;
        for b in &self.blocks {
            w.write_all(&(b.name.len() as u32).to_le_bytes())?;
            w.write_all(b.name.as_bytes())?;
            w.write_all(&(b.rows as u64).to_le_bytes())?;
            w.write_all(&(b.cols as u64).to_le_bytes())?;
            for x in &b.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version} (expected {VERSION})")));
        }
        let len = read_u64(r)?;
        let config = read_string(r, len)?;
        let len = read_u64(r)?;
        let mut meta = BTreeMap::new();
        for line in read_string(r, len)?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt(format!("bad metadata line '{line}'")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = read_u64(r)?;
        if count > MAX_LEN {
            return Err(corrupt(format!("implausible block count {count}")));
        }
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = read_u32(r)?;
            let name = read_string(r, len as u64)?;
            let rows = read_u64(r)?;
            let cols = read_u64(r)?;
            let n = rows
                .checked_mul(cols)
                .filter(|&n| n <= MAX_LEN)
                .ok_or_else(|| corrupt(format!("block '{name}' has implausible shape {rows}x{cols}")))?;
            let mut raw = vec![0u8; n as usize * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            blocks.push(Block {
                name,
                rows: rows as usize,
                cols: cols as usize,
                data,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(corrupt("trailing bytes after the last block"));
        }
        Ok(Self { config, meta, blocks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// A model plus the optimizer state needed to resume training.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub config: RunConfig,
    pub model: CatteModel,
    pub adam: Option<Adam>,
    /// Epochs completed.
    pub epoch: usize,
}

impl Snapshot {
    /// Encodes the snapshot; `version` is recorded as metadata only.
    pub fn to_checkpoint(&self, version: &str) -> Result<Checkpoint> {
        let m = &self.model;
        let fit = m.fitted()?;
        if self.config.rank != m.rank() {
            return Err(Error::Config(format!(
                "config rank {} does not match model rank {}",
                self.config.rank,
                m.rank()
            )));
        }
        let mut ck = Checkpoint {
            config: self.config.to_string(),
            ..Checkpoint::default()
        };
        ck.meta.insert("version".into(), version.into());
        ck.meta.insert("epoch".into(), self.epoch.to_string());
        ck.meta.insert("modes".into(), m.num_modes().to_string());
        ck.meta.insert("method".into(), fit.method.to_string());
        ck.push("fit.step", 1, 1, vec![fit.grid.step()]);
        ck.push("fit.times", 1, fit.grid.len(), fit.grid.times().to_vec());
        for (k, t) in fit.index_tables.iter().enumerate() {
            ck.push(format!("fit.index.{k}"), 1, t.len(), t.clone());
        }
        let norm = &fit.normalization;
        ck.push("norm.index_min", 1, norm.modes(), norm.index_min.clone());
        ck.push("norm.index_max", 1, norm.modes(), norm.index_max.clone());
        ck.push("norm.time", 1, 2, vec![norm.time_min, norm.time_max]);
        for (_, p) in m.store.iter() {
            ck.push(format!("param.{}", p.name), p.rows, p.cols, p.data.clone());
        }
        if let Some(adam) = &self.adam {
            ck.meta.insert("adam.step".into(), adam.step.to_string());
            for (i, (_, p)) in m.store.iter().enumerate() {
                ck.push(format!("adam.m.{}", p.name), p.rows, p.cols, adam.m[i].clone());
                ck.push(format!("adam.v.{}", p.name), p.rows, p.cols, adam.v[i].clone());
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse(&ck.config)?;
        let modes: usize = ck.meta_parse("modes")?;
        let epoch: usize = ck.meta_parse("epoch")?;
        let method = ck.meta_parse("method")?;
        let mut model = CatteModel::new(config.model_config(modes)?)?;
        let ids: Vec<_> = model.store.ids().collect();
        for &id in &ids {
            let p = model.store.get_mut(id);
            let b = ck.block(&format!("param.{}", p.name))?;
            if (b.rows, b.cols) != (p.rows, p.cols) {
                return Err(corrupt(format!(
                    "parameter '{}' is {}x{} in the checkpoint, model expects {}x{}",
                    p.name, b.rows, b.cols, p.rows, p.cols
                )));
            }
            p.data.clone_from(&b.data);
        }
        let params = ck.blocks.iter().filter(|b| b.name.starts_with("param.")).count();
        if params != ids.len() {
            return Err(corrupt(format!("checkpoint has {params} parameters, model has {}", ids.len())));
        }
        let step = ck.block("fit.step")?.data[0];
        let grid = TimeGrid::new(&ck.block("fit.times")?.data, step)?;
        let index_tables = (0..modes)
            .map(|k| Ok(ck.block(&format!("fit.index.{k}"))?.data.clone()))
            .collect::<Result<Vec<_>>>()?;
        let time = &ck.block("norm.time")?.data;
        if time.len() != 2 {
            return Err(corrupt("norm.time must hold two values"));
        }
        let normalization = Normalization {
            index_min: ck.block("norm.index_min")?.data.clone(),
            index_max: ck.block("norm.index_max")?.data.clone(),
            time_min: time[0],
            time_max: time[1],
        };
        if normalization.index_min.len() != modes || normalization.index_max.len() != modes {
            return Err(corrupt("normalization does not match the number of modes"));
        }
        model.fitted = Some(Fitted {
            method,
            grid,
            index_tables,
            normalization,
        });
        let adam = match ck.meta.get("adam.step") {
            None => None,
            Some(s) => {
                let mut adam = Adam::new(&model.store, config.lr);
                adam.step = s.parse().map_err(|_| corrupt(format!("bad adam.step {s}")))?;
                for (i, (_, p)) in model.store.iter().enumerate() {
                    adam.m[i].clone_from(&ck.block(&format!("adam.m.{}", p.name))?.data);
                    adam.v[i].clone_from(&ck.block(&format!("adam.v.{}", p.name))?.data);
                    if adam.m[i].len() != p.data.len() || adam.v[i].len() != p.data.len() {
                        return Err(corrupt(format!("optimizer state for '{}' has the wrong size", p.name)));
                    }
                }
                Some(adam)
            }
        };
        Ok(Self {
            config,
            model,
            adam,
            epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, version: &str) -> Result<()> {
        self.to_checkpoint(version)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::train::{Trainer, TrainConfig};

    fn tiny() -> (RunConfig, crate::data::ObservationSet) {
        let mut cfg = RunConfig::default();
        cfg.apply(&[
            "rank=2",
            "latent_dim=3",
            "fourier_dim=3",
            "encoder_hidden=4",
            "dynamics_hidden=4",
            "decoder_hidden=4",
            "epochs=3",
            "method=euler",
        ])
        .unwrap();
        let s = gen_synthetic(&SynthConfig {
            n1: 3,
            n2: 3,
            nt: 4,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        (cfg, s.noisy)
    }

    #[test]
    fn container_round_trip() {
        let mut ck = Checkpoint {
            config: "rank = 2\n".into(),
            ..Checkpoint::default()
        };
        ck.meta.insert("epoch".into(), "7".into());
        ck.push("a", 2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]);
        ck.push("empty", 0, 3, vec![]);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), VERSION);
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.block("a").unwrap().data[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_corrupt_input() {
        let mut ck = Checkpoint::default();
        ck.push("a", 1, 1, vec![1.0]);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[8] = 99;
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
        assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(Checkpoint::read_from(&mut long.as_slice()).is_err());
        assert!(ck.block("b").is_err());
    }

    #[test]
    fn snapshot_round_trip_resumes_bit_for_bit() {
        let (cfg, data) = tiny();
        let model = CatteModel::new(cfg.model_config(2).unwrap()).unwrap();
        let mut t = Trainer::new(model, &data, cfg.train_config()).unwrap();
        t.run(&data, |_, _| Ok(())).unwrap();
        let snap = Snapshot {
            config: cfg.clone(),
            model: t.model.clone(),
            adam: Some(t.adam.clone()),
            epoch: t.epoch,
        };
        let mut buf = Vec::new();
        snap.to_checkpoint("test").unwrap().write_to(&mut buf).unwrap();
        let back = Snapshot::from_checkpoint(&Checkpoint::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.model.store, t.model.store);
        assert_eq!(back.model.fitted, t.model.fitted);
        assert_eq!(back.adam.as_ref().unwrap(), &t.adam);

        // continuing from the restored state matches continuing in memory
        let more = TrainConfig {
            epochs: 2,
            ..cfg.train_config()
        };
        let mut a = Trainer::resume(t.model, t.adam, t.epoch, more.clone()).unwrap();
        let mut b = Trainer::resume(back.model, back.adam.unwrap(), back.epoch, more).unwrap();
        a.run(&data, |_, _| Ok(())).unwrap();
        b.run(&data, |_, _| Ok(())).unwrap();
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.epoch, 5);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn snapshot_checks_shapes() {
        let (cfg, data) = tiny();
        let mut model = CatteModel::new(cfg.model_config(2).unwrap()).unwrap();
        model.fit_layout(&data, crate::odeint::Method::Euler, None).unwrap();
        let snap = Snapshot {
            config: cfg.clone(),
            model,
            adam: None,
            epoch: 0,
        };
        let mut ck = snap.to_checkpoint("test").unwrap();
        assert!(Snapshot::from_checkpoint(&ck).unwrap().adam.is_none());
        let mut wrong = cfg;
        wrong.rank = 3;
        ck.config = wrong.to_string();
        assert!(Snapshot::from_checkpoint(&ck).is_err());
    }
}
