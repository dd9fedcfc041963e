//! Binary checkpoints and JSON run manifests.
//!
//! Checkpoint layout, little-endian: magic `AVSKCKPT`, version u32, 32-byte
//! config hash, step u64, Adam update count u64, entry count u32, then per
//! entry a u32-length UTF-8 name, u32 rank, u64 extents and f32 values.
//! Optimizer moments are stored as `opt.m/<name>` and `opt.v/<name>`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Params;
use crate::tensor::{DType, Tensor};
use crate::train::Adam;

pub const MAGIC: &[u8; 8] = b"AVSKCKPT";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "opt.m/";
const V_PREFIX: &str = "opt.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub params: Params,
    pub opt: Option<Adam>,
}

fn hash_bytes(cfg: &ModelConfig) -> Result<[u8; 32]> {
    let h = hex::decode(cfg.hash()?).map_err(|e| Error::Format(e.to_string()))?;
    h.try_into().map_err(|_| Error::Format("config hash must be 32 bytes".into()))
}

impl Checkpoint {
    pub fn new(model: &Model, opt: Option<&Adam>, step: u64) -> Result<Self> {
        Ok(Checkpoint { config_hash: hash_bytes(&model.cfg)?, step, params: model.params.clone(), opt: opt.cloned() })
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.config_hash)
    }

    /// Fails with a state error unless `cfg` hashes to the embedded value.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let want = hash_bytes(cfg)?;
        if want != self.config_hash {
            return Err(Error::State(format!(
                "checkpoint was written for config {} but config hashes to {}",
                self.hash_hex(),
                hex::encode(want)
            )));
        }
        Ok(())
    }

    pub fn into_model(self, cfg: ModelConfig) -> Result<Model> {
        self.check_config(&cfg)?;
        Model::with_params(cfg, self.params)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut entries: Vec<(String, &Tensor)> = self.params.iter().map(|(k, t)| (k.clone(), t)).collect();
        if let Some(opt) = &self.opt {
            entries.extend(opt.m.iter().map(|(k, t)| (format!("{M_PREFIX}{k}"), t)));
            entries.extend(opt.v.iter().map(|(k, t)| (format!("{V_PREFIX}{k}"), t)));
        }
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_all(&self.config_hash)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u64::<LittleEndian>(self.opt.as_ref().map_or(0, |o| o.t as u64))?;
        w.write_u32::<LittleEndian>(entries.len() as u32)?;
        for (name, t) in entries {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &x in t.data() {
                w.write_f32::<LittleEndian>(x as f32)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an AVSKCKPT checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let step = r.read_u64::<LittleEndian>()?;
        let opt_t = r.read_u64::<LittleEndian>()? as usize;
        let n = r.read_u32::<LittleEndian>()?;
        let (mut params, mut m, mut v) = (Params::new(), BTreeMap::new(), BTreeMap::new());
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..rank).map(|_| Ok(r.read_u64::<LittleEndian>()? as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| Ok(f64::from(r.read_f32::<LittleEndian>()?))).collect::<Result<Vec<_>>>()?;
            let t = Tensor::with_dtype(&shape, data, DType::F32)?;
            if let Some(k) = name.strip_prefix(M_PREFIX) {
                m.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(V_PREFIX) {
                v.insert(k.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes after last checkpoint entry".into()));
        }
        let opt = if m.is_empty() && v.is_empty() {
            None
        } else {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(Error::Format("optimizer state does not cover every parameter".into()));
            }
            let (mut pm, mut pv) = (Params::new(), Params::new());
            m.into_iter().for_each(|(k, t)| pm.insert(k, t));
            v.into_iter().for_each(|(k, t)| pv.insert(k, t));
            Some(Adam { m: pm, v: pv, t: opt_t })
        };
        Ok(Checkpoint { config_hash, step, params, opt })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Record of one CLI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
    pub metrics: BTreeMap<String, f64>,
    pub artifacts: BTreeMap<String, String>,
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// `v<crate version>`, plus the commit when the build recorded one.
pub fn version_string() -> String {
    match option_env!("AVSK_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => d.to_string(),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

impl RunManifest {
    pub fn start(command: &str, config_hash: String) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash,
            version: version_string(),
            started_at: now_unix(),
            finished_at: 0,
            metrics: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn finish(&mut self) {
        self.finished_at = now_unix();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig::from_json(include_str!("../../../presets/vsr-desk.json")).unwrap()
    }

    #[test]
    fn round_trip_with_optimizer() {
        let c = cfg();
        let model = Model::new(c.clone()).unwrap();
        let mut opt = Adam::new(&model.params).unwrap();
        opt.t = 7;
        opt.m.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.25));
        let ck = Checkpoint::new(&model, Some(&opt), 7).unwrap();
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = Checkpoint::read(&buf[..]).unwrap();
        assert_eq!(back.step, 7);
        assert_eq!(back.opt.as_ref().unwrap().t, 7);
        assert_eq!(back.params, model.params);
        back.check_config(&c).unwrap();
        let mut other = c.clone();
        other.seed += 1;
        assert!(matches!(back.check_config(&other), Err(Error::State(_))));
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::new(cfg()).unwrap();
        let mut buf = Vec::new();
        Checkpoint::new(&model, None, 0).unwrap().write(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read(&bad[..]), Err(Error::Format(_))));
        buf.push(0);
        assert!(matches!(Checkpoint::read(&buf[..]), Err(Error::Format(_))));
    }
}
