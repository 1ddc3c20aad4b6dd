//! Binary checkpoint file.
//!
//! ```text
//! "MMN1"  u32 version = 1
//! u32 count, then per tensor: u16 name length, UTF-8 name, u8 rank,
//!     rank × u32 dims, f32 values
//! optimizer section: same tensor encoding
//! 4 × u64 RNG state words
//! u32 length + UTF-8 config echo ("key=value" lines)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::heads::CfConfig;
use crate::network::{Model, ModelConfig};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"MMN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet<f32>,
    /// Momentum buffers, aligned with `params`.
    pub velocity: ParamSet<f32>,
    pub rng_state: [u64; 4],
    /// Model layout, training progress and run settings as text.
    pub echo: IndexMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: &Model<f32>, velocity: ParamSet<f32>, rng_state: [u64; 4]) -> Self {
        Self {
            params: model.params.clone(),
            velocity,
            rng_state,
            echo: model_echo(&model.config),
        }
    }

    /// Rebuilds the model and checks the stored inventory against it.
    pub fn model(&self) -> Result<Model<f32>> {
        let config = parse_model_echo(&self.echo)?;
        let fresh = crate::network::build_model::<f32>(&config, 0)?;
        let want: Vec<(&str, [usize; 4])> = fresh.params.iter().map(|(n, t)| (n, t.dims())).collect();
        let have: Vec<(&str, [usize; 4])> = self.params.iter().map(|(n, t)| (n, t.dims())).collect();
        if want != have {
            return Err(Error::Checkpoint {
                offset: 0,
                detail: "tensor inventory does not match the echoed model layout".into(),
            });
        }
        Ok(Model {
            config,
            params: self.params.clone(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.echo.get("epoch").and_then(|v| v.parse().ok()).unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_tensors(&mut out, &self.params);
        write_tensors(&mut out, &self.velocity);
        for w in self.rng_state {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let echo: String = self.echo.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        out.extend_from_slice(echo.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.error(0, format!("bad magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error(4, format!("unsupported version {version}")));
        }
        let params = read_tensors(&mut r)?;
        let velocity = read_tensors(&mut r)?;
        let mut rng_state = [0u64; 4];
        for w in rng_state.iter_mut() {
            *w = u64::from_le_bytes(r.take(8, "rng state")?.try_into().expect("8 bytes"));
        }
        let len = r.u32("config echo length")? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len, "config echo")?)
            .map_err(|e| r.error(at, format!("config echo is not UTF-8: {e}")))?;
        let mut echo = IndexMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.error(at, format!("config echo line {line:?}")))?;
            echo.insert(k.to_string(), v.to_string());
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            params,
            velocity,
            rng_state,
            echo,
        })
    }
}

fn write_tensors(out: &mut Vec<u8>, set: &ParamSet<f32>) {
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, t) in set.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(4);
        for d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, detail: String) -> Error {
        Error::Checkpoint { offset, detail }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos,
                format!("truncated while reading {what} (need {n} bytes, {} left)", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn read_tensors(r: &mut Reader<'_>) -> Result<ParamSet<f32>> {
    let count = r.u32("tensor count")?;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let at = r.pos;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|e| r.error(at, format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        if rank > 4 {
            return Err(r.error(at, format!("{name}: rank {rank} above 4")));
        }
        let mut dims = [1usize; 4];
        for k in 0..rank {
            dims[4 - rank + k] = r.u32("dims")? as usize;
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(dims, data)?;
        set.insert(name.clone(), t)
            .map_err(|_| r.error(at, format!("duplicate tensor {name}")))?;
    }
    Ok(set)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    // write-then-rename so readers never see a partial file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Text form of a model layout.
pub fn model_echo(cfg: &ModelConfig) -> IndexMap<String, String> {
    let mut m = IndexMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("preset", cfg.backbone.preset.clone());
    put("exemplar_size", cfg.backbone.exemplar_size.to_string());
    put("search_size", cfg.backbone.search_size.to_string());
    put("num_classes", cfg.num_classes.to_string());
    put("cf_lambda", cfg.cf.lambda.to_string());
    put("cf_sigma", cfg.cf.sigma_frac.to_string());
    put("cf_window", cfg.cf.window.to_string());
    put("label_radius", cfg.label_radius.to_string());
    put("pos_weight_share", cfg.pos_weight_share.to_string());
    m
}

pub fn parse_model_echo(echo: &IndexMap<String, String>) -> Result<ModelConfig> {
    fn get<T: std::str::FromStr>(echo: &IndexMap<String, String>, k: &str) -> Result<T> {
        let v = echo.get(k).ok_or_else(|| Error::Checkpoint {
            offset: 0,
            detail: format!("config echo lacks {k}"),
        })?;
        v.parse().map_err(|_| Error::Checkpoint {
            offset: 0,
            detail: format!("config echo {k}={v} does not parse"),
        })
    }
    let mut backbone = BackboneConfig::preset(&get::<String>(echo, "preset")?)?;
    backbone.exemplar_size = get(echo, "exemplar_size")?;
    backbone.search_size = get(echo, "search_size")?;
    Ok(ModelConfig {
        backbone,
        cf: CfConfig {
            lambda: get(echo, "cf_lambda")?,
            sigma_frac: get(echo, "cf_sigma")?,
            window: get(echo, "cf_window")?,
        },
        num_classes: get(echo, "num_classes")?,
        label_radius: get(echo, "label_radius")?,
        pos_weight_share: get(echo, "pos_weight_share")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_model;

    fn sample() -> Checkpoint {
        let m = build_model::<f32>(&ModelConfig::default(), 1).unwrap();
        let mut ck = Checkpoint::new(&m, m.params.zeros_like(), [1, 2, 3, u64::MAX]);
        ck.echo.insert("epoch".into(), "3".into());
        ck
    }

    #[test]
    fn round_trip_bytes() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.epoch(), 3);
        let model = back.model().unwrap();
        assert_eq!(model.params.names().collect::<Vec<_>>(), ck.params.names().collect::<Vec<_>>());
    }

    #[test]
    fn save_load_save_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.mmn"), dir.path().join("b.mmn"));
        save_checkpoint(&sample(), &a).unwrap();
        save_checkpoint(&load_checkpoint(&a).unwrap(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert!(!a.with_extension("tmp").exists());
    }

    #[test]
    fn corrupt_header_and_truncation() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[1] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint { offset: 0, .. })));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad_version), Err(Error::Checkpoint { offset: 4, .. })));
        let cut = &bytes[..bytes.len() / 2];
        match Checkpoint::from_bytes(cut) {
            Err(Error::Checkpoint { offset, detail }) => {
                assert!(offset <= cut.len());
                assert!(detail.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }
}
