//! Checkpoint container: a magic line, a length-prefixed JSON header with a
//! tensor manifest, then little-endian f64 payloads.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use denoise_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::{RunConfig, TrainError};
use crate::model::{GNSConfig, InitScheme, ParamStore};

const MAGIC: &str = "DENOISE-CKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Position in the deterministic sample stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub epoch: u64,
    /// Next position in the epoch's shuffled order.
    pub cursor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: GNSConfig,
    pub step: u64,
    pub stream: StreamState,
    pub params: ParamStore,
    pub ema: ParamStore,
    /// EMA snapshot with the best validation score so far.
    pub best: Option<ParamStore>,
    pub best_val: Option<f64>,
    pub bad_evals: usize,
    pub adam: AdamState,
    /// Mean and standard deviation used to standardize the target.
    pub target_norm: Option<(f64, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    scheme: Option<InitScheme>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_fingerprint: String,
    config: String,
    model: GNSConfig,
    step: u64,
    stream: StreamState,
    best_val: Option<f64>,
    bad_evals: usize,
    adam_t: u64,
    target_norm: Option<(f64, f64)>,
    manifest: Vec<Entry>,
}

fn format_err(m: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(m.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |group: &str, name: &str, shape: Vec<usize>, data: &[f64], scheme: Option<InitScheme>| {
            manifest.push(Entry {
                group: group.into(),
                name: name.into(),
                dtype: "f64".into(),
                shape,
                offset: payload.len(),
                scheme,
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        let mut stores = vec![("params", &self.params), ("ema", &self.ema)];
        if let Some(b) = &self.best {
            stores.push(("best", b));
        }
        for (group, store) in stores {
            for (name, t) in store.iter() {
                push(group, name, t.shape().to_vec(), t.data(), store.scheme(name));
            }
        }
        for (group, map) in [("adam_m", &self.adam.m), ("adam_v", &self.adam.v)] {
            for (name, v) in map {
                push(group, name, vec![v.len()], v, None);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config_fingerprint: self.config.fingerprint(),
            config: self.config.to_text(),
            model: self.model.clone(),
            step: self.step,
            stream: self.stream,
            best_val: self.best_val,
            bad_evals: self.bad_evals,
            adam_t: self.adam.t,
            target_norm: self.target_norm,
            manifest,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = format!("{MAGIC}\n{}\n", json.len()).into_bytes();
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let magic = lines.next().unwrap_or_default();
        if magic != MAGIC.as_bytes() {
            return Err(format_err("not a checkpoint file (bad magic line)"));
        }
        let len: usize = std::str::from_utf8(lines.next().unwrap_or_default())
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| format_err("bad header length"))?;
        let rest = lines.next().unwrap_or_default();
        if rest.len() < len {
            return Err(format_err("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&rest[..len]).map_err(|e| format_err(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported format version {}", header.format_version)));
        }
        let config = RunConfig::from_text(&header.config).map_err(|e| format_err(e.to_string()))?;
        if config.fingerprint() != header.config_fingerprint {
            return Err(format_err("config fingerprint does not match the stored config"));
        }
        let payload = &rest[len..];
        let mut groups: BTreeMap<String, ParamStore> = BTreeMap::new();
        let mut adam = AdamState {
            t: header.adam_t,
            ..Default::default()
        };
        for e in header.manifest {
            if e.dtype != "f64" {
                return Err(format_err(format!("unsupported dtype {} for {}", e.dtype, e.name)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + 8 * n;
            let raw = payload
                .get(e.offset..end)
                .ok_or_else(|| format_err(format!("payload too short for {}/{}", e.group, e.name)))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            match e.group.as_str() {
                "adam_m" => {
                    adam.m.insert(e.name, data);
                }
                "adam_v" => {
                    adam.v.insert(e.name, data);
                }
                "params" | "ema" | "best" => {
                    let t = Tensor::new(e.shape, data).map_err(|err| format_err(err.to_string()))?;
                    groups
                        .entry(e.group)
                        .or_default()
                        .insert(e.name, t, e.scheme.unwrap_or(InitScheme::Zeros));
                }
                other => return Err(format_err(format!("unknown tensor group '{other}'"))),
            }
        }
        let params = groups.remove("params").ok_or_else(|| format_err("no parameters"))?;
        let ema = groups.remove("ema").ok_or_else(|| format_err("no EMA parameters"))?;
        ema.check_layout(&params).map_err(|e| format_err(e.to_string()))?;
        Ok(Self {
            config,
            model: header.model,
            step: header.step,
            stream: header.stream,
            params,
            ema,
            best: groups.remove("best"),
            best_val: header.best_val,
            bad_evals: header.bad_evals,
            adam,
            target_norm: header.target_norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let io = |e: std::io::Error| TrainError::Io(format!("{}: {e}", path.display()));
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let io = |e: std::io::Error| TrainError::Io(format!("{}: {e}", path.display()));
        let mut bytes = Vec::new();
        std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        Self::from_bytes(&bytes)
    }

    /// Parameters to evaluate with: the best snapshot, else the EMA shadow.
    pub fn eval_params(&self) -> &ParamStore {
        self.best.as_ref().unwrap_or(&self.ema)
    }
}
