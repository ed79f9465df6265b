//! Binary checkpoints: `FLAB` magic, u32 version, u32 header length, a JSON
//! header (metadata, array names and shapes), then the arrays as
//! little-endian `f64` in header order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::consmac::{CommMode, ConsMacPolicy, NetConfig};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::mappo::{TeacherModel, ValueNorm};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"FLAB";
pub const VERSION: u32 = 1;

/// What a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointTag {
    /// Per-size teacher for `n` agents.
    Teacher { n: usize },
    Student,
}

impl std::fmt::Display for CheckpointTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointTag::Teacher { n } => write!(f, "teacher n={n}"),
            CheckpointTag::Student => f.write_str("student"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub tag: CheckpointTag,
    pub seed: u64,
    pub config_hash: String,
    pub created: String,
    pub mode: CommMode,
    pub net: NetConfig,
    pub env: EnvConfig,
    pub value_norm: Option<ValueNorm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    arrays: Vec<ArrayHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray>,
}

fn collect(stores: &[&ParamStore]) -> Vec<NamedArray> {
    stores
        .iter()
        .flat_map(|s| s.params())
        .map(|p| NamedArray {
            name: p.name.clone(),
            value: p.value.clone(),
        })
        .collect()
}

impl Checkpoint {
    pub fn from_teacher(model: &TeacherModel, mut meta: CheckpointMeta) -> Self {
        meta.value_norm = Some(model.value_norm);
        meta.net = model.policy.net.clone();
        Self {
            arrays: collect(&[&model.policy.pe.store, &model.policy.ce.store, &model.critic.store]),
            meta,
        }
    }

    pub fn from_student(policy: &ConsMacPolicy, mut meta: CheckpointMeta) -> Self {
        meta.tag = CheckpointTag::Student;
        meta.value_norm = None;
        meta.net = policy.net.clone();
        Self {
            arrays: collect(&[&policy.pe.store, &policy.ce.store]),
            meta,
        }
    }

    fn fill(&self, stores: &mut [&mut ParamStore]) -> Result<()> {
        let expected: usize = stores.iter().map(|s| s.len()).sum();
        if expected != self.arrays.len() {
            return Err(Error::Corrupt {
                path: Default::default(),
                reason: format!("{} arrays for a model with {expected} parameters", self.arrays.len()),
            });
        }
        let mut it = self.arrays.iter();
        for store in stores.iter_mut() {
            for p in store.params_mut() {
                let a = it.next().expect("counted above");
                if a.name != p.name {
                    return Err(Error::Corrupt {
                        path: Default::default(),
                        reason: format!("expected array {:?}, found {:?}", p.name, a.name),
                    });
                }
                if a.value.dim() != p.value.dim() {
                    return Err(Error::CheckpointShape {
                        name: a.name.clone(),
                        found: a.value.shape().to_vec(),
                        expected: p.value.shape().to_vec(),
                    });
                }
                p.value.assign(&a.value);
            }
        }
        Ok(())
    }

    pub fn to_teacher(&self) -> Result<TeacherModel> {
        let mut m = TeacherModel::new(&self.meta.net, self.meta.env.u_range, self.meta.seed)?;
        self.fill(&mut [&mut m.policy.pe.store, &mut m.policy.ce.store, &mut m.critic.store])?;
        m.value_norm = self.meta.value_norm.unwrap_or_default();
        Ok(m)
    }

    pub fn to_policy(&self) -> Result<ConsMacPolicy> {
        let mut p = ConsMacPolicy::new(&self.meta.net, self.meta.env.u_range, self.meta.seed)?;
        match self.meta.tag {
            CheckpointTag::Student => self.fill(&mut [&mut p.pe.store, &mut p.ce.store])?,
            CheckpointTag::Teacher { .. } => {
                let t = self.to_teacher()?;
                p = t.policy;
            }
        }
        Ok(p)
    }

    /// Rejects a checkpoint whose tag differs from `expected` unless `force`.
    pub fn require_tag(&self, expected: CheckpointTag, force: bool) -> Result<()> {
        if self.meta.tag != expected && !force {
            return Err(Error::CheckpointTag {
                found: self.meta.tag.to_string(),
                expected: expected.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayHeader {
                    name: a.name.clone(),
                    shape: a.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.arrays.iter().map(|a| a.value.len()).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in a.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing FLAB magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(&format!("header: {e}")))?;
        let mut offset = 12 + hlen;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in header.arrays {
            let [r, c] = a.shape[..] else {
                return Err(corrupt(&format!("array {} is not two-dimensional", a.name)));
            };
            let n = r.checked_mul(c).ok_or_else(|| corrupt("shape overflow"))?;
            let end = offset
                .checked_add(n * 8)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| corrupt("truncated payload"))?;
            let values = bytes[offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            offset = end;
            arrays.push(NamedArray {
                name: a.name,
                value: Array2::from_shape_vec((r, c), values).expect("length checked"),
            });
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
