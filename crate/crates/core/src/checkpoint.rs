//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DTLC"  u32 version  u32 tensor count
//! per tensor: u32 name length, UTF-8 name, u32 rank, u64 extent per axis,
//!             f32 values (row-major)
//! u64 metadata length, UTF-8 TOML metadata
//! ```
//!
//! Nothing may follow the metadata block.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::model::{CounterModel, ModelConfig, ParamGroup, PerceptualExtractor};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DTLC";
pub const VERSION: u32 = 1;

/// Training stage a checkpoint was produced by. Stages only move forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Source,
    Surgered,
    SynthFt,
    RealFt,
    JointFt,
    Direct,
}

impl Stage {
    pub fn rank(self) -> u8 {
        match self {
            Stage::Init => 0,
            Stage::Source => 1,
            Stage::Surgered => 2,
            Stage::SynthFt => 3,
            Stage::RealFt | Stage::JointFt | Stage::Direct => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Source => "source",
            Stage::Surgered => "surgered",
            Stage::SynthFt => "synth_ft",
            Stage::RealFt => "real_ft",
            Stage::JointFt => "joint_ft",
            Stage::Direct => "direct",
        }
    }

    /// `Ok` when `next` comes strictly after `self`.
    pub fn advance(self, next: Stage) -> Result<Stage> {
        if next.rank() > self.rank() {
            Ok(next)
        } else {
            Err(Error::StageOrder {
                from: self.name().into(),
                to: next.name().into(),
            })
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One epoch of training as recorded in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub stage: Stage,
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub stage: Stage,
    pub seed: u64,
    /// Seed the next stage derives its randomness from.
    pub rng_state: u64,
    pub config: ModelConfig,
    #[serde(default)]
    pub history: Vec<HistoryRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: Metadata,
}

impl Checkpoint {
    pub fn from_model(
        model: &CounterModel<f32>,
        extractor: Option<&PerceptualExtractor<f32>>,
        meta: Metadata,
    ) -> Self {
        let mut tensors = model.named_tensors();
        if let Some(e) = extractor {
            tensors.extend(e.named_tensors());
        }
        Self { tensors, meta }
    }

    pub fn model(&self) -> Result<CounterModel<f32>> {
        CounterModel::from_named(self.meta.config.clone(), &self.tensors)
    }

    pub fn extractor(&self) -> Result<Option<PerceptualExtractor<f32>>> {
        PerceptualExtractor::from_named(&self.tensors)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Every tensor belongs to one of the four model groups or to the
    /// frozen extractor, and names are unique.
    pub fn check_partition(&self) -> Result<()> {
        let mut names: Vec<&str> = self.tensors.iter().map(|(n, _)| n.as_str()).collect();
        for n in &names {
            if ParamGroup::of(n).is_none() && !n.starts_with("extractor.") {
                return Err(Error::Partition(format!("`{n}` belongs to no parameter group")));
            }
        }
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Partition(format!("duplicate tensor `{}`", w[0])));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&self.meta)
            .map_err(|e| Error::Config(format!("cannot serialise checkpoint metadata: {e}")))?;
        Ok(encode(&self.tensors, &meta))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (tensors, meta_text, meta_offset) = decode(bytes)?;
        let meta: Metadata = toml::from_str(&meta_text).map_err(|e| Error::Checkpoint {
            offset: meta_offset,
            msg: format!("bad metadata: {e}"),
        })?;
        let ckpt = Self { tensors, meta };
        ckpt.check_partition()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Serialise named tensors plus a metadata string.
pub fn encode(tensors: &[(String, Tensor<f32>)], meta: &str) -> Vec<u8> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 8 + n.len() + 8 * t.rank() + 4 * t.numel())
        .sum();
    let mut out = Vec::with_capacity(12 + payload + 8 + meta.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.fail(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64, what: &str) -> Result<usize> {
        usize::try_from(v).map_err(|_| self.fail(format!("{what} {v} does not fit in memory")))
    }
}

/// Inverse of [`encode`]; also returns the byte offset of the metadata text.
pub fn decode(bytes: &[u8]) -> Result<(Vec<(String, Tensor<f32>)>, String, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            msg: "bad magic (expected `DTLC`)".into(),
        });
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            offset: at,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let n = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| Error::Checkpoint {
                offset: at,
                msg: format!("tensor {i} name is not UTF-8"),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = r.u64("extent")?;
            shape.push(r.len(d, "extent")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.fail(format!("tensor `{name}` is too large")))?;
        let raw = r.take(numel, &format!("values of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let m = r.u64("metadata length")?;
    let m = r.len(m, "metadata length")?;
    let meta_at = r.pos;
    let meta = std::str::from_utf8(r.take(m, "metadata")?)
        .map_err(|_| Error::Checkpoint {
            offset: meta_at,
            msg: "metadata is not UTF-8".into(),
        })?
        .to_string();
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes after metadata", bytes.len() - r.pos)));
    }
    Ok((tensors, meta, meta_at))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DensityMeta {
    sigma: f64,
}

/// A density map as a one-tensor container (`density`, `[H, W]`, f32).
pub fn write_density(path: &Path, map: &DensityMap) -> Result<()> {
    let t = Tensor::new(
        vec![map.height, map.width],
        map.values.iter().map(|&v| v as f32).collect(),
    )?;
    let meta = toml::to_string(&DensityMeta { sigma: map.sigma }).expect("plain struct");
    let bytes = encode(&[("density".into(), t)], &meta);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_density(path: &Path) -> Result<DensityMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut tensors, meta, at) = decode(&bytes)?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if tensors.len() != 1 || tensors[0].0 != "density" || tensors[0].1.rank() != 2 {
        return Err(bad("expected one rank-2 tensor named `density`".into()));
    }
    let meta: DensityMeta = toml::from_str(&meta).map_err(|e| Error::Checkpoint {
        offset: at,
        msg: format!("bad density metadata: {e}"),
    })?;
    let (_, t) = tensors.pop().expect("one tensor");
    let (h, w) = (t.shape()[0], t.shape()[1]);
    Ok(DensityMap {
        width: w,
        height: h,
        values: t.data().iter().map(|&v| v as f64).collect(),
        sigma: meta.sigma,
    })
}
