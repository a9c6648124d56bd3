//! Checkpoint archive: a single file holding the manifest plus every
//! named parameter array (and optimizer state when present).
//!
//! The format is deterministic — maps are ordered, the manifest JSON
//! has a fixed field order, no timestamps — so save/load/save is
//! byte-identical. Loading verifies the architecture hash.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{arch_hash, ModelParams, NetConfig, ParamSet, ParamSetId, TaskMode};
use crate::train::{AdamState, TrainConfig};

const MAGIC: &[u8; 4] = b"UVCK";
const FORMAT_VERSION: u32 = 1;

/// Which procedure produced the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    Meta,
    Online,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Meta => "meta",
            Stage::Online => "online",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub arch_hash: String,
    pub stage: Stage,
    pub iteration: u64,
    pub seed: u64,
    pub mode: TaskMode,
    pub net_config: NetConfig,
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    pub manifest: CheckpointManifest,
}

impl Checkpoint {
    pub fn new(
        params: ModelParams,
        optimizer: Option<AdamState>,
        stage: Stage,
        iteration: u64,
        config: &TrainConfig,
    ) -> Self {
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            arch_hash: params.arch_hash(),
            stage,
            iteration,
            seed: config.seed,
            mode: params.mode,
            net_config: params.config.clone(),
            train_config: config.clone(),
        };
        Self {
            params,
            optimizer,
            manifest,
        }
    }
}

fn write_array(out: &mut impl Write, name: &str, value: &ArrayD<f64>) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(name.len() as u32)?;
    out.write_all(name.as_bytes())?;
    out.write_u32::<LittleEndian>(value.ndim() as u32)?;
    for d in value.shape() {
        out.write_u64::<LittleEndian>(*d as u64)?;
    }
    for v in value.iter() {
        out.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn write_map(out: &mut impl Write, map: &BTreeMap<String, ArrayD<f64>>) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(map.len() as u32)?;
    for (name, value) in map {
        write_array(out, name, value)?;
    }
    Ok(())
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    out.write_all(MAGIC).map_err(io_err)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io_err)?;

    let manifest = serde_json::to_vec(&ckpt.manifest)
        .map_err(|e| Error::InvalidArgument(format!("manifest serialization: {e}")))?;
    out.write_u64::<LittleEndian>(manifest.len() as u64)
        .map_err(io_err)?;
    out.write_all(&manifest).map_err(io_err)?;

    // Parameters, qualified by set prefix for one flat ordered map.
    let mut flat = BTreeMap::new();
    for id in ParamSetId::all() {
        for (name, value) in ckpt.params.set(id) {
            flat.insert(format!("{}.{}", id.prefix(), name), value.clone());
        }
    }
    write_map(&mut out, &flat).map_err(io_err)?;

    match &ckpt.optimizer {
        None => out.write_u8(0).map_err(io_err)?,
        Some(state) => {
            out.write_u8(1).map_err(io_err)?;
            out.write_u64::<LittleEndian>(state.step).map_err(io_err)?;
            write_map(&mut out, &state.first_moment).map_err(io_err)?;
            write_map(&mut out, &state.second_moment).map_err(io_err)?;
        }
    }
    Ok(())
}

struct ArchiveReader<'p, R> {
    inp: R,
    path: &'p Path,
}

impl<'p, R: Read> ArchiveReader<'p, R> {
    fn bad(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn read_array(&mut self) -> Result<(String, ArrayD<f64>)> {
        let name_len = self
            .inp
            .read_u32::<LittleEndian>()
            .map_err(|e| self.bad(format!("truncated name length: {e}")))? as usize;
        if name_len > 4096 {
            return Err(self.bad("implausible parameter name length"));
        }
        let mut name = vec![0u8; name_len];
        self.inp
            .read_exact(&mut name)
            .map_err(|e| self.bad(format!("truncated name: {e}")))?;
        let name =
            String::from_utf8(name).map_err(|_| self.bad("parameter name is not UTF-8"))?;
        let ndim = self
            .inp
            .read_u32::<LittleEndian>()
            .map_err(|e| self.bad(format!("truncated rank: {e}")))? as usize;
        if ndim > 8 {
            return Err(self.bad("implausible parameter rank"));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(
                self.inp
                    .read_u64::<LittleEndian>()
                    .map_err(|e| self.bad(format!("truncated dims: {e}")))? as usize,
            );
        }
        let len: usize = dims.iter().product();
        if len > 1 << 28 {
            return Err(self.bad("implausible parameter size"));
        }
        let mut data = vec![0.0f64; len];
        for v in data.iter_mut() {
            *v = self
                .inp
                .read_f64::<LittleEndian>()
                .map_err(|e| self.bad(format!("truncated data: {e}")))?;
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| self.bad(format!("inconsistent shape: {e}")))?;
        Ok((name, arr))
    }

    fn read_map(&mut self) -> Result<BTreeMap<String, ArrayD<f64>>> {
        let count = self
            .inp
            .read_u32::<LittleEndian>()
            .map_err(|e| self.bad(format!("truncated map length: {e}")))?;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let (name, arr) = self.read_array()?;
            map.insert(name, arr);
        }
        Ok(map)
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = ArchiveReader {
        inp: BufReader::new(file),
        path,
    };

    let mut magic = [0u8; 4];
    reader
        .inp
        .read_exact(&mut magic)
        .map_err(|e| reader.bad(format!("missing magic: {e}")))?;
    if &magic != MAGIC {
        return Err(reader.bad("bad magic"));
    }
    let version = reader
        .inp
        .read_u32::<LittleEndian>()
        .map_err(|e| reader.bad(format!("missing version: {e}")))?;
    if version != FORMAT_VERSION {
        return Err(reader.bad(format!("unsupported format version {version}")));
    }

    let manifest_len = reader
        .inp
        .read_u64::<LittleEndian>()
        .map_err(|e| reader.bad(format!("missing manifest: {e}")))? as usize;
    if manifest_len > 1 << 24 {
        return Err(reader.bad("implausible manifest size"));
    }
    let mut manifest_bytes = vec![0u8; manifest_len];
    reader
        .inp
        .read_exact(&mut manifest_bytes)
        .map_err(|e| reader.bad(format!("truncated manifest: {e}")))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| reader.bad(format!("manifest does not parse: {e}")))?;

    // The manifest must agree with its own architecture description.
    let expected = arch_hash(manifest.mode, &manifest.net_config);
    if manifest.arch_hash != expected {
        return Err(Error::ArchMismatch {
            expected,
            found: manifest.arch_hash.clone(),
        });
    }

    let flat = reader.read_map()?;
    let mut sets: [ParamSet; 3] = [ParamSet::new(), ParamSet::new(), ParamSet::new()];
    for (name, value) in flat {
        let Some((prefix, rest)) = name.split_once('.') else {
            return Err(reader.bad(format!("unqualified parameter name {name}")));
        };
        let slot = match prefix {
            "flow_decomp" => 0,
            "recon_b" => 1,
            "recon_r" => 2,
            other => return Err(reader.bad(format!("unknown parameter set {other}"))),
        };
        sets[slot].insert(rest.to_string(), value);
    }
    let [flow_decomp, recon_b, recon_r] = sets;

    let optimizer = match reader
        .inp
        .read_u8()
        .map_err(|e| reader.bad(format!("missing optimizer flag: {e}")))?
    {
        0 => None,
        1 => {
            let step = reader
                .inp
                .read_u64::<LittleEndian>()
                .map_err(|e| reader.bad(format!("truncated optimizer: {e}")))?;
            let first_moment = reader.read_map()?;
            let second_moment = reader.read_map()?;
            Some(AdamState {
                step,
                first_moment,
                second_moment,
            })
        }
        other => return Err(reader.bad(format!("invalid optimizer flag {other}"))),
    };

    let params = ModelParams {
        mode: manifest.mode,
        config: manifest.net_config.clone(),
        flow_decomp,
        recon_b,
        recon_r,
    };
    Ok(Checkpoint {
        params,
        optimizer,
        manifest,
    })
}

/// Loads a checkpoint and verifies it matches an expected architecture,
/// naming both hashes on mismatch.
pub fn load_expecting(path: &Path, expected_arch: &str) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    if ckpt.manifest.arch_hash != expected_arch {
        return Err(Error::ArchMismatch {
            expected: expected_arch.to_string(),
            found: ckpt.manifest.arch_hash,
        });
    }
    Ok(ckpt)
}
