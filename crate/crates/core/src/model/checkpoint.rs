//! Checkpoint directories: one binary file per named array plus a JSON
//! manifest.
//!
//! Each array file starts with a 16-byte header: the magic `YKD1`, the
//! rank as a little-endian `u16` and five little-endian `u16` dimensions
//! (unused trailing dimensions are zero). Little-endian `f32` values
//! follow in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::params::{Initializer, ParamSet};
use super::{network, ArchConfig, FeBranch, HeadEntry, ModelState};
use crate::error::{Error, Result};
use crate::scenario::ClassId;

const MAGIC: &[u8; 4] = b"YKD1";
const MAX_RANK: usize = 5;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub owner: String,
    pub step: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub index: usize,
    pub step: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub step: usize,
    pub frozen: bool,
    pub stored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arch: ArchConfig,
    pub backbone_frozen: bool,
    pub branches: Vec<BranchRecord>,
    pub heads: Vec<HeadRecord>,
    pub arrays: Vec<ArrayRecord>,
    pub class_domains: BTreeMap<String, Vec<ClassId>>,
}

/// Encodes one array with the fixed header.
pub fn encode_array(a: &ArrayD<f32>) -> Result<Vec<u8>> {
    if a.ndim() > MAX_RANK {
        return Err(Error::Checkpoint(format!("rank {} exceeds {MAX_RANK}", a.ndim())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + a.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(a.ndim() as u16).to_le_bytes());
    for i in 0..MAX_RANK {
        let d = a.shape().get(i).copied().unwrap_or(0);
        let d = u16::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in a.as_standard_layout().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_array(bytes: &[u8]) -> Result<ArrayD<f32>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad array header".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    let rank = u16_at(4);
    if rank > MAX_RANK {
        return Err(Error::Checkpoint(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let shape: Vec<usize> = (0..rank).map(|i| u16_at(6 + 2 * i)).collect();
    let count: usize = shape.iter().product();
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * 4 {
        return Err(Error::Checkpoint(format!("array body has {} bytes, shape {shape:?} needs {}", body.len(), count * 4)));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn collections(state: &ModelState) -> Vec<(String, &ParamSet, &'static str, usize, bool)> {
    let mut out = vec![("backbone".to_string(), &state.backbone, "backbone", 0, state.backbone_frozen)];
    for (i, fe) in state.fes.iter().enumerate() {
        out.push((format!("fe{i}"), &fe.params, "fe", fe.step, fe.frozen));
    }
    for h in &state.heads {
        if let Some(p) = &h.params {
            out.push((format!("head{}", h.step), p, "head", h.step, h.frozen));
        }
    }
    out
}

pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<()> {
    let arrays_dir = dir.join("arrays");
    fs::create_dir_all(&arrays_dir).map_err(|e| Error::io(&arrays_dir, e))?;
    let mut records = Vec::new();
    for (prefix, params, owner, step, frozen) in collections(state) {
        for (name, a) in params.iter() {
            let full = format!("{prefix}.{name}");
            let path = arrays_dir.join(format!("{full}.bin"));
            fs::write(&path, encode_array(a)?).map_err(|e| Error::io(&path, e))?;
            records.push(ArrayRecord {
                name: full,
                shape: a.shape().to_vec(),
                dtype: "float32".into(),
                owner: owner.into(),
                step,
                frozen,
            });
        }
    }
    let manifest = Manifest {
        arch: state.arch.clone(),
        backbone_frozen: state.backbone_frozen,
        branches: state
            .fes
            .iter()
            .enumerate()
            .map(|(index, f)| BranchRecord { index, step: f.step, frozen: f.frozen })
            .collect(),
        heads: state
            .heads
            .iter()
            .map(|h| HeadRecord {
                step: h.step,
                frozen: h.frozen,
                stored: h.params.is_some(),
            })
            .collect(),
        arrays: records,
        class_domains: state.heads.iter().map(|h| (format!("head_{}", h.step), h.domain.clone())).collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Which head parameters to read from disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelection {
    All,
    /// Only the latest head; the rest keep their domains but no parameters.
    Latest,
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelState> {
    load_checkpoint_with(dir, HeadSelection::All)
}

/// Loads a checkpoint for inference: every branch and only the latest head.
pub fn load_for_inference(dir: &Path) -> Result<ModelState> {
    load_checkpoint_with(dir, HeadSelection::Latest)
}

pub fn load_checkpoint_with(dir: &Path, heads: HeadSelection) -> Result<ModelState> {
    let manifest = read_manifest(dir)?;
    manifest.arch.validate()?;
    let by_name: BTreeMap<&str, &ArrayRecord> = manifest.arrays.iter().map(|r| (r.name.as_str(), r)).collect();
    let init = Initializer::new(0);

    // reference shapes come from a freshly initialised layout
    let load_collection = |prefix: &str, reference: &ParamSet| -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, a) in reference.iter() {
            let full = format!("{prefix}.{name}");
            let rec = by_name
                .get(full.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("collection `{prefix}` is missing array `{full}` in the manifest")))?;
            let path = dir.join("arrays").join(format!("{full}.bin"));
            let bytes = fs::read(&path).map_err(|_| Error::Checkpoint(format!("collection `{prefix}`: array file for `{full}` is missing")))?;
            let arr = decode_array(&bytes).map_err(|e| Error::Checkpoint(format!("collection `{prefix}`, array `{full}`: {e}")))?;
            if arr.shape() != rec.shape.as_slice() || arr.shape() != a.shape() {
                return Err(Error::Checkpoint(format!(
                    "collection `{prefix}`: array `{full}` has shape {:?}, manifest {:?}, expected {:?}",
                    arr.shape(),
                    rec.shape,
                    a.shape()
                )));
            }
            out.insert(name.clone(), arr);
        }
        let expected = reference.len();
        let listed = manifest.arrays.iter().filter(|r| r.name.starts_with(&format!("{prefix}."))).count();
        if listed != expected {
            return Err(Error::Checkpoint(format!("collection `{prefix}` lists {listed} arrays, expected {expected}")));
        }
        Ok(out)
    };

    let arch = &manifest.arch;
    let backbone = load_collection("backbone", &network::init_backbone(arch, &init))?;
    let fe_ref = network::init_fe(arch, &init);
    let mut fes = Vec::new();
    for (i, b) in manifest.branches.iter().enumerate() {
        if b.index != i {
            return Err(Error::Checkpoint(format!("branch records out of order at {i}")));
        }
        fes.push(FeBranch {
            params: load_collection(&format!("fe{i}"), &fe_ref)?,
            step: b.step,
            frozen: b.frozen,
        });
    }
    if fes.is_empty() || manifest.heads.is_empty() {
        return Err(Error::Checkpoint("checkpoint has no feature extractor or no head".into()));
    }
    let last = manifest.heads.len() - 1;
    let mut head_entries = Vec::new();
    for (i, h) in manifest.heads.iter().enumerate() {
        let key = format!("head_{}", h.step);
        let domain = manifest
            .class_domains
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("no class domain for `{key}`")))?
            .clone();
        let wanted = h.stored && (heads == HeadSelection::All || i == last);
        let params = if wanted {
            let reference = network::init_head(arch, domain.len(), &init);
            Some(load_collection(&format!("head{}", h.step), &reference)?)
        } else {
            None
        };
        head_entries.push(HeadEntry {
            step: h.step,
            domain,
            params,
            frozen: h.frozen,
        });
    }
    if head_entries[last].params.is_none() {
        return Err(Error::Checkpoint(format!("latest head `head{}` has no stored parameters", head_entries[last].step)));
    }
    Ok(ModelState {
        arch: manifest.arch.clone(),
        backbone,
        backbone_frozen: manifest.backbone_frozen,
        fes,
        heads: head_entries,
    })
}
