//! On-disk container shared by datasets and checkpoints: a `manifest.json`
//! plus one flat little-endian binary file per tensor.
//!
//! Dataset tensors are stored as f32; checkpoint tensors (parameters and
//! optimizer state) are stored as f64 so training resumes bit-exactly.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FORMAT: &str = "mindtuner-container/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// "dataset" | "checkpoint" | ...
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    /// kind-specific metadata
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Write a container directory. Refuses to overwrite an existing manifest
/// unless `overwrite` is set.
pub fn write_container(
    dir: &Path,
    kind: &str,
    seed: u64,
    config_hash: &str,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor, DType)],
    overwrite: bool,
) -> Result<()> {
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !overwrite {
        return Err(CoreError::Container(format!(
            "{} already exists (pass overwrite to replace it)",
            manifest_path.display()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut seen = std::collections::BTreeSet::new();
    for (i, (name, tensor, dtype)) in tensors.iter().enumerate() {
        if !seen.insert(name.clone()) {
            return Err(CoreError::Container(format!("duplicate tensor name '{name}'")));
        }
        let file = format!("t{i:04}.bin");
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        match dtype {
            DType::F32 => {
                for v in tensor.data() {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
            DType::F64 => {
                for v in tensor.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        entries.push(TensorEntry {
            name: name.clone(),
            file,
            dtype: *dtype,
            shape: tensor.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        kind: kind.into(),
        seed,
        config_hash: config_hash.into(),
        meta,
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| CoreError::Container(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(CoreError::Container(format!(
            "unsupported container format '{}'",
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Load every tensor named in the manifest (values widen to f64 in memory).
pub fn read_container(dir: &Path) -> Result<(Manifest, BTreeMap<String, Tensor>)> {
    let manifest = read_manifest(dir)?;
    let mut map = BTreeMap::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let path = dir.join(&entry.file);
        let mut r = BufReader::new(fs::File::open(&path)?);
        let mut data = Vec::with_capacity(n);
        match entry.dtype {
            DType::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut buf)?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
            DType::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut buf)?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
        }
        let mut tail = [0u8; 1];
        if r.read(&mut tail)? != 0 {
            return Err(CoreError::Container(format!(
                "{}: trailing bytes beyond declared shape",
                path.display()
            )));
        }
        map.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((manifest, map))
}

/// Fetch a required tensor out of a loaded container.
pub fn take_tensor(map: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    map.remove(name)
        .ok_or_else(|| CoreError::Container(format!("missing tensor '{name}'")))
}
