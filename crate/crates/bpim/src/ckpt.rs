//! Model checkpoints: a single binary archive holding the config as JSON
//! plus every named tensor (trainable parameters and norm running stats).
//!
//! Layout, all integers little-endian:
//!   magic "BPCK" | version u32 | config_len u64 | config JSON bytes
//!   | tensor_count u64 | tensors
//! each tensor: name_len u16 | name utf8 | ndim u8 | dims u64[ndim]
//!   | values f64[prod(dims)]

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::autograd::Arr;
use crate::error::{Error, Result};
use crate::model::{build, Model, ModelConfig};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"BPCK";
const VERSION: u32 = 1;

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;

    let entries = model.collect_params();
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for e in &entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("name too long: {}", e.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        let v = e.var.value();
        let dims = v.shape();
        w.write_all(&[dims.len() as u8])?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in v.iter() {
            w.write_all(&x.to_f64_lossy().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub config: ModelConfig,
    pub tensors: HashMap<String, Arr<f64>>,
}

pub fn read_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let config_len = u64::from_le_bytes(u64b) as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;

    r.read_exact(&mut u64b)?;
    let count = u64::from_le_bytes(u64b) as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b)?;
        let name_len = u16::from_le_bytes(u16b) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not utf8".into()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            r.read_exact(&mut u64b)?;
            dims.push(u64::from_le_bytes(u64b) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut f64b = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut f64b)?;
            data.push(f64::from_le_bytes(f64b));
        }
        let arr = Arr::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors.insert(name, arr);
    }
    Ok(LoadedCheckpoint { config, tensors })
}

/// Rebuild the model from the stored config and restore every tensor.
pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let ckpt = read_checkpoint(path)?;
    let model = build::<T>(&ckpt.config, 0)?;
    let entries = model.collect_params();
    for e in &entries {
        let stored = ckpt.tensors.get(&e.name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing tensor {}", e.name))
        })?;
        if stored.shape() != e.var.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                e.name,
                stored.shape(),
                e.var.shape()
            )));
        }
        e.var.set_value(stored.mapv(T::c));
    }
    Ok(model)
}
