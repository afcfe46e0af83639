//! ZTC checkpoint container: a magic header, one JSON metadata blob, then a
//! sequence of named f32 tensors until end of file.
//!
//! Layout (all integers little-endian):
//!   "ZTC1" | u32 json_len | json bytes | tensor*
//! where each tensor is
//!   u16 name_len | name utf-8 | u8 dtype (0 = f32) | u8 rank |
//!   rank x u32 dims | numel x f32 raw data
//!
//! Round-trips are bitwise exact, NaN payloads included.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::model::{Factors, LayerParams, ModelState};
use crate::tensor::Tensor;
use crate::train::EpochRecord;

pub const MAGIC: [u8; 4] = *b"ZTC1";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Raw container contents: metadata plus tensors in file order.
#[derive(Debug, Clone)]
pub struct ZtcFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

/// Self-describing checkpoint metadata stored in the JSON blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub factors: Factors,
    /// Sparsification method tag: "dense", "mp_<ratio>", or "vd".
    pub method: String,
    pub record: EpochRecordMeta,
}

/// Serializable mirror of a training [`EpochRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecordMeta {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub ggap: f64,
    pub sparsity: f64,
}

impl From<&EpochRecord> for EpochRecordMeta {
    fn from(r: &EpochRecord) -> Self {
        EpochRecordMeta {
            epoch: r.epoch,
            train_loss: r.train_loss,
            train_acc: r.train_acc,
            test_acc: r.test_acc,
            ggap: r.ggap,
            sparsity: r.sparsity,
        }
    }
}

impl From<&EpochRecordMeta> for EpochRecord {
    fn from(r: &EpochRecordMeta) -> Self {
        EpochRecord {
            epoch: r.epoch,
            train_loss: r.train_loss,
            train_acc: r.train_acc,
            test_acc: r.test_acc,
            ggap: r.ggap,
            sparsity: r.sparsity,
        }
    }
}

/// A fully decoded model checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelState,
    pub record: EpochRecord,
    pub method: String,
    /// Tensors beyond the model parameters (e.g. per-layer log-alpha maps),
    /// in file order.
    pub extras: Vec<(String, Tensor)>,
}

pub fn write_ztc(path: &Path, meta: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let json = serde_json::to_vec(meta)
        .map_err(|e| Error::Format(format!("metadata does not serialize: {e}")))?;
    if json.len() > u32::MAX as usize {
        return Err(Error::Format("metadata exceeds u32 length".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name of {} bytes", nb.len())));
        }
        if t.dims().len() > u8::MAX as usize {
            return Err(Error::Format(format!("tensor rank {}", t.dims().len())));
        }
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[DTYPE_F32, t.dims().len() as u8])?;
        for d in t.dims() {
            if *d > u32::MAX as usize {
                return Err(Error::Format(format!("dimension {d} exceeds u32")));
            }
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn take(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

pub fn read_ztc(path: &Path) -> Result<ZtcFile> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    take(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x}{:02x}{:02x}{:02x}, expected ZTC1",
            magic[0], magic[1], magic[2], magic[3]
        )));
    }
    let mut len4 = [0u8; 4];
    take(&mut r, &mut len4, "metadata length")?;
    let json_len = u32::from_le_bytes(len4) as usize;
    let mut json = vec![0u8; json_len];
    take(&mut r, &mut json, "metadata")?;
    let meta: serde_json::Value = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("metadata is not valid JSON: {e}")))?;

    let mut tensors = Vec::new();
    loop {
        let mut len2 = [0u8; 2];
        match r.read_exact(&mut len2) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::Io(e)),
        }
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name = vec![0u8; name_len];
        take(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut dt = [0u8; 2];
        take(&mut r, &mut dt, "tensor header")?;
        if dt[0] != DTYPE_F32 {
            return Err(Error::Format(format!("unknown dtype {} for '{name}'", dt[0])));
        }
        let rank = dt[1] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            take(&mut r, &mut len4, "tensor dims")?;
            dims.push(u32::from_le_bytes(len4) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 4];
        take(&mut r, &mut raw, &format!("data of '{name}'"))?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, Tensor::new(dims, data)?));
    }
    Ok(ZtcFile { meta, tensors })
}

/// Writes a model checkpoint: metadata plus `<layer>.weight` / `<layer>.bias`
/// tensors in layer order, then any extras.
pub fn save_checkpoint(
    path: &Path,
    model: &ModelState,
    record: &EpochRecord,
    method: &str,
    extras: &[(&str, &Tensor)],
) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        arch: model.arch.clone(),
        factors: model.factors.clone(),
        method: method.to_string(),
        record: record.into(),
    };
    let meta = serde_json::to_value(&meta)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let mut names = Vec::with_capacity(model.layers.len() * 2);
    for lp in &model.layers {
        names.push((format!("{}.weight", lp.name), &lp.weight));
        names.push((format!("{}.bias", lp.name), &lp.bias));
    }
    let mut tensors: Vec<(&str, &Tensor)> =
        names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    tensors.extend_from_slice(extras);
    write_ztc(path, &meta, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = read_ztc(path)?;
    let meta: CheckpointMeta = serde_json::from_value(file.meta.clone())
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    let names = meta.arch.layer_names();
    let mut by_name: std::collections::HashMap<&str, &Tensor> = std::collections::HashMap::new();
    for (n, t) in &file.tensors {
        if by_name.insert(n.as_str(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{n}'")));
        }
    }
    let mut layers = Vec::with_capacity(names.len());
    for name in &names {
        let wkey = format!("{name}.weight");
        let bkey = format!("{name}.bias");
        let weight = by_name
            .get(wkey.as_str())
            .ok_or_else(|| Error::Format(format!("missing tensor '{wkey}'")))?;
        let bias = by_name
            .get(bkey.as_str())
            .ok_or_else(|| Error::Format(format!("missing tensor '{bkey}'")))?;
        layers.push(LayerParams {
            name: name.clone(),
            weight: (*weight).clone(),
            bias: (*bias).clone(),
        });
    }
    let model = ModelState { arch: meta.arch.clone(), factors: meta.factors.clone(), layers };
    let expect = model.arch.param_count()?;
    let got = model.flatten_params().len();
    if got != expect {
        return Err(Error::Format(format!(
            "checkpoint holds {got} parameters, architecture needs {expect}"
        )));
    }
    let param_names: std::collections::HashSet<String> = names
        .iter()
        .flat_map(|n| [format!("{n}.weight"), format!("{n}.bias")])
        .collect();
    let extras = file
        .tensors
        .iter()
        .filter(|(n, _)| !param_names.contains(n))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    Ok(Checkpoint { model, record: (&meta.record).into(), method: meta.method, extras })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Activation;
    use crate::model::InitScheme;
    use crate::optim::OptimKind;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn record() -> EpochRecord {
        EpochRecord {
            epoch: 3,
            train_loss: 0.5,
            train_acc: 0.9,
            test_acc: 0.8,
            ggap: 0.1,
            sparsity: 0.25,
        }
    }

    #[test]
    fn raw_round_trip_is_bitwise() {
        let dir = tmp();
        let path = dir.path().join("raw.ztc");
        let a = Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::from_bits(0x7fc0_0001), 2.5, -3.0, 4.0])
            .unwrap();
        let b = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let meta = serde_json::json!({"kind": "test", "n": 7});
        write_ztc(&path, &meta, &[("alpha", &a), ("beta.bias", &b)]).unwrap();
        let f = read_ztc(&path).unwrap();
        assert_eq!(f.meta, meta);
        assert_eq!(f.tensors.len(), 2);
        assert_eq!(f.tensors[0].0, "alpha");
        assert_eq!(f.tensors[0].1.dims(), &[2, 3]);
        let bits_in: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
        let bits_out: Vec<u32> = f.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_in, bits_out);
        assert_eq!(f.tensors[1].0, "beta.bias");
    }

    #[test]
    fn empty_tensor_list_is_fine() {
        let dir = tmp();
        let path = dir.path().join("empty.ztc");
        write_ztc(&path, &serde_json::json!({}), &[]).unwrap();
        let f = read_ztc(&path).unwrap();
        assert!(f.tensors.is_empty());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("bad.ztc");
        std::fs::write(&path, b"NOPE\x00\x00\x00\x00").unwrap();
        let err = read_ztc(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn truncation_is_reported_as_format_error() {
        let dir = tmp();
        let path = dir.path().join("trunc.ztc");
        let t = Tensor::new(vec![8], vec![1.0; 8]).unwrap();
        write_ztc(&path, &serde_json::json!({}), &[("w", &t)]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 7]).unwrap();
        let err = read_ztc(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_reconstructs_the_model() {
        let arch = ArchConfig::preset("seed-gray").unwrap();
        let factors = Factors {
            seed: 42,
            activation: Activation::Tanh,
            optimizer: OptimKind::Sgd,
            lr: 0.01,
            weight_decay: 1e-4,
            dropout: 0.3,
            init: InitScheme::XavierUniform,
        };
        let model = ModelState::init(&arch, &factors).unwrap();
        let alpha = Tensor::full(vec![8, 1, 5, 5], -8.0);
        let dir = tmp();
        let path = dir.path().join("ckpt.ztc");
        save_checkpoint(&path, &model, &record(), "vd", &[("conv1.log_alpha", &alpha)]).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.model.arch, model.arch);
        assert_eq!(ck.model.factors, model.factors);
        assert_eq!(ck.model.flatten_params(), model.flatten_params());
        assert_eq!(ck.record, record());
        assert_eq!(ck.method, "vd");
        assert_eq!(ck.extras.len(), 1);
        assert_eq!(ck.extras[0].0, "conv1.log_alpha");
        assert_eq!(ck.extras[0].1.data(), alpha.data());
    }

    #[test]
    fn missing_layer_tensor_is_detected() {
        let arch = ArchConfig::preset("seed-gray").unwrap();
        let factors = Factors {
            seed: 1,
            activation: Activation::Relu,
            optimizer: OptimKind::Adam,
            lr: 1e-3,
            weight_decay: 0.0,
            dropout: 0.0,
            init: InitScheme::KaimingUniform,
        };
        let model = ModelState::init(&arch, &factors).unwrap();
        let dir = tmp();
        let path = dir.path().join("short.ztc");
        // Write metadata claiming a full model but omit one tensor.
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            arch: arch.clone(),
            factors,
            method: "dense".into(),
            record: (&record()).into(),
        };
        let meta = serde_json::to_value(&meta).unwrap();
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for lp in model.layers.iter().skip(1) {
            tensors.push((format!("{}.weight", lp.name), &lp.weight));
            tensors.push((format!("{}.bias", lp.name), &lp.bias));
        }
        let view: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        write_ztc(&path, &meta, &view).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }
}
