//! Packed model files: binary layers as a dense sign bitstream plus `f64`
//! scales, everything else as `f32`, described by a JSON manifest.
//!
//! On disk the bits of consecutive rows are contiguous (LSB first, bit set for
//! `+1`), so a layer of `n` weights takes `ceil(n / 8)` bytes; rows are
//! re-aligned to `u64` words on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bitkernel::PackedBitTensor;
use crate::checkpoint::{blob_path, manifest_path, read_manifest};
use crate::error::{Error, Result};
use crate::layers::{Model, PackedWeights, ParamKind, Stage};
use crate::tensor::{numel, Tensor};

pub const FORMAT: &str = "biper-packed";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: usize,
    pub scales: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedManifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub metadata: serde_json::Value,
    pub full: Vec<FullEntry>,
    pub binary: Vec<BinaryEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedModel {
    pub metadata: serde_json::Value,
    pub full: Vec<(String, Tensor)>,
    pub binary: Vec<(String, PackedBitTensor)>,
}

/// Dense bitstream of all rows, without per-row padding.
pub fn dense_bits(b: &PackedBitTensor) -> Vec<u8> {
    let n = b.row_bits();
    let mut out = vec![0u8; (b.rows() * n).div_ceil(8)];
    for r in 0..b.rows() {
        let row = b.row(r);
        for j in 0..n {
            if (row[j / 64] >> (j % 64)) & 1 == 1 {
                let k = r * n + j;
                out[k / 8] |= 1 << (k % 8);
            }
        }
    }
    out
}

/// Inverse of [`dense_bits`].
pub fn from_dense_bits(shape: Vec<usize>, bytes: &[u8], scale: Vec<f64>) -> Result<PackedBitTensor> {
    let rows = if shape.len() <= 1 { 1 } else { shape[0] };
    let total = numel(&shape);
    let n = if rows == 0 { 0 } else { total / rows };
    if bytes.len() != total.div_ceil(8) {
        return Err(Error::Checkpoint(format!(
            "{} bytes of bits for {} weights",
            bytes.len(),
            total
        )));
    }
    let wpr = n.div_ceil(64);
    let mut words = vec![0u64; rows * wpr];
    for r in 0..rows {
        for j in 0..n {
            let k = r * n + j;
            if (bytes[k / 8] >> (k % 8)) & 1 == 1 {
                words[r * wpr + j / 64] |= 1 << (j % 64);
            }
        }
    }
    PackedBitTensor::from_raw(shape, words, scale)
}

/// Byte counts of the binarized layers: packed sign bits vs their `f32` latent weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackStats {
    pub binary_weights: usize,
    pub packed_payload_bytes: usize,
    pub float_bytes: usize,
    pub scale_bytes: usize,
}

impl PackStats {
    pub fn ratio(&self) -> f64 {
        self.float_bytes as f64 / self.packed_payload_bytes as f64
    }
}

impl PackedModel {
    /// Packs every binary layer of a stage-2 model. Fails if there is none.
    pub fn from_model(model: &Model, extra: serde_json::Value) -> Result<Self> {
        let packed = model.pack()?;
        let ck = model.to_checkpoint(Stage::Stage2, extra)?;
        let mut full = Vec::new();
        let mut binary = Vec::new();
        for (i, p) in model.store.params.iter().enumerate() {
            match &packed.by_param[i] {
                Some(bits) => binary.push((p.name.clone(), bits.clone())),
                None => full.push((p.name.clone(), p.value.clone())),
            }
        }
        let names: Vec<&str> = model.store.params.iter().map(|p| p.name.as_str()).collect();
        for (name, t) in &ck.tensors {
            if !names.contains(&name.as_str()) {
                full.push((name.clone(), t.clone()));
            }
        }
        Ok(Self {
            metadata: ck.metadata,
            full,
            binary,
        })
    }

    pub fn stats(&self) -> PackStats {
        let binary_weights: usize = self.binary.iter().map(|(_, b)| numel(b.shape())).sum();
        PackStats {
            binary_weights,
            packed_payload_bytes: self.binary.iter().map(|(_, b)| numel(b.shape()).div_ceil(8)).sum(),
            float_bytes: 4 * binary_weights,
            scale_bytes: self.binary.iter().map(|(_, b)| 8 * b.scale().len()).sum(),
        }
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut blob = Vec::new();
        let mut full = Vec::new();
        for (name, t) in &self.full {
            full.push(FullEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut binary = Vec::new();
        for (name, b) in &self.binary {
            let bits = dense_bits(b);
            binary.push(BinaryEntry {
                name: name.clone(),
                shape: b.shape().to_vec(),
                offset: blob.len() as u64,
                bytes: bits.len(),
                scales: b.scale().len(),
            });
            blob.extend_from_slice(&bits);
            for s in b.scale() {
                blob.extend_from_slice(&s.to_le_bytes());
            }
        }
        let blob_file = blob_path(stem);
        let manifest = PackedManifest {
            format: FORMAT.into(),
            version: VERSION,
            blob: blob_file
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string(),
            metadata: self.metadata.clone(),
            full,
            binary,
        };
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&blob_file, &blob)?;
        fs::write(manifest_path(stem), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: PackedManifest = read_manifest(stem, FORMAT, VERSION)?;
        let dir = stem.parent().unwrap_or_else(|| Path::new(""));
        let blob = fs::read(dir.join(&manifest.blob))?;
        let take = |offset: u64, len: usize| -> Result<&[u8]> {
            let start = offset as usize;
            blob.get(start..start + len).ok_or(Error::Format {
                format: FORMAT,
                offset,
                msg: format!("blob has {} bytes, entry needs {}", blob.len(), start + len),
            })
        };
        let mut full = Vec::new();
        for e in &manifest.full {
            let n = numel(&e.shape);
            let data = take(e.offset, 4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            full.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        let mut binary = Vec::new();
        for e in &manifest.binary {
            let bytes = take(e.offset, e.bytes + 8 * e.scales)?;
            let (wb, sb) = bytes.split_at(e.bytes);
            let scale = sb
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            binary.push((e.name.clone(), from_dense_bits(e.shape.clone(), wb, scale)?));
        }
        Ok(Self {
            metadata: manifest.metadata,
            full,
            binary,
        })
    }

    /// Rebuilds the model for packed inference. Latent weights of binary
    /// layers are not stored; they are set to the unpacked signs.
    pub fn into_model(self) -> Result<(Model, PackedWeights)> {
        let ck = crate::checkpoint::Checkpoint {
            metadata: self.metadata,
            tensors: self
                .full
                .into_iter()
                .chain(self.binary.iter().map(|(n, b)| (n.clone(), b.unpack())))
                .collect(),
        };
        let (model, stage) = Model::from_checkpoint(&ck)?;
        if stage != Stage::Stage2 {
            return Err(Error::Checkpoint("packed models hold stage-2 weights".into()));
        }
        let mut by_param = vec![None; model.store.params.len()];
        for (name, bits) in self.binary {
            let i = model
                .store
                .params
                .iter()
                .position(|p| p.name == name && p.kind == ParamKind::BinaryWeight)
                .ok_or_else(|| Error::Checkpoint(format!("packed tensor {} is not a binary layer", name)))?;
            by_param[i] = Some(bits);
        }
        Ok((model, PackedWeights { by_param }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Architecture, ModelSpec};
    use crate::quantization::QuantSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_256_payload_is_32x_smaller() {
        let spec = ModelSpec::new(Architecture::Mlp {
            dims: vec![4, 256, 256, 2],
        });
        let m = Model::build(spec, QuantSpec::biper(20.0), 0).unwrap();
        let s = PackedModel::from_model(&m, serde_json::Value::Null).unwrap().stats();
        assert_eq!(s.binary_weights, 65536);
        assert_eq!(s.packed_payload_bytes, 8192);
        assert_eq!(s.float_bytes, 262144);
        assert_eq!(s.ratio(), 32.0);
    }

    #[test]
    fn save_load_and_predict_match_float_path() {
        let arch = Architecture::Minicnn {
            in_channels: 1,
            height: 10,
            width: 10,
            classes: 3,
            channels: 4,
        };
        let mut m = Model::build(ModelSpec::new(arch), QuantSpec::biper(20.0), 1).unwrap();
        m.round_to_storage();
        let p = PackedModel::from_model(&m, serde_json::json!({"k": "v"})).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save(&dir.path().join("packed")).unwrap();
        let back = PackedModel::load(&dir.path().join("packed")).unwrap();
        assert_eq!(back, p);
        let (mut pm, weights) = back.into_model().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(vec![4, 1, 10, 10], (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let want = m.predict(&x, Stage::Stage2, None).unwrap();
        assert_eq!(pm.predict(&x, Stage::Stage2, Some(&weights)).unwrap(), want);
    }

    #[test]
    fn dense_bits_round_trip_unaligned_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for shape in [vec![3usize, 5], vec![2, 70], vec![1], vec![4, 2, 3, 3], vec![64]] {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            let b = PackedBitTensor::from_values(&Tensor::new(shape.clone(), v).unwrap(), vec![1.0]).unwrap();
            let bits = dense_bits(&b);
            assert_eq!(bits.len(), n.div_ceil(8));
            assert_eq!(from_dense_bits(shape, &bits, vec![1.0]).unwrap(), b);
        }
    }

    #[test]
    fn minicnn_file_payload_is_32x_smaller() {
        let arch = Architecture::Minicnn {
            in_channels: 1,
            height: 28,
            width: 28,
            classes: 10,
            channels: 8,
        };
        let m = Model::build(ModelSpec::new(arch), QuantSpec::biper(20.0), 0).unwrap();
        let s = PackedModel::from_model(&m, serde_json::Value::Null).unwrap().stats();
        assert_eq!(s.binary_weights, 16 * 8 * 9 + 16 * 16 * 9);
        assert_eq!(s.ratio(), 32.0);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let spec = ModelSpec::new(Architecture::Mlp { dims: vec![4, 8, 8, 2] });
        let m = Model::build(spec, QuantSpec::biper(20.0), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("p");
        PackedModel::from_model(&m, serde_json::Value::Null).unwrap().save(&stem).unwrap();
        let blob = fs::read(blob_path(&stem)).unwrap();
        fs::write(blob_path(&stem), &blob[..blob.len() - 3]).unwrap();
        assert!(matches!(PackedModel::load(&stem), Err(Error::Format { .. })));
    }
}
