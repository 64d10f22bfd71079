//! Binary checkpoint format.
//!
//! Layout: the magic bytes `CLOSR1\n`, a 4-byte little-endian header length,
//! a UTF-8 JSON header `{format_version, model_config, class_names,
//! scaler{mean,std,clamp}, centroids_present}`, then every tensor as
//! little-endian f32, row-major, in declaration order: input W, input b,
//! block_0 W, block_0 b, ..., head_0 W, head_0 b, ..., followed by the
//! centroids (one f_o vector per head) when present.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::FeatureScaler;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, NetworkParameters};

const MAGIC: &[u8; 7] = b"CLOSR1\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ScalerHeader {
    mean: Vec<f64>,
    std: Vec<f64>,
    clamp: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    class_names: Vec<String>,
    scaler: ScalerHeader,
    centroids_present: bool,
}

/// A trained model with everything needed to score new data: architecture,
/// the class vocabulary it was trained on (head-aligned, benign first), the
/// feature scaler, the weights, and the per-head mean directions.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub class_names: Vec<String>,
    pub scaler: FeatureScaler,
    pub params: NetworkParameters,
    pub centroids: Option<Vec<Array1<f64>>>,
}

fn write_f32_slice<W: Write>(out: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32_vec<R: Read>(input: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 4];
    input.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            model_config: self.model_config.clone(),
            class_names: self.class_names.clone(),
            scaler: ScalerHeader {
                mean: self.scaler.mean.clone(),
                std: self.scaler.std.clone(),
                clamp: self.scaler.clamp_bound,
            },
            centroids_present: self.centroids.is_some(),
        };
        let header_json = serde_json::to_string(&header)
            .map_err(|e| Error::config(format!("header serialization failed: {e}")))?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&(header_json.len() as u32).to_le_bytes())?;
        out.write_all(header_json.as_bytes())?;
        for linear in self.params.linears() {
            write_f32_slice(&mut out, linear.weight.iter().copied())?;
            write_f32_slice(&mut out, linear.bias.iter().copied())?;
        }
        if let Some(centroids) = &self.centroids {
            for mu in centroids {
                write_f32_slice(&mut out, mu.iter().copied())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 7];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let mut len_bytes = [0u8; 4];
        input.read_exact(&mut len_bytes)?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        input.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::data(format!("corrupt checkpoint header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint format version {}",
                header.format_version
            )));
        }
        let cfg = header.model_config.clone();
        cfg.validate()?;
        if header.class_names.is_empty() {
            return Err(Error::data("checkpoint has an empty class vocabulary"));
        }

        let mut params = NetworkParameters::zeros(&cfg)?;
        for linear in params.linears_mut() {
            let (rows, cols) = linear.weight.dim();
            let w = read_f32_vec(&mut input, rows * cols)?;
            linear.weight = Array2::from_shape_vec((rows, cols), w)
                .map_err(|e| Error::data(format!("bad tensor shape: {e}")))?;
            let b = read_f32_vec(&mut input, linear.bias.len())?;
            linear.bias = Array1::from_vec(b);
        }
        let centroids = if header.centroids_present {
            let mut list = Vec::with_capacity(cfg.n_heads);
            for _ in 0..cfg.n_heads {
                list.push(Array1::from_vec(read_f32_vec(&mut input, cfg.f_o)?));
            }
            Some(list)
        } else {
            None
        };

        Ok(Checkpoint {
            model_config: cfg,
            class_names: header.class_names,
            scaler: FeatureScaler {
                mean: header.scaler.mean,
                std: header.scaler.std,
                clamp_bound: header.scaler.clamp,
            },
            params,
            centroids,
        })
    }

    /// Round every tensor through f32, exactly as a save/load cycle would.
    /// Lets in-process evaluation match evaluation from a written file.
    pub fn quantized(mut self) -> Self {
        for linear in self.params.linears_mut() {
            linear.weight.mapv_inplace(|v| f64::from(v as f32));
            linear.bias.mapv_inplace(|v| f64::from(v as f32));
        }
        if let Some(centroids) = &mut self.centroids {
            for mu in centroids {
                mu.mapv_inplace(|v| f64::from(v as f32));
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_network;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            f: 3,
            d_model: 4,
            depth: 2,
            f_o: 2,
            n_heads: 2,
            dropout_rate: 0.1,
            seed: 9,
        };
        let params = init_network(&cfg).unwrap();
        Checkpoint {
            model_config: cfg,
            class_names: vec!["benign".into(), "attack1".into()],
            scaler: FeatureScaler {
                mean: vec![0.5, -1.0, 2.0],
                std: vec![1.0, 2.0, 0.5],
                clamp_bound: 10.0,
            },
            params,
            centroids: Some(vec![
                Array1::from_vec(vec![1.0, 0.0]),
                Array1::from_vec(vec![0.6, 0.8]),
            ]),
        }
    }

    #[test]
    fn round_trip_preserves_quantized_tensors_and_header() {
        let ck = sample_checkpoint().quantized();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.model_config, ck.model_config);
        assert_eq!(loaded.class_names, ck.class_names);
        assert_eq!(loaded.scaler, ck.scaler);
        assert_eq!(loaded.params, ck.params);
        assert_eq!(loaded.centroids, ck.centroids);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let ck = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        ck.save(&a).unwrap();
        ck.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn layout_starts_with_magic_and_header_length() {
        let ck = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..7], b"CLOSR1\n");
        let header_len = u32::from_le_bytes([bytes[7], bytes[8], bytes[9], bytes[10]]) as usize;
        let header: serde_json::Value =
            serde_json::from_slice(&bytes[11..11 + header_len]).unwrap();
        assert_eq!(header["format_version"], 1);
        assert_eq!(header["centroids_present"], true);
        assert_eq!(header["scaler"]["clamp"], 10.0);
        // Tensor payload: params + centroids as f32.
        let n_floats = ck.params.param_count() + 2 * 2;
        assert_eq!(bytes.len(), 11 + header_len + 4 * n_floats);
    }

    #[test]
    fn load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTCKPT\x00\x00\x00\x00").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
