//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    "FATMLP\0\0"            8 bytes
//! version  u32                      currently 1
//! scalar   u8                       byte width of every stored real (4 or 8)
//! layers   u32
//! per layer:
//!   fan_in u32, fan_out u32
//!   activation u8 (0 identity, 1 relu, 2 leaky relu) + slope f64
//!   has_norm u8
//!   weight  fan_in*fan_out reals, row-major
//!   bias    fan_out reals
//!   if has_norm: gamma, beta, running_mean, running_var (fan_out reals each),
//!                momentum f64, eps f64
//! ```
//!
//! Reals are written at the model's native width so a save/load round trip is
//! bit-exact.

use std::path::Path;

use crate::error::{FatError, Result};
use crate::matrix::DenseMatrix;
use crate::nn::model::{Activation, BatchNorm, Layer, MlpModel};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"FATMLP\0\0";
const VERSION: u32 = 1;

pub fn encode<T: Scalar>(model: &MlpModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::TAG);
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        out.extend_from_slice(&(layer.fan_in() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.fan_out() as u32).to_le_bytes());
        let (tag, slope) = match layer.activation {
            Activation::Identity => (0u8, 0.0),
            Activation::Relu => (1, 0.0),
            Activation::LeakyRelu(s) => (2, s),
        };
        out.push(tag);
        out.extend_from_slice(&slope.to_le_bytes());
        out.push(layer.norm.is_some() as u8);
        let mut put = |v: &[T]| v.iter().for_each(|x| x.write_le(&mut out));
        put(layer.weight.as_slice());
        put(&layer.bias);
        if let Some(bn) = &layer.norm {
            put(&bn.gamma);
            put(&bn.beta);
            put(&bn.running_mean);
            put(&bn.running_var);
            out.extend_from_slice(&bn.momentum.to_le_bytes());
            out.extend_from_slice(&bn.eps.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FatError::Parse {
                field: field.to_string(),
                detail: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn reals<T: Scalar>(&mut self, n: usize, field: &str) -> Result<Vec<T>> {
        let raw = self.take(n * T::BYTES, field)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<MlpModel<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(FatError::Parse {
            field: "magic".into(),
            detail: "not a model checkpoint".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FatError::Parse {
            field: "version".into(),
            detail: format!("unsupported version {version}"),
        });
    }
    let tag = r.u8("scalar")?;
    if tag != T::TAG {
        return Err(FatError::Parse {
            field: "scalar".into(),
            detail: format!("checkpoint stores {tag}-byte reals, expected {}", T::TAG),
        });
    }
    let n_layers = r.u32("layers")? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for i in 0..n_layers {
        let fan_in = r.u32("fan_in")? as usize;
        let fan_out = r.u32("fan_out")? as usize;
        let act_tag = r.u8("activation")?;
        let slope = r.f64("activation slope")?;
        let activation = match act_tag {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::LeakyRelu(slope),
            t => {
                return Err(FatError::Parse {
                    field: "activation".into(),
                    detail: format!("unknown tag {t} in layer {i}"),
                })
            }
        };
        let has_norm = r.u8("has_norm")? != 0;
        let weight = DenseMatrix::new(fan_in, fan_out, r.reals(fan_in * fan_out, "weight")?)?;
        let bias = r.reals(fan_out, "bias")?;
        let norm = if has_norm {
            Some(BatchNorm {
                gamma: r.reals(fan_out, "gamma")?,
                beta: r.reals(fan_out, "beta")?,
                running_mean: r.reals(fan_out, "running_mean")?,
                running_var: r.reals(fan_out, "running_var")?,
                momentum: r.f64("momentum")?,
                eps: r.f64("eps")?,
            })
        } else {
            None
        };
        layers.push(Layer {
            weight,
            bias,
            activation,
            norm,
        });
    }
    if r.pos != bytes.len() {
        return Err(FatError::Parse {
            field: "trailer".into(),
            detail: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    MlpModel::new(layers)
}

pub fn save<T: Scalar>(model: &MlpModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| FatError::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<MlpModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| FatError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{he_init, he_init_with};

    fn bits(m: &MlpModel<f64>) -> Vec<u64> {
        m.params_flat().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut m: MlpModel<f64> = he_init_with(&[3, 5, 4, 2], Activation::LeakyRelu(0.1), true, 9).unwrap();
        m.layers_mut()[0].norm.as_mut().unwrap().running_var[2] = 0.123456789;
        let back: MlpModel<f64> = decode(&encode(&m)).unwrap();
        assert_eq!(back, m);
        assert_eq!(bits(&back), bits(&m));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&m, &p).unwrap();
        assert_eq!(load::<f64>(&p).unwrap(), m);
    }

    #[test]
    fn rejects_corruption() {
        let m: MlpModel<f64> = he_init(&[2, 3, 2], Activation::Relu, 1).unwrap();
        let bytes = encode(&m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f64>(&bad), Err(FatError::Parse { field, .. }) if field == "magic"));
        assert!(decode::<f64>(&bytes[..bytes.len() - 3]).is_err());
        assert!(matches!(decode::<f32>(&bytes), Err(FatError::Parse { field, .. }) if field == "scalar"));
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode::<f64>(&long).is_err());
    }

    #[test]
    fn f32_models_roundtrip() {
        let m: MlpModel<f32> = he_init(&[2, 3, 2], Activation::Relu, 1).unwrap();
        assert_eq!(decode::<f32>(&encode(&m)).unwrap(), m);
    }
}
