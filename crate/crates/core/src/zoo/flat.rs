//! `DCRM` flat model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DCRM"                      4 bytes magic
//! version                     u32 (= 1)
//! config                      8 x u32: n_layers, n_heads, d_model, d_head,
//!                             vocab_size, max_seq_len, use_layer_norm, use_mlp
//! tensor count                u32
//! per tensor:
//!   name length               u16
//!   name                      UTF-8 bytes
//!   rank                      u8
//!   dims                      rank x u32
//!   values                    prod(dims) x f32
//! ```
//!
//! Tensor names: `embed`, `pos`, `L{l}.H{h}.wq|wk|wv`, `L{l}.wo`, `unembed`,
//! `out_bias`, plus `L{l}.ln.g|b` and `ln_f.g|b` with layer norm and
//! `L{l}.mlp.w1|w2` with an MLP.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;
use crate::transformer::{
    HeadWeights, LayerNormParams, LayerWeights, MlpWeights, Model, ModelConfig, ModelError,
    ModelWeights,
};

pub const MAGIC: [u8; 4] = *b"DCRM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FlatFormatError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected \"DCRM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}, expected {VERSION}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("tensor `{name}` has dims {actual:?}, config requires {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("tensor `{0}` required by the config is missing")]
    MissingTensor(String),
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("tensor `{0}` appears twice")]
    DuplicateTensor(String),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("header field `{field}` = {value} is invalid")]
    InvalidHeader { field: &'static str, value: u32 },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("tensor `{0}` holds a non-finite value")]
    NonFinite(String),
    #[error("tensor `{0}` is too large for the format")]
    TooLarge(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, FlatFormatError>;

fn named_tensors(model: &Model) -> Vec<(String, &Tensor)> {
    let w = model.weights();
    let mut out: Vec<(String, &Tensor)> = vec![
        ("embed".into(), &w.token_embedding),
        ("pos".into(), &w.positional_encoding),
    ];
    for (l, layer) in w.layers.iter().enumerate() {
        for (h, hw) in layer.heads.iter().enumerate() {
            out.push((format!("L{l}.H{h}.wq"), &hw.wq));
            out.push((format!("L{l}.H{h}.wk"), &hw.wk));
            out.push((format!("L{l}.H{h}.wv"), &hw.wv));
        }
        out.push((format!("L{l}.wo"), &layer.wo));
        if let Some(norm) = &layer.norm {
            out.push((format!("L{l}.ln.g"), &norm.gain));
            out.push((format!("L{l}.ln.b"), &norm.bias));
        }
        if let Some(mlp) = &layer.mlp {
            out.push((format!("L{l}.mlp.w1"), &mlp.w1));
            out.push((format!("L{l}.mlp.w2"), &mlp.w2));
        }
    }
    if let Some(norm) = &w.final_norm {
        out.push(("ln_f.g".into(), &norm.gain));
        out.push(("ln_f.b".into(), &norm.bias));
    }
    out.push(("unembed".into(), &w.unembedding));
    out.push(("out_bias".into(), &w.output_bias));
    out
}

fn u32_field(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| FlatFormatError::TooLarge(name.to_string()))
}

/// Serialises a model. Values are narrowed to `f32`; zoo-built models hold
/// only `f32`-representable values, so their round trip is exact.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let c = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, v) in [
        ("n_layers", c.n_layers),
        ("n_heads", c.n_heads),
        ("d_model", c.d_model),
        ("d_head", c.d_head),
        ("vocab_size", c.vocab_size),
        ("max_seq_len", c.max_seq_len),
        ("use_layer_norm", c.use_layer_norm as usize),
        ("use_mlp", c.use_mlp as usize),
    ] {
        buf.extend_from_slice(&u32_field(name, v)?.to_le_bytes());
    }
    let tensors = named_tensors(model);
    buf.extend_from_slice(&u32_field("tensor count", tensors.len())?.to_le_bytes());
    for (name, t) in tensors {
        let name_len =
            u16::try_from(name.len()).map_err(|_| FlatFormatError::TooLarge(name.clone()))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len()).map_err(|_| FlatFormatError::TooLarge(name.clone()))?;
        buf.push(rank);
        for &d in t.shape() {
            buf.extend_from_slice(&u32_field(&name, d)?.to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_flat_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.offset;
        if n > available {
            return Err(FlatFormatError::Truncated {
                offset: self.offset,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

struct RawTensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn header_bool(field: &'static str, value: u32) -> Result<bool> {
    match value {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(FlatFormatError::InvalidHeader { field, value }),
    }
}

fn read_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let mut f = [0u32; 8];
    for v in &mut f {
        *v = r.u32()?;
    }
    Ok(ModelConfig {
        n_layers: f[0] as usize,
        n_heads: f[1] as usize,
        d_model: f[2] as usize,
        d_head: f[3] as usize,
        vocab_size: f[4] as usize,
        max_seq_len: f[5] as usize,
        use_layer_norm: header_bool("use_layer_norm", f[6])?,
        use_mlp: header_bool("use_mlp", f[7])?,
    })
}

struct TensorTable(BTreeMap<String, RawTensor>);

impl TensorTable {
    fn take(&mut self, name: &str, expected: &[usize]) -> Result<Tensor> {
        let raw = self
            .0
            .remove(name)
            .ok_or_else(|| FlatFormatError::MissingTensor(name.to_string()))?;
        if raw.dims != expected {
            return Err(FlatFormatError::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                actual: raw.dims,
            });
        }
        Tensor::new(raw.dims, raw.values).map_err(|_| FlatFormatError::NonFinite(name.to_string()))
    }

    /// Like `take`, but the second dimension is free (MLP hidden width).
    fn take_with_free_cols(&mut self, name: &str, rows: usize) -> Result<Tensor> {
        let cols = match self.0.get(name) {
            Some(raw) if raw.dims.len() == 2 && raw.dims[1] > 0 => raw.dims[1],
            Some(raw) => {
                return Err(FlatFormatError::ShapeMismatch {
                    name: name.to_string(),
                    expected: vec![rows, 0],
                    actual: raw.dims.clone(),
                })
            }
            None => return Err(FlatFormatError::MissingTensor(name.to_string())),
        };
        self.take(name, &[rows, cols])
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gain: self.take(&format!("{prefix}.g"), &[d])?,
            bias: self.take(&format!("{prefix}.b"), &[d])?,
        })
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, offset: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FlatFormatError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FlatFormatError::UnsupportedVersion(version));
    }
    let config = read_config(&mut r)?;
    config.validate()?;

    let count = r.u32()?;
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FlatFormatError::InvalidName)?
            .to_string();
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FlatFormatError::TooLarge(name.clone()))?;
        let payload = r.take(n)?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if table
            .insert(name.clone(), RawTensor { dims, values })
            .is_some()
        {
            return Err(FlatFormatError::DuplicateTensor(name));
        }
    }
    let trailing = bytes.len() - r.offset;
    if trailing > 0 {
        return Err(FlatFormatError::TrailingBytes(trailing));
    }

    let ModelConfig {
        d_model: d,
        d_head: dk,
        vocab_size: v,
        n_heads,
        ..
    } = config;
    let mut t = TensorTable(table);
    let token_embedding = t.take("embed", &[v, d])?;
    let positional_encoding = t.take("pos", &[config.max_seq_len, d])?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            heads.push(HeadWeights {
                wq: t.take(&format!("L{l}.H{h}.wq"), &[d, dk])?,
                wk: t.take(&format!("L{l}.H{h}.wk"), &[d, dk])?,
                wv: t.take(&format!("L{l}.H{h}.wv"), &[d, dk])?,
            });
        }
        let wo = t.take(&format!("L{l}.wo"), &[n_heads * dk, d])?;
        let norm = if config.use_layer_norm {
            Some(t.norm(&format!("L{l}.ln"), d)?)
        } else {
            None
        };
        let mlp = if config.use_mlp {
            let w1 = t.take_with_free_cols(&format!("L{l}.mlp.w1"), d)?;
            let hidden = w1.shape()[1];
            let w2 = t.take(&format!("L{l}.mlp.w2"), &[hidden, d])?;
            Some(MlpWeights { w1, w2 })
        } else {
            None
        };
        layers.push(LayerWeights {
            heads,
            wo,
            norm,
            mlp,
        });
    }
    let final_norm = if config.use_layer_norm {
        Some(t.norm("ln_f", d)?)
    } else {
        None
    };
    let unembedding = t.take("unembed", &[d, v])?;
    let output_bias = t.take("out_bias", &[v])?;
    if let Some(name) = t.0.keys().next() {
        return Err(FlatFormatError::UnknownTensor(name.clone()));
    }

    Ok(Model::new(
        config,
        ModelWeights {
            token_embedding,
            positional_encoding,
            layers,
            final_norm,
            unembedding,
            output_bias,
        },
    )?)
}

pub fn load_flat_model(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}
