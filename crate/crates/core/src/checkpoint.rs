//! MRMQ checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MRMQ" | version: u32 | count: u32 |
//!   count × ( name_len: u32 | name: UTF-8 | rank: u32 | dims: rank × u64 | dtype: u8 | values )
//! ```
//!
//! `dtype` 0 is f32. Model hyper-parameters travel as `meta/model`
//! (`[layers, d_model, heads, d_ff, vocab, max_seq_len, num_classes]`) and,
//! for quantized models, `meta/bits` (`[weight, embedding, activation,
//! per_channel]`, 32 meaning unquantized).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{BitWidths, ModelConfig, QuantPlan, QuantizedModel, Transformer};
use crate::params::{ParamStore, META_PREFIX};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MRMQ";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const META_MODEL: &str = "meta/model";
const META_BITS: &str = "meta/bits";
const UNQUANTIZED: f32 = 32.0;

pub fn encode(store: &ParamStore<f32>, out: &mut impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(
        &u32::try_from(store.len())
            .map_err(|_| Error::Format("too many tensors".into()))?
            .to_le_bytes(),
    )?;
    for (name, t) in store.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        out.write_all(&[DTYPE_F32])?;
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

pub fn decode(r: &mut impl Read) -> Result<ParamStore<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an MRMQ checkpoint".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(Error::Format(format!("tensor name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("`{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(read_u64(r)?).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let mut dtype = [0u8];
        r.read_exact(&mut dtype).map_err(truncated)?;
        if dtype[0] != DTYPE_F32 {
            return Err(Error::Format(format!("`{name}` has unknown dtype {}", dtype[0])));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| Error::Format(format!("`{name}` is too large")))?;
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("`{name}`: {e}")))?;
        if store.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(store)
}

pub fn write_store(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<ParamStore<f32>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Io(std::io::Error::new(
            e.kind(),
            format!("checkpoint not found: {}", path.display()),
        )),
        _ => Error::Io(e),
    })?;
    decode(&mut BufReader::new(file))
}

fn config_tensor(c: &ModelConfig) -> Tensor<f32> {
    let v: Vec<f32> = c.as_array().iter().map(|&x| x as f32).collect();
    Tensor::new(vec![v.len()], v).expect("non-empty")
}

fn bits_tensor(plan: &QuantPlan) -> Tensor<f32> {
    let b = |v: Option<u32>| v.map_or(UNQUANTIZED, |x| x as f32);
    let bits = plan.bits;
    let v = vec![
        b(bits.weight),
        b(bits.embedding),
        b(bits.activation),
        f32::from(u8::from(plan.per_channel)),
    ];
    Tensor::new(vec![4], v).expect("non-empty")
}

/// A model loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    FullPrecision(Transformer<f32>),
    Quantized(QuantizedModel<f32>),
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::FullPrecision(m) => &m.config,
            Self::Quantized(m) => &m.config,
        }
    }

    pub fn to_store(&self) -> ParamStore<f32> {
        let (config, mut store) = match self {
            Self::FullPrecision(m) => (m.config, m.params.clone()),
            Self::Quantized(m) => (m.config, m.params.clone()),
        };
        store.insert(META_MODEL, config_tensor(&config));
        if let Self::Quantized(m) = self {
            store.insert(META_BITS, bits_tensor(&m.plan));
        }
        store
    }

    pub fn from_store(mut store: ParamStore<f32>) -> Result<Self> {
        let meta = store
            .remove(META_MODEL)
            .ok_or_else(|| Error::Format("checkpoint lacks model metadata".into()))?;
        let vals = meta.data();
        if vals.len() != 7 || vals.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
            return Err(Error::Format("malformed model metadata".into()));
        }
        let mut a = [0usize; 7];
        for (dst, &v) in a.iter_mut().zip(vals) {
            *dst = v as usize;
        }
        let config = ModelConfig::from_array(a);
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let bits = store.remove(META_BITS);
        if let Some(name) = store.names().find(|n| n.starts_with(META_PREFIX)) {
            return Err(Error::Format(format!("unknown metadata tensor `{name}`")));
        }
        let reference = Transformer::<f32>::zeros(config)?;
        for (name, t) in reference.params.iter() {
            match store.get(name) {
                Some(s) if s.shape() == t.shape() => {}
                Some(s) => {
                    return Err(Error::Format(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("checkpoint lacks `{name}`"))),
            }
        }
        match bits {
            None => Ok(Self::FullPrecision(Transformer { config, params: store })),
            Some(b) => {
                let v = b.data();
                if v.len() != 4 {
                    return Err(Error::Format("malformed bit-width metadata".into()));
                }
                let one = |x: f32| if x == UNQUANTIZED { None } else { Some(x as u32) };
                let plan = QuantPlan {
                    bits: BitWidths {
                        weight: one(v[0]),
                        embedding: one(v[1]),
                        activation: one(v[2]),
                    },
                    per_channel: v[3] != 0.0,
                };
                Ok(Self::Quantized(QuantizedModel {
                    config,
                    plan,
                    params: store,
                }))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_store(path, &self.to_store())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(read_store(path)?)
    }
}

pub fn save_fp(path: &Path, model: &Transformer<f32>) -> Result<()> {
    Checkpoint::FullPrecision(model.clone()).save(path)
}

pub fn save_quantized(path: &Path, model: &QuantizedModel<f32>) -> Result<()> {
    Checkpoint::Quantized(model.clone()).save(path)
}

pub fn load_fp(path: &Path) -> Result<Transformer<f32>> {
    match Checkpoint::load(path)? {
        Checkpoint::FullPrecision(m) => Ok(m),
        Checkpoint::Quantized(_) => Err(Error::Input(format!(
            "{} holds a quantized model, expected full precision",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TokenBatch;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab: 10,
            max_seq_len: 4,
            num_classes: 2,
        }
    }

    #[test]
    fn header_layout() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::new(vec![2], vec![1.0f32, -2.5]).unwrap());
        let mut buf = Vec::new();
        encode(&store, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"MRMQ");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
        assert_eq!(buf[16], b'a');
        assert_eq!(u32::from_le_bytes(buf[17..21].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[21..29].try_into().unwrap()), 2);
        assert_eq!(buf[29], 0);
        assert_eq!(f32::from_le_bytes(buf[34..38].try_into().unwrap()), -2.5);
        assert_eq!(buf.len(), 38);
        assert_eq!(decode(&mut buf.as_slice()).unwrap(), store);
    }

    #[test]
    fn models_round_trip() {
        let fp = Transformer::<f32>::new_random(small(), 1).unwrap();
        let cp = Checkpoint::FullPrecision(fp.clone());
        assert_eq!(Checkpoint::from_store(cp.to_store()).unwrap(), cp);
        let calib = TokenBatch::new(2, 4, vec![1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let mut plan = QuantPlan::new(BitWidths {
            weight: Some(4),
            embedding: None,
            activation: Some(8),
        });
        plan.per_channel = true;
        let q = QuantizedModel::from_fp(&fp, plan, &calib).unwrap();
        let cq = Checkpoint::Quantized(q);
        assert_eq!(Checkpoint::from_store(cq.to_store()).unwrap(), cq);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let fp = Transformer::<f32>::new_random(small(), 1).unwrap();
        let mut buf = Vec::new();
        encode(&Checkpoint::FullPrecision(fp).to_store(), &mut buf).unwrap();
        for cut in [0, 3, 10, buf.len() / 2, buf.len() - 1] {
            assert!(matches!(decode(&mut &buf[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut store = decode(&mut buf.as_slice()).unwrap();
        store.remove("head.bias");
        assert!(matches!(Checkpoint::from_store(store), Err(Error::Format(_))));
    }
}
