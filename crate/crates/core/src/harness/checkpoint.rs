//! Portable binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "COXQCKPT"
//! version u32      currently 1
//! count   u32      number of entries
//! entry*:
//!   name_len u16, name (UTF-8)
//!   dtype    u8    0 = f64, 1 = u64, 2 = u8
//!   ndim     u8,   dims u64 * ndim
//!   data     row-major, 8/8/1 bytes per element
//! ```
//!
//! Floats are stored bit-for-bit, so a round trip is exact.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoxqError, Result};

const MAGIC: &[u8; 8] = b"COXQCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::U64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

fn err(msg: impl Into<String>) -> CoxqError {
    CoxqError::Checkpoint(msg.into())
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    order: Vec<String>,
    entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch for {name}");
        if self.entries.insert(name.clone(), Tensor { shape, data }).is_none() {
            self.order.push(name);
        }
    }

    pub fn put_f64(&mut self, name: impl Into<String>, values: &[f64]) {
        self.insert(name, vec![values.len()], TensorData::F64(values.to_vec()));
    }

    pub fn put_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.insert(name, vec![], TensorData::F64(vec![v]));
    }

    pub fn put_u64(&mut self, name: impl Into<String>, values: &[u64]) {
        self.insert(name, vec![values.len()], TensorData::U64(values.to_vec()));
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.insert(name, vec![bytes.len()], TensorData::U8(bytes.to_vec()));
    }

    pub fn put_matrix(&mut self, name: impl Into<String>, m: &Array2<f64>) {
        let data = m.iter().copied().collect();
        self.insert(name, vec![m.nrows(), m.ncols()], TensorData::F64(data));
    }

    pub fn put_rng(&mut self, name: &str, rng: &ChaCha8Rng) {
        let pos = rng.get_word_pos();
        self.put_bytes(format!("{name}.seed"), &rng.get_seed());
        self.put_u64(
            format!("{name}.stream_pos"),
            &[rng.get_stream(), pos as u64, (pos >> 64) as u64],
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| err(format!("missing entry `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.get(name)?.data {
            TensorData::F64(v) => Ok(v),
            _ => Err(err(format!("entry `{name}` is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.get(name)?.data {
            TensorData::U64(v) => Ok(v),
            _ => Err(err(format!("entry `{name}` is not u64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.get(name)?.data {
            TensorData::U8(v) => Ok(v),
            _ => Err(err(format!("entry `{name}` is not u8"))),
        }
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        match self.f64s(name)? {
            [v] => Ok(*v),
            _ => Err(err(format!("entry `{name}` is not a scalar"))),
        }
    }

    pub fn u64_scalar(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [v] => Ok(*v),
            _ => Err(err(format!("entry `{name}` is not a scalar"))),
        }
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.get(name)?;
        let (r, c) = match t.shape[..] {
            [r, c] => (r, c),
            _ => return Err(err(format!("entry `{name}` is not a matrix"))),
        };
        Array2::from_shape_vec((r, c), self.f64s(name)?.to_vec()).map_err(|e| err(e.to_string()))
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        Ok(Array1::from(self.f64s(name)?.to_vec()))
    }

    pub fn rng(&self, name: &str) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let seed: [u8; 32] = self
            .bytes(&format!("{name}.seed"))?
            .try_into()
            .map_err(|_| err(format!("bad rng seed for `{name}`")))?;
        let sp = self.u64s(&format!("{name}.stream_pos"))?;
        if sp.len() != 3 {
            return Err(err(format!("bad rng position for `{name}`")));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(sp[0]);
        rng.set_word_pos(sp[1] as u128 | (sp[2] as u128) << 64);
        Ok(rng)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.order.len() as u32).to_le_bytes());
        for name in &self.order {
            let t = &self.entries[name];
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dtype: u8 = match t.data {
                TensorData::F64(_) => 0,
                TensorData::U64(_) => 1,
                TensorData::U8(_) => 2,
            };
            out.push(dtype);
            out.push(t.shape.len() as u8);
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(err("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| err("entry name is not UTF-8"))?
                .to_string();
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => TensorData::F64((0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<_>>()?),
                1 => TensorData::U64((0..n).map(|_| r.u64()).collect::<Result<_>>()?),
                2 => TensorData::U8(r.take(n)?.to_vec()),
                other => return Err(err(format!("unknown dtype {other} for `{name}`"))),
            };
            ck.insert(name, shape, data);
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes after last entry"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::metrics::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| err("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
