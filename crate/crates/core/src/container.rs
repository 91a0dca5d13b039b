//! Binary container for named multidimensional arrays.
//!
//! Every persisted artifact (models, sequences, checkpoints, face maps) uses
//! this one layout. All integers and payloads are little-endian.
//!
//! ```text
//! magic      4 bytes  "HGLA"
//! version    u8       1
//! n_meta     u32
//!   key      u16 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! n_arrays   u32
//!   name     u16 length + UTF-8 bytes
//!   dtype    u8       0 = float32, 1 = int32
//!   ndim     u8
//!   dims     ndim × u32
//!   payload  prod(dims) × 4 bytes
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HGLA";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    meta: Vec<(String, String)>,
    arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Format(format!("missing metadata key `{key}`")))
    }

    pub fn meta_entries(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    fn insert(&mut self, array: NamedArray) -> Result<()> {
        let n: usize = array.shape.iter().product();
        if n != array.data.len() {
            return Err(Error::Shape(format!(
                "array `{}`: shape {:?} does not hold {} values",
                array.name,
                array.shape,
                array.data.len()
            )));
        }
        if array.name.len() > u16::MAX as usize || array.shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!(
                "array `{}` header too large",
                array.name
            )));
        }
        match self.arrays.iter_mut().find(|a| a.name == array.name) {
            Some(slot) => *slot = array,
            None => self.arrays.push(array),
        }
        Ok(())
    }

    pub fn put_f32(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<f32>,
    ) -> Result<()> {
        self.insert(NamedArray {
            name: name.into(),
            shape: shape.to_vec(),
            data: ArrayData::F32(data),
        })
    }

    pub fn put_i32(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<i32>,
    ) -> Result<()> {
        self.insert(NamedArray {
            name: name.into(),
            shape: shape.to_vec(),
            data: ArrayData::I32(data),
        })
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.put_f32(name, t.shape(), t.data().to_vec())
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }

    pub fn get_f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F32(v) => Ok((&a.shape, v)),
            ArrayData::I32(_) => Err(Error::Format(format!(
                "array `{name}` is int32, expected float32"
            ))),
        }
    }

    pub fn get_i32(&self, name: &str) -> Result<(&[usize], &[i32])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::I32(v) => Ok((&a.shape, v)),
            ArrayData::F32(_) => Err(Error::Format(format!(
                "array `{name}` is float32, expected int32"
            ))),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let (shape, data) = self.get_f32(name)?;
        Tensor::from_vec(shape, data.to_vec())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            w.write_all(&(k.len() as u16).to_le_bytes())?;
            w.write_all(k.as_bytes())?;
            w.write_all(&(v.len() as u32).to_le_bytes())?;
            w.write_all(v.as_bytes())?;
        }
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for a in &self.arrays {
            w.write_all(&(a.name.len() as u16).to_le_bytes())?;
            w.write_all(a.name.as_bytes())?;
            let dtype = match a.data {
                ArrayData::F32(_) => 0u8,
                ArrayData::I32(_) => 1u8,
            };
            w.write_all(&[dtype, a.shape.len() as u8])?;
            for &d in &a.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(a.data.len() * 4);
            match &a.data {
                ArrayData::F32(v) => v
                    .iter()
                    .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I32(v) => v
                    .iter()
                    .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not an array container".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}"
            )));
        }
        let mut c = Container::new();
        for _ in 0..r.u32()? {
            let klen = r.u16()? as usize;
            let k = r.string(klen)?;
            let vlen = r.u32()? as usize;
            let v = r.string(vlen)?;
            c.meta.push((k, v));
        }
        for _ in 0..r.u32()? {
            let nlen = r.u16()? as usize;
            let name = r.string(nlen)?;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format("array too large".into()))?,
            )?;
            let words = raw.chunks_exact(4).map(|b| [b[0], b[1], b[2], b[3]]);
            let data = match dtype {
                0 => ArrayData::F32(words.map(f32::from_le_bytes).collect()),
                1 => ArrayData::I32(words.map(i32::from_le_bytes).collect()),
                d => return Err(Error::Format(format!("unknown dtype tag {d} for `{name}`"))),
            };
            c.arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last array",
                bytes.len() - r.pos
            )));
        }
        Ok(c)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("read failed: {e}")))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("invalid UTF-8 in header".into()))
    }
}
