use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSPC";

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named learnable tensors in a fixed insertion order.
///
/// The order is part of the checkpoint format and of every gradient vector
/// returned by [`crate::numerics::Tape::backward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Gradients aligned with a [`ParamStore`]'s order.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
    /// Parameters that did not reach the loss; their gradient is zero.
    pub untouched: Vec<String>,
}

impl ParamGrads {
    pub(crate) fn new(grads: Vec<Tensor>, untouched: Vec<String>) -> Self {
        Self { grads, untouched }
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.grads[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a parameter; names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index_of(name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name:?}")));
        }
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable: true,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name:?} is {:?}, new value {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.iter().any(|p| p.name == name && p.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Plain SGD: `θ ← θ − lr·g` on every trainable parameter.
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f64) -> Result<()> {
        if grads.grads.len() != self.params.len() {
            return Err(Error::Shape("gradient count does not match parameter count".into()));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if !p.trainable {
                continue;
            }
            let data = p.value.data().iter().zip(g.data()).map(|(v, g)| v - lr * g).collect();
            p.value = Tensor::new(p.value.shape().to_vec(), data)?;
        }
        Ok(())
    }

    /// Serialize as `DSPC`, u32 count, then per parameter: u32 name length,
    /// UTF-8 name, u8 trainable flag, u32 rank, u32 extents, f64 values. All
    /// integers and floats little-endian.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&[p.trainable as u8])?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &e in p.value.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { buf: &bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let count = cur.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let trainable = cur.take(1)?[0] != 0;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = Tensor::new_finite(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.insert(&name, value)?;
            store.set_trainable(&name, trainable)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.0, 1e-300]).unwrap())
            .unwrap();
        s.insert("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        s.set_trainable("b", false).unwrap();
        s
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let s = store();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(&buf[..]).unwrap();
        assert_eq!(back, s);
        assert!(!back.is_trainable("b"));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut buf = Vec::new();
        store().write_to(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(ParamStore::read_from(&buf[..]), Err(Error::Checkpoint(_))));
        buf[0] = b'X';
        assert!(ParamStore::read_from(&buf[..]).is_err());
    }

    #[test]
    fn sgd_skips_frozen_parameters() {
        let mut s = store();
        let g = ParamGrads::new(
            vec![Tensor::full(&[2, 2], 1.0), Tensor::full(&[3], 1.0)],
            vec![],
        );
        s.sgd_step(&g, 0.5).unwrap();
        assert_eq!(s.get("a").unwrap().data()[0], 0.5);
        assert_eq!(s.get("b").unwrap().data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.insert("a", Tensor::scalar(0.0)).is_err());
    }
}
