use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::{Error, Result};

/// Checkpoint magic bytes.
pub const CHECKPOINT_MAGIC: &[u8; 6] = b"SIMNG1";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Named tensors of a model. Iteration order is lexicographic by name.
///
/// Trainable parameters have `requires_grad` set; batch-norm running
/// statistics live here too, as non-trainable buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    /// Seed the initializer was run with, if any.
    pub init_seed: Option<u64>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new(), init_seed: None }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Names of trainable tensors.
    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().filter(|(_, t)| t.requires_grad()).map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.tensors.values().filter(|t| t.requires_grad()).map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            init_seed: self.init_seed,
        }
    }

    /// Serializes every tensor as little-endian `f32`.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(Error::at_path(path))?;
        f.write_all(&self.to_checkpoint_bytes()).map_err(Error::at_path(path))?;
        Ok(())
    }

    /// Overwrites values from a checkpoint. Names and shapes must match exactly.
    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let records = parse_checkpoint(bytes)?;
        if records.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, model expects {}",
                records.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, data) in records {
            let t = self.get_mut(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "checkpoint tensor {name} has shape {shape:?}, model expects {:?}",
                    t.shape()
                )));
            }
            t.data_mut().iter_mut().zip(data).for_each(|(d, v)| *d = T::of(v as f64));
        }
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(Error::at_path(path))?;
        self.load_checkpoint_bytes(&bytes)
    }
}

/// A decoded checkpoint record.
pub type CheckpointRecord = (String, Vec<usize>, Vec<f32>);

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointRecord>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let ndim = r.take(1)?[0] as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint records".into()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
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

    fn store() -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.insert("b.weight", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap().with_grad()).unwrap();
        s.insert("a.running_mean", Tensor::new(vec![3], vec![0.5, 0.0, -1.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = store();
        assert!(s.insert("a.running_mean", Tensor::zeros(&[1])).is_err());
        let names: Vec<_> = s.iter().map(|(n, _)| n.to_owned()).collect();
        assert_eq!(names, ["a.running_mean", "b.weight"]);
        assert_eq!(s.trainable().collect::<Vec<_>>(), ["b.weight"]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = store();
        let bytes = s.to_checkpoint_bytes();
        assert_eq!(&bytes[..6], b"SIMNG1");
        assert_eq!(bytes[6], 1);
        let mut t = store();
        t.get_mut("b.weight").unwrap().data_mut().fill(0.0);
        t.load_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn checkpoint_rejects_bad_input() {
        let s = store();
        let mut bytes = s.to_checkpoint_bytes();
        let mut t = store();
        assert!(matches!(t.load_checkpoint_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(t.load_checkpoint_bytes(&bytes), Err(Error::Format(_))));

        let mut other = ParameterStore::<f32>::new();
        other.insert("b.weight", Tensor::zeros(&[4])).unwrap();
        other.insert("a.running_mean", Tensor::zeros(&[3])).unwrap();
        assert!(matches!(t.load_checkpoint_bytes(&other.to_checkpoint_bytes()), Err(Error::Contract(_))));
    }
}
