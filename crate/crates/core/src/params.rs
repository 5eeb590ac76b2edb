//! Named parameter storage and the versioned tensor archive used for
//! checkpoints and temporal-state snapshots.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the network a parameter belongs to; drives the freeze policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Spatial convolution weights of the backbone (frozen early in training).
    Backbone,
    /// Temporal calibration networks living inside the backbone.
    Calibration,
    /// Correlation adjust, transformer and heads.
    Head,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        self.groups.push(group);
        ParamId(self.tensors.len() - 1)
    }

    /// He-normal initialised weight with the given fan-in.
    pub fn add_he<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.add(name, group, Tensor::randn(shape, std, rng))
    }

    /// Normal initialised weight with `std = sqrt(1 / fan_in)`.
    pub fn add_lecun<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        self.add(name, group, Tensor::randn(shape, std, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            a.push(n.clone(), t.clone());
        }
        a
    }

    /// Overwrites every parameter from `archive`, matching by name and shape.
    pub fn load_archive(&mut self, archive: &TensorArchive) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = archive
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"TTCK";
pub const ARCHIVE_VERSION: u32 = 1;

/// Ordered list of named tensors with a fixed little-endian binary encoding:
///
/// ```text
/// magic "TTCK" | version u32 | count u32 |
///   count x ( name_len u32 | name utf8 | rank u32 | dims u64 x rank | data f64 x prod(dims) )
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { entries })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn archive_roundtrip(vals in proptest::collection::vec(-1e6f64..1e6, 1..40), split in 1usize..5) {
            let n = vals.len();
            let mut a = TensorArchive::new();
            a.push("w", Tensor::new(vec![n], vals.clone()).unwrap());
            a.push("scalar.b", Tensor::scalar(split as f64));
            let back = TensorArchive::from_bytes(&a.to_bytes()).unwrap();
            prop_assert_eq!(back, a);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(TensorArchive::from_bytes(b"nope").is_err());
        let mut bytes = TensorArchive::new().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            TensorArchive::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut s = ParamStore::new();
        s.add("a", ParamGroup::Head, Tensor::zeros(&[2]));
        let mut a = TensorArchive::new();
        a.push("a", Tensor::zeros(&[3]));
        assert!(s.load_archive(&a).is_err());
        let mut b = TensorArchive::new();
        b.push("a", Tensor::ones(&[2]));
        s.load_archive(&b).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[1.0, 1.0]);
    }
}
