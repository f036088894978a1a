//! `KPRW` parameter files: named f32 tensors.
//!
//! Layout (little endian): magic `KPRW`, u32 version, u32 tensor count, then
//! per tensor a u16 name length, the UTF-8 name, a u8 rank, rank u32 dims
//! and the f32 values in row-major order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::{Entry, Visit};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KPRW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: impl IntoIterator<Item = f64>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: shape.iter().map(|&d| d as u32).collect(),
            data: data.into_iter().map(|v| v as f32).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Scalar or vector entry as f64 values.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        self.get(name)
            .map(|t| t.data.iter().map(|&v| f64::from(v)).collect())
            .ok_or_else(|| Error::format(format!("checkpoint has no entry `{name}`")))
    }

    /// Every parameter and buffer of `model`, named under `prefix`.
    pub fn capture<M: Visit + ?Sized>(&mut self, prefix: &str, model: &mut M) {
        model.visit(prefix, &mut |name, e| {
            let t = match e {
                Entry::Param(p) => &p.value,
                Entry::Buffer(b) => b,
            };
            self.push(name, t.shape(), t.data().iter().copied());
        });
    }

    /// Overwrites `model`'s state with the stored entries; every entry the
    /// model expects must be present with a matching shape.
    pub fn restore<M: Visit + ?Sized>(&self, prefix: &str, model: &mut M) -> Result<()> {
        let index: BTreeMap<&str, &NamedTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut failure = None;
        model.visit(prefix, &mut |name, e| {
            if failure.is_some() {
                return;
            }
            let target = match e {
                Entry::Param(p) => &mut p.value,
                Entry::Buffer(b) => b,
            };
            match index.get(name) {
                None => failure = Some(Error::format(format!("checkpoint is missing `{name}`"))),
                Some(t) if t.shape.iter().map(|&d| d as usize).ne(target.shape().iter().copied()) => {
                    failure = Some(Error::format(format!(
                        "`{name}` has shape {:?}, model expects {:?}",
                        t.shape,
                        target.shape()
                    )))
                }
                Some(t) => {
                    for (dst, &src) in target.data_mut().iter_mut().zip(&t.data) {
                        *dst = f64::from(src);
                    }
                }
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::argument(format!("tensor name `{}` is too long", t.name)))?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| Error::argument(format!("tensor `{}` has too many dims", t.name)))?;
            let count: usize = t.shape.iter().map(|&d| d as usize).product();
            if count != t.data.len() {
                return Err(Error::argument(format!(
                    "tensor `{}`: shape {:?} does not hold {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for d in &t.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("not a KPRW file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported KPRW version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format("tensor name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| Error::format(format!("`{name}`: shape overflows")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::kitti_io::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| e.context(path.display().to_string()))
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
            .ok_or_else(|| Error::format(format!("truncated KPRW data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Tensor view of a checkpoint entry.
pub fn to_tensor(t: &NamedTensor) -> Result<Tensor> {
    let shape: Vec<usize> = t.shape.iter().map(|&d| d as usize).collect();
    Tensor::from_vec(&shape, t.data.iter().map(|&v| f64::from(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kpconv::{generate_kernel_points, KPConv};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::default();
        c.push("a", &[2], [1.0, 2.0]);
        let b = c.encode().unwrap();
        assert_eq!(&b[..4], b"KPRW");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 1);
        assert_eq!(b[14], b'a');
        assert_eq!(b[15], 1);
        assert_eq!(b.len(), 12 + 2 + 1 + 1 + 4 + 8);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let mut c = Checkpoint::default();
        c.push("w", &[3], [1.0, 2.0, 3.0]);
        let b = c.encode().unwrap();
        assert!(matches!(Checkpoint::decode(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(Error::Format(_))));
        let mut magic = b;
        magic[0] = b'X';
        assert!(matches!(Checkpoint::decode(&magic), Err(Error::Format(_))));
    }

    #[test]
    fn kpconv_state_survives_capture_and_restore() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = generate_kernel_points(5, 0.6, 2).unwrap();
        let mut a = KPConv::new(d, 3, 4, &mut rng).unwrap();
        let mut c = Checkpoint::default();
        c.capture("kp", &mut a);
        let c = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        let d2 = generate_kernel_points(5, 0.6, 9).unwrap();
        let mut b = KPConv::new(d2, 3, 4, &mut rng).unwrap();
        c.restore("kp", &mut b).unwrap();
        assert_eq!(a.disposition.positions, b.disposition.positions);
        for (x, y) in a.weights.value.data().iter().zip(b.weights.value.data()) {
            assert_eq!(*x as f32, *y as f32);
        }
        let mut wrong = KPConv::new(generate_kernel_points(5, 0.6, 2).unwrap(), 3, 5, &mut rng).unwrap();
        assert!(c.restore("kp", &mut wrong).is_err());
    }
}
