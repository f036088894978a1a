//! Dense row-major `f64` tensors.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::argument(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform entries in `[-scale, scale)`.
    pub fn random_uniform<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::argument(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::argument(format!(
                "{what}: expected shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::argument(format!(
                "add: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Fails on the first NaN or infinite entry.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Data {
                index: i,
                message: format!("{what}: non-finite value {}", self.data[i]),
            }),
        }
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::argument("concat of zero tensors"))?;
        if first.rank() != 4 {
            return Err(Error::argument("concat_channels expects NCHW tensors"));
        }
        let (n, h, w) = (first.dim(0), first.dim(2), first.dim(3));
        for p in parts {
            if p.rank() != 4 || p.dim(0) != n || p.dim(2) != h || p.dim(3) != w {
                return Err(Error::argument(format!(
                    "concat_channels: {:?} incompatible with {:?}",
                    p.shape, first.shape
                )));
            }
        }
        let c_total: usize = parts.iter().map(|p| p.dim(1)).sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c_total * plane);
        for b in 0..n {
            for p in parts {
                let c = p.dim(1);
                out.extend_from_slice(&p.data[b * c * plane..(b + 1) * c * plane]);
            }
        }
        Tensor::from_vec(&[n, c_total, h, w], out)
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if self.rank() != 4 || sizes.iter().sum::<usize>() != self.dim(1) {
            return Err(Error::argument(format!(
                "split_channels {sizes:?} of {:?}",
                self.shape
            )));
        }
        let (n, c_total, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let plane = h * w;
        let mut outs: Vec<Vec<f64>> = sizes
            .iter()
            .map(|c| Vec::with_capacity(n * c * plane))
            .collect();
        for b in 0..n {
            let mut offset = b * c_total * plane;
            for (out, &c) in outs.iter_mut().zip(sizes) {
                out.extend_from_slice(&self.data[offset..offset + c * plane]);
                offset += c * plane;
            }
        }
        outs.into_iter()
            .zip(sizes)
            .map(|(d, &c)| Tensor::from_vec(&[n, c, h, w], d))
            .collect()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}
