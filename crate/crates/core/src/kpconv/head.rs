use rand::Rng;

use crate::error::{Error, Result};
use crate::kitti_io::NUM_CLASSES;
use crate::net2d::layers::{BatchNorm, Linear, Relu};
use crate::net2d::ops::Mode;
use crate::param::{join, Entry, Visit};
use crate::tensor::Tensor;

/// Batch norm over points, ReLU, then an affine map to class logits.
#[derive(Debug, Clone)]
pub struct PointHead {
    pub bn: BatchNorm,
    relu: Relu,
    pub classifier: Linear,
}

impl PointHead {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        Self::with_classes(channels, NUM_CLASSES, rng)
    }

    pub fn with_classes<R: Rng>(channels: usize, classes: usize, rng: &mut R) -> Self {
        PointHead {
            bn: BatchNorm::new(channels),
            relu: Relu::default(),
            classifier: Linear::new(channels, classes, rng),
        }
    }

    /// `[N, C] -> [N, classes]`; batch statistics span every row.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.rank() != 2 {
            return Err(Error::argument(format!("point head expects [N, C], got {:?}", x.shape())));
        }
        let (n, c) = (x.dim(0), x.dim(1));
        let y = self.bn.forward(&x.clone().reshape(&[n, c, 1, 1])?, mode)?;
        let y = self.relu.forward(&y.reshape(&[n, c])?);
        self.classifier.forward(&y)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        let g = self.classifier.backward(grad_logits)?;
        let g = self.relu.backward(&g)?;
        let (n, c) = (g.dim(0), g.dim(1));
        let g = self.bn.backward(&g.reshape(&[n, c, 1, 1])?)?;
        g.reshape(&[n, c])
    }
}

impl Visit for PointHead {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_>)) {
        self.bn.visit(&join(prefix, "bn"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }
}
