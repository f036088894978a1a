//! Atrous spatial pyramid pooling.

use rand::Rng;

use super::layers::{Conv2d, ConvBnRelu, Relu};
use super::ops::{self, ConvGeometry, Mode};
use crate::error::{Error, Result};
use crate::param::{join, Entry, Visit};
use crate::tensor::Tensor;

/// Parallel dilated 3x3 branches plus an image-pooling branch, concatenated
/// and projected by a 1x1 convolution.
#[derive(Debug, Clone)]
pub struct Aspp {
    pub rates: Vec<usize>,
    pub branches: Vec<ConvBnRelu>,
    pub pool_conv: Conv2d,
    pool_relu: Relu,
    pub project: ConvBnRelu,
    cache: Option<AsppCache>,
}

#[derive(Debug, Clone)]
struct AsppCache {
    input_shape: Vec<usize>,
    split: Vec<usize>,
}

impl Aspp {
    pub fn new<R: Rng>(c_in: usize, channels: usize, rates: &[usize], rng: &mut R) -> Result<Self> {
        if rates.is_empty() || rates.contains(&0) {
            return Err(Error::argument("ASPP needs at least one positive rate"));
        }
        let branches = rates
            .iter()
            .map(|&r| ConvBnRelu::new(c_in, channels, 3, ConvGeometry::same(3, r, 1), rng))
            .collect();
        Ok(Aspp {
            rates: rates.to_vec(),
            branches,
            pool_conv: Conv2d::new(c_in, channels, 1, ConvGeometry::same(1, 1, 1), true, rng),
            pool_relu: Relu::default(),
            project: ConvBnRelu::new(
                channels * (rates.len() + 1),
                channels,
                1,
                ConvGeometry::same(1, 1, 1),
                rng,
            ),
            cache: None,
        })
    }

    /// Outputs of every branch before concatenation, pooling branch last and
    /// already broadcast to the input's spatial size.
    pub fn branch_outputs(&mut self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let (h, w) = (x.dim(2), x.dim(3));
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        for b in &mut self.branches {
            outs.push(b.forward(x, mode)?);
        }
        let pooled = ops::global_avg_pool(x);
        let p = self.pool_conv.forward(&pooled)?;
        let p = self.pool_relu.forward(&p);
        outs.push(ops::broadcast_spatial(&p, h, w));
        Ok(outs)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let outs = self.branch_outputs(x, mode)?;
        let split = outs.iter().map(|t| t.dim(1)).collect();
        let refs: Vec<&Tensor> = outs.iter().collect();
        let cat = Tensor::concat_channels(&refs)?;
        self.cache = Some(AsppCache {
            input_shape: x.shape().to_vec(),
            split,
        });
        self.project.forward(&cat, mode)
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::state("aspp: backward without forward"))?;
        let g_cat = self.project.backward(grad_y)?;
        let mut parts = g_cat.split_channels(&cache.split)?;
        let g_pool = parts.pop().expect("pool branch");
        let g = ops::broadcast_spatial_backward(&g_pool);
        let g = self.pool_relu.backward(&g)?;
        let g = self.pool_conv.backward(&g)?;
        let mut gx = ops::global_avg_pool_backward(&g, &cache.input_shape);
        for (b, gp) in self.branches.iter_mut().zip(&parts) {
            gx.add_assign(&b.backward(gp)?)?;
        }
        Ok(gx)
    }
}

impl Visit for Aspp {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("branch{i}")), f);
        }
        self.pool_conv.visit(&join(prefix, "pool"), f);
        self.project.visit(&join(prefix, "project"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_rates_match_plain_conv_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut aspp = Aspp::new(3, 4, &[1, 1], &mut rng).unwrap();
        let x = Tensor::random_uniform(&[2, 3, 5, 6], 1.0, &mut rng);
        let outs = aspp.branch_outputs(&x, Mode::Train).unwrap();
        assert_eq!(outs.len(), 3);
        for (i, b) in aspp.branches.iter().enumerate() {
            let mut plain = ConvBnRelu::new(3, 4, 3, ConvGeometry::same(3, 1, 1), &mut rng);
            plain.conv.weight.value = b.conv.weight.value.clone();
            let expect = plain.forward(&x, Mode::Train).unwrap();
            assert_eq!(outs[i], expect);
        }
        let y = aspp.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 6]);
    }

    #[test]
    fn constant_input_gives_spatially_constant_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut aspp = Aspp::new(2, 3, &[1, 2], &mut rng).unwrap();
        // one training pass so eval mode has running statistics
        let warm = Tensor::random_uniform(&[1, 2, 7, 7], 1.0, &mut rng);
        aspp.forward(&warm, Mode::Train).unwrap();

        let x = Tensor::full(&[1, 2, 7, 7], 0.7);
        let outs = aspp.branch_outputs(&x, Mode::Eval).unwrap();
        let pooled = ops::global_avg_pool(&x);
        assert!(pooled.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let pool_branch = outs.last().unwrap();
        for c in 0..3 {
            let plane = &pool_branch.data()[c * 49..(c + 1) * 49];
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
        // away from the zero padding every position sees the same taps
        let y = aspp.forward(&x, Mode::Eval).unwrap();
        for c in 0..3 {
            let at = |r: usize, k: usize| y.data()[c * 49 + r * 7 + k];
            for r in 2..5 {
                for k in 2..5 {
                    assert!((at(r, k) - at(3, 3)).abs() < 1e-12);
                }
            }
        }
    }
}
