//! Stateful layers wrapping the kernels in [`super::ops`]. Each layer keeps
//! what its backward pass needs from the most recent forward pass and
//! accumulates parameter gradients into its [`Param`]s.

use rand::Rng;

use super::ops::{self, BatchNormSaved, BatchNormStats, ConvGeometry, Mode};
use crate::error::{Error, Result};
use crate::param::{join, Entry, Param, Visit};
use crate::tensor::Tensor;

fn missing(layer: &str) -> Error {
    Error::state(format!("{layer}: backward called without a saved forward pass"))
}

/// Fan-in scaled uniform init with the variance of Kaiming normal init.
pub fn kaiming_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::random_uniform(shape, bound, rng)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub geometry: ConvGeometry,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let cin_g = c_in / geometry.groups;
        let weight = kaiming_uniform(&[c_out, cin_g, kernel, kernel], cin_g * kernel * kernel, rng);
        Conv2d {
            weight: Param::new(weight, true),
            bias: bias.then(|| Param::new(Tensor::zeros(&[c_out]), false)),
            geometry,
            input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut y = ops::conv2d(x, &self.weight.value, self.geometry)?;
        if let Some(b) = &self.bias {
            ops::add_channel_bias(&mut y, b.value.data());
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| missing("conv2d"))?;
        let gk = ops::conv2d_grad_kernel(grad_y, &x, self.weight.value.shape(), self.geometry)?;
        self.weight.grad.add_assign(&gk)?;
        if let Some(b) = &mut self.bias {
            for (g, s) in b.grad.data_mut().iter_mut().zip(ops::channel_sums(grad_y)) {
                *g += s;
            }
        }
        ops::conv2d_grad_input(grad_y, &self.weight.value, x.shape(), self.geometry)
    }
}

impl Visit for Conv2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_>)) {
        f(&join(prefix, "weight"), Entry::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Entry::Param(b));
        }
    }
}

/// Batch normalization over axis 1 of an NCHW tensor.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub stats: BatchNormStats,
    saved: Option<BatchNormSaved>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::full(&[channels], 1.0), false),
            beta: Param::new(Tensor::zeros(&[channels]), false),
            stats: BatchNormStats::new(channels),
            saved: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (y, saved) = ops::batchnorm_forward(
            x,
            self.gamma.value.data(),
            self.beta.value.data(),
            &mut self.stats,
            mode,
        )?;
        self.saved = Some(saved);
        Ok(y)
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor> {
        let saved = self.saved.take().ok_or_else(|| missing("batchnorm"))?;
        let (gx, gg, gb) = ops::batchnorm_backward(grad_y, self.gamma.value.data(), &saved)?;
        for (a, b) in self.gamma.grad.data_mut().iter_mut().zip(gg) {
            *a += b;
        }
        for (a, b) in self.beta.grad.data_mut().iter_mut().zip(gb) {
            *a += b;
        }
        Ok(gx)
    }
}

impl Visit for BatchNorm {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_>)) {
        f(&join(prefix, "gamma"), Entry::Param(&mut self.gamma));
        f(&join(prefix, "beta"), Entry::Param(&mut self.beta));
        let c = self.stats.running_mean.len();
        let mut mean = Tensor::from_vec(&[c], self.stats.running_mean.clone()).unwrap();
        let mut var = Tensor::from_vec(&[c], self.stats.running_var.clone()).unwrap();
        let mut seen = Tensor::from_vec(&[1], vec![self.stats.batches_seen as f64]).unwrap();
        f(&join(prefix, "running_mean"), Entry::Buffer(&mut mean));
        f(&join(prefix, "running_var"), Entry::Buffer(&mut var));
        f(&join(prefix, "batches_seen"), Entry::Buffer(&mut seen));
        self.stats.running_mean = mean.into_data();
        self.stats.running_var = var.into_data();
        self.stats.batches_seen = seen.data()[0].max(0.0) as u64;
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    input: Option<Tensor>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.input = Some(x.clone());
        ops::relu(x)
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| missing("relu"))?;
        Ok(ops::relu_backward(grad_y, &x))
    }
}

impl Visit for Relu {
    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, Entry<'_>)) {}
}

/// Convolution, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    relu: Relu,
}

impl ConvBnRelu {
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(c_in, c_out, kernel, geometry, false, rng),
            bn: BatchNorm::new(c_out),
            relu: Relu::default(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y, mode)?;
        Ok(self.relu.forward(&y))
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor> {
        let g = self.relu.backward(grad_y)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

impl Visit for ConvBnRelu {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// Bottleneck residual block with a grouped 3x3 convolution.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    reduce: ConvBnRelu,
    grouped: ConvBnRelu,
    expand: Conv2d,
    expand_bn: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
    out_relu: Relu,
}

impl ResidualBlock {
    pub fn new<R: Rng>(
        c_in: usize,
        channels: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let pointwise = ConvGeometry::same(1, 1, 1);
        let grouped = ConvGeometry {
            stride,
            padding: 1,
            dilation: 1,
            groups,
        };
        let shortcut = (stride != 1 || c_in != channels).then(|| {
            let g = ConvGeometry {
                stride,
                padding: 0,
                dilation: 1,
                groups: 1,
            };
            (
                Conv2d::new(c_in, channels, 1, g, false, rng),
                BatchNorm::new(channels),
            )
        });
        ResidualBlock {
            reduce: ConvBnRelu::new(c_in, channels, 1, pointwise, rng),
            grouped: ConvBnRelu::new(channels, channels, 3, grouped, rng),
            expand: Conv2d::new(channels, channels, 1, pointwise, false, rng),
            expand_bn: BatchNorm::new(channels),
            shortcut,
            out_relu: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.reduce.forward(x, mode)?;
        let y = self.grouped.forward(&y, mode)?;
        let y = self.expand.forward(&y)?;
        let mut y = self.expand_bn.forward(&y, mode)?;
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(x)?;
                y.add_assign(&bn.forward(&s, mode)?)?;
            }
            None => y.add_assign(x)?,
        }
        Ok(self.out_relu.forward(&y))
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor> {
        let g = self.out_relu.backward(grad_y)?;
        let mut gx = match &mut self.shortcut {
            Some((conv, bn)) => conv.backward(&bn.backward(&g)?)?,
            None => g.clone(),
        };
        let gm = self.expand.backward(&self.expand_bn.backward(&g)?)?;
        let gm = self.grouped.backward(&gm)?;
        gx.add_assign(&self.reduce.backward(&gm)?)?;
        Ok(gx)
    }
}

impl Visit for ResidualBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_>)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.grouped.visit(&join(prefix, "grouped"), f);
        self.expand.visit(&join(prefix, "expand"), f);
        self.expand_bn.visit(&join(prefix, "expand_bn"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit(&join(prefix, "shortcut"), f);
            bn.visit(&join(prefix, "shortcut_bn"), f);
        }
    }
}

/// Affine map `y = x W + b` over rows of an `[N, in]` tensor.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::new(kaiming_uniform(&[d_in, d_out], d_in, rng), true),
            bias: Param::new(Tensor::zeros(&[d_out]), false),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = ops::linear(x, &self.weight.value, self.bias.value.data())?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| missing("linear"))?;
        let (gx, gw, gb) = ops::linear_backward(grad_y, &x, &self.weight.value)?;
        self.weight.grad.add_assign(&gw)?;
        for (a, b) in self.bias.grad.data_mut().iter_mut().zip(gb) {
            *a += b;
        }
        Ok(gx)
    }
}

impl Visit for Linear {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_>)) {
        f(&join(prefix, "weight"), Entry::Param(&mut self.weight));
        f(&join(prefix, "bias"), Entry::Param(&mut self.bias));
    }
}
