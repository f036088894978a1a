use rand::Rng;

use super::aspp::Aspp;
use super::layers::{Conv2d, ConvBnRelu, ResidualBlock};
use super::ops::{self, ConvGeometry, Mode};
use crate::error::{Error, Result};
use crate::param::{join, Entry, Visit};
use crate::tensor::Tensor;

/// One encoder stage: `blocks` residual blocks, the first of which applies
/// `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Net2DConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Stride of the stem convolution; it counts towards the total of 16.
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    pub aspp_rates: Vec<usize>,
    pub decoder_channels: usize,
    /// Width of the 1x1 projections applied to the stride-8 and stride-4 skips.
    pub skip_channels: usize,
    pub out_feature_channels: usize,
}

impl Default for Net2DConfig {
    fn default() -> Self {
        Net2DConfig::with_channels(&[32, 64, 128], 2, 4, 64)
    }
}

impl Net2DConfig {
    /// Stem of stride 2 followed by three stride-2 stages, which puts the
    /// stage outputs at strides 4, 8 and 16.
    pub fn with_channels(
        channels: &[usize; 3],
        blocks: usize,
        groups: usize,
        features: usize,
    ) -> Self {
        Net2DConfig {
            in_channels: 2,
            stem_channels: channels[0],
            stem_stride: 2,
            stages: channels
                .iter()
                .map(|&c| StageConfig {
                    blocks,
                    channels: c,
                    stride: 2,
                    groups,
                })
                .collect(),
            aspp_rates: vec![1, 6, 12, 18],
            decoder_channels: 64,
            skip_channels: 32,
            out_feature_channels: features,
        }
    }

    /// Cumulative stride after each stage.
    pub fn stage_strides(&self) -> Vec<usize> {
        let mut s = self.stem_stride;
        self.stages
            .iter()
            .map(|st| {
                s *= st.stride;
                s
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::argument(format!("net2d config: {m}")));
        if self.in_channels == 0 || self.stem_channels == 0 || self.out_feature_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.stem_stride == 0 || self.stages.iter().any(|s| s.stride == 0 || s.blocks == 0) {
            return bad("strides and block counts must be positive".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.groups == 0 || s.channels % s.groups != 0 {
                return bad(format!(
                    "stage {i}: groups {} must divide channels {}",
                    s.groups, s.channels
                ));
            }
        }
        let strides = self.stage_strides();
        if strides.last() != Some(&16) {
            return bad(format!("strides {strides:?} must multiply to 16"));
        }
        for tap in [4, 8] {
            if !strides.contains(&tap) {
                return bad(format!("no stage ends at stride {tap}"));
            }
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return bad("aspp rates must be positive".into());
        }
        if self.decoder_channels == 0 || self.skip_channels == 0 {
            return bad("decoder widths must be positive".into());
        }
        Ok(())
    }
}

/// Encoder, ASPP at stride 16 and a decoder fusing the stride-8 and stride-4
/// stage outputs; returns per-pixel features at input resolution.
#[derive(Debug, Clone)]
pub struct Net2D {
    pub config: Net2DConfig,
    stem: ConvBnRelu,
    stages: Vec<Vec<ResidualBlock>>,
    aspp: Aspp,
    skip8: ConvBnRelu,
    fuse8: ConvBnRelu,
    skip4: ConvBnRelu,
    fuse4: ConvBnRelu,
    head: Conv2d,
    cache: Option<Net2DCache>,
}

#[derive(Debug, Clone)]
struct Net2DCache {
    input_hw: (usize, usize),
    padded_hw: (usize, usize),
    s16_hw: (usize, usize),
    s8_hw: (usize, usize),
    s4_hw: (usize, usize),
    tap4: usize,
    tap8: usize,
}

impl Net2D {
    pub fn new<R: Rng>(config: Net2DConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = ConvBnRelu::new(
            config.in_channels,
            config.stem_channels,
            3,
            ConvGeometry {
                stride: config.stem_stride,
                padding: 1,
                dilation: 1,
                groups: 1,
            },
            rng,
        );
        let mut c_in = config.stem_channels;
        let mut stages = Vec::new();
        for st in &config.stages {
            let mut blocks = Vec::new();
            for b in 0..st.blocks {
                let stride = if b == 0 { st.stride } else { 1 };
                blocks.push(ResidualBlock::new(c_in, st.channels, stride, st.groups, rng));
                c_in = st.channels;
            }
            stages.push(blocks);
        }
        let strides = config.stage_strides();
        let ch_at = |s: usize| config.stages[strides.iter().rposition(|&x| x == s).unwrap()].channels;
        let (c4, c8) = (ch_at(4), ch_at(8));
        let dec = config.decoder_channels;
        let skip = config.skip_channels;
        let same1 = ConvGeometry::same(1, 1, 1);
        let same3 = ConvGeometry::same(3, 1, 1);
        Ok(Net2D {
            aspp: Aspp::new(c_in, dec, &config.aspp_rates, rng)?,
            skip8: ConvBnRelu::new(c8, skip, 1, same1, rng),
            fuse8: ConvBnRelu::new(dec + skip, dec, 3, same3, rng),
            skip4: ConvBnRelu::new(c4, skip, 1, same1, rng),
            fuse4: ConvBnRelu::new(dec + skip, dec, 3, same3, rng),
            head: Conv2d::new(dec, config.out_feature_channels, 1, same1, true, rng),
            stem,
            stages,
            config,
            cache: None,
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.config.out_feature_channels
    }

    /// `[N, C_in, H, W] -> [N, F, H, W]`. Inputs are zero padded on the
    /// bottom and right to a multiple of 16 and the output cropped back.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.rank() != 4 || x.dim(1) != self.config.in_channels {
            return Err(Error::argument(format!(
                "net2d expects [N, {}, H, W], got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        let (h, w) = (x.dim(2), x.dim(3));
        if h == 0 || w == 0 {
            return Err(Error::argument("net2d input has an empty spatial extent"));
        }
        let (ph, pw) = (h.div_ceil(16) * 16, w.div_ceil(16) * 16);
        let strides = self.config.stage_strides();
        let tap4 = strides.iter().rposition(|&s| s == 4).unwrap();
        let tap8 = strides.iter().rposition(|&s| s == 8).unwrap();

        let mut y = self.stem.forward(&ops::pad_to(x, ph, pw), mode)?;
        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                y = block.forward(&y, mode)?;
            }
            skips.push(y.clone());
        }
        let s16_hw = (y.dim(2), y.dim(3));
        let a = self.aspp.forward(&y, mode)?;

        let s8 = &skips[tap8];
        let s8_hw = (s8.dim(2), s8.dim(3));
        let up = ops::upsample_bilinear(&a, s8_hw.0, s8_hw.1)?;
        let sk = self.skip8.forward(s8, mode)?;
        let d8 = self.fuse8.forward(&Tensor::concat_channels(&[&up, &sk])?, mode)?;

        let s4 = &skips[tap4];
        let s4_hw = (s4.dim(2), s4.dim(3));
        let up = ops::upsample_bilinear(&d8, s4_hw.0, s4_hw.1)?;
        let sk = self.skip4.forward(s4, mode)?;
        let d4 = self.fuse4.forward(&Tensor::concat_channels(&[&up, &sk])?, mode)?;

        let f4 = self.head.forward(&d4)?;
        let full = ops::upsample_bilinear(&f4, ph, pw)?;
        let out = ops::crop_to(&full, h, w);
        if cfg!(debug_assertions) {
            out.check_finite("net2d output")?;
        }
        self.cache = Some(Net2DCache {
            input_hw: (h, w),
            padded_hw: (ph, pw),
            s16_hw,
            s8_hw,
            s4_hw,
            tap4,
            tap8,
        });
        Ok(out)
    }

    /// Back-propagates `grad_y` (shape of the last output), accumulating
    /// parameter gradients, and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor> {
        let c = self
            .cache
            .take()
            .ok_or_else(|| Error::state("net2d: backward without forward"))?;
        let n = grad_y.dim(0);
        let f = self.config.out_feature_channels;
        grad_y.expect_shape(&[n, f, c.input_hw.0, c.input_hw.1], "net2d grad")?;
        let dec = self.config.decoder_channels;
        let skip = self.config.skip_channels;

        let g = ops::pad_to(grad_y, c.padded_hw.0, c.padded_hw.1);
        let g = ops::upsample_bilinear_backward(&g, &[n, f, c.s4_hw.0, c.s4_hw.1])?;
        let g = self.head.backward(&g)?;
        let g = self.fuse4.backward(&g)?;
        let parts = g.split_channels(&[dec, skip])?;
        let mut g_skips: Vec<Option<Tensor>> = vec![None; self.stages.len()];
        g_skips[c.tap4] = Some(self.skip4.backward(&parts[1])?);
        let g = ops::upsample_bilinear_backward(&parts[0], &[n, dec, c.s8_hw.0, c.s8_hw.1])?;
        let g = self.fuse8.backward(&g)?;
        let parts = g.split_channels(&[dec, skip])?;
        let g8 = self.skip8.backward(&parts[1])?;
        match &mut g_skips[c.tap8] {
            Some(t) => t.add_assign(&g8)?,
            slot => *slot = Some(g8),
        }
        let g = ops::upsample_bilinear_backward(&parts[0], &[n, dec, c.s16_hw.0, c.s16_hw.1])?;
        let mut g = self.aspp.backward(&g)?;
        for (i, stage) in self.stages.iter_mut().enumerate().rev() {
            if let Some(extra) = g_skips[i].take() {
                g.add_assign(&extra)?;
            }
            for block in stage.iter_mut().rev() {
                g = block.backward(&g)?;
            }
        }
        let g = self.stem.backward(&g)?;
        Ok(ops::crop_to(&g, c.input_hw.0, c.input_hw.1))
    }
}

impl Visit for Net2D {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, b) in stage.iter_mut().enumerate() {
                b.visit(&join(prefix, &format!("stage{i}.block{j}")), f);
            }
        }
        self.aspp.visit(&join(prefix, "aspp"), f);
        self.skip8.visit(&join(prefix, "skip8"), f);
        self.fuse8.visit(&join(prefix, "fuse8"), f);
        self.skip4.visit(&join(prefix, "skip4"), f);
        self.fuse4.visit(&join(prefix, "fuse4"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}
