use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::kitti_io::NUM_CLASSES;
use crate::kpconv::{KPConv, KPConvConfig, PointHead};
use crate::net2d::{Conv2d, ConvGeometry, Net2D, Net2DConfig, StageConfig};
use crate::param::{join, Entry, Visit};
use crate::projection::{ProjectionConfig, ProjectionMode};

/// How scans become network inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputConfig {
    pub projection: ProjectionConfig,
    pub upsample_to: Option<(usize, usize)>,
}

/// 2D network, point convolution and point head.
#[derive(Debug, Clone)]
pub struct KprNet {
    pub net: Net2D,
    pub kpconv: KPConv,
    pub head: PointHead,
    pub kpconv_config: KPConvConfig,
}

impl KprNet {
    pub fn new(net: Net2DConfig, kp: KPConvConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Net2D::new(net, &mut rng)?;
        let kpconv = KPConv::new(kp.disposition()?, net.feature_channels(), kp.out_channels, &mut rng)?;
        let head = PointHead::new(kp.out_channels, &mut rng);
        Ok(KprNet {
            net,
            kpconv,
            head,
            kpconv_config: kp,
        })
    }

    pub fn radius(&self) -> f64 {
        self.kpconv.disposition.radius
    }
}

impl Visit for KprNet {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_>)) {
        self.net.visit(&join(prefix, "net"), f);
        self.kpconv.visit(&join(prefix, "kpconv"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}

/// 2D network with a per-pixel classifier; its predictions reach the points
/// through the pixel they project to, optionally refined by KNN voting.
#[derive(Debug, Clone)]
pub struct PixelNet {
    pub net: Net2D,
    pub classifier: Conv2d,
}

impl PixelNet {
    pub fn new(net: Net2DConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Net2D::new(net, &mut rng)?;
        let classifier = Conv2d::new(
            net.feature_channels(),
            NUM_CLASSES,
            1,
            ConvGeometry::same(1, 1, 1),
            true,
            &mut rng,
        );
        Ok(PixelNet { net, classifier })
    }
}

impl Visit for PixelNet {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_>)) {
        self.net.visit(&join(prefix, "net"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }
}

/// A model restored from a checkpoint.
#[derive(Debug, Clone)]
pub enum Model {
    Kpr(KprNet),
    Pixel(PixelNet),
}

impl Model {
    pub fn net_config(&self) -> &Net2DConfig {
        match self {
            Model::Kpr(m) => &m.net.config,
            Model::Pixel(m) => &m.net.config,
        }
    }
}

const KIND_KPR: f64 = 0.0;
const KIND_PIXEL: f64 = 1.0;

fn encode_net(c: &Net2DConfig) -> Vec<f64> {
    let mut v = vec![
        c.in_channels as f64,
        c.stem_channels as f64,
        c.stem_stride as f64,
        c.stages.len() as f64,
    ];
    for s in &c.stages {
        v.extend([s.blocks, s.channels, s.stride, s.groups].map(|x| x as f64));
    }
    v.push(c.aspp_rates.len() as f64);
    v.extend(c.aspp_rates.iter().map(|&r| r as f64));
    v.extend([c.decoder_channels, c.skip_channels, c.out_feature_channels].map(|x| x as f64));
    v
}

fn decode_net(v: &[f64]) -> Result<Net2DConfig> {
    let bad = || Error::format("malformed meta.net2d entry");
    let mut it = v.iter().map(|&x| x as usize);
    let mut next = || it.next().ok_or_else(bad);
    let in_channels = next()?;
    let stem_channels = next()?;
    let stem_stride = next()?;
    let n = next()?;
    let mut stages = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        stages.push(StageConfig {
            blocks: next()?,
            channels: next()?,
            stride: next()?,
            groups: next()?,
        });
    }
    let nr = next()?;
    let aspp_rates = (0..nr).map(|_| next()).collect::<Result<Vec<_>>>()?;
    let c = Net2DConfig {
        in_channels,
        stem_channels,
        stem_stride,
        stages,
        aspp_rates,
        decoder_channels: next()?,
        skip_channels: next()?,
        out_feature_channels: next()?,
    };
    c.validate().map_err(|e| e.context("checkpoint architecture"))?;
    Ok(c)
}

fn encode_input(c: &InputConfig, ck: &mut Checkpoint) {
    let p = &c.projection;
    let mode = match p.mode {
        ProjectionMode::Spherical => 0.0,
        ProjectionMode::Unfold => 1.0,
    };
    ck.push(
        "meta.projection",
        &[5],
        [p.height as f64, p.width as f64, p.fov_up.to_degrees(), p.fov_down.to_degrees(), mode],
    );
    let (h, w) = c.upsample_to.unwrap_or((0, 0));
    ck.push("meta.upsample", &[2], [h as f64, w as f64]);
}

fn decode_input(ck: &Checkpoint) -> Result<InputConfig> {
    let p = ck.values("meta.projection")?;
    let u = ck.values("meta.upsample")?;
    if p.len() != 5 || u.len() != 2 {
        return Err(Error::format("malformed input meta entries"));
    }
    let projection = ProjectionConfig {
        height: p[0] as usize,
        width: p[1] as usize,
        fov_up: p[2].to_radians(),
        fov_down: p[3].to_radians(),
        mode: if p[4] == 0.0 { ProjectionMode::Spherical } else { ProjectionMode::Unfold },
    };
    projection.validate()?;
    let upsample_to = (u[0] > 0.0 && u[1] > 0.0).then(|| (u[0] as usize, u[1] as usize));
    Ok(InputConfig { projection, upsample_to })
}

/// Architecture, input settings and all model state.
pub fn save_model(model: &mut Model, input: &InputConfig) -> Checkpoint {
    let mut ck = Checkpoint::default();
    let net = encode_net(model.net_config());
    match model {
        Model::Kpr(m) => {
            ck.push("meta.kind", &[1], [KIND_KPR]);
            let k = &m.kpconv_config;
            ck.push(
                "meta.kpconv",
                &[4],
                [k.kernel_points as f64, k.radius, k.sigma, k.out_channels as f64],
            );
        }
        Model::Pixel(_) => ck.push("meta.kind", &[1], [KIND_PIXEL]),
    }
    ck.push("meta.net2d", &[net.len()], net);
    encode_input(input, &mut ck);
    match model {
        Model::Kpr(m) => ck.capture("", m),
        Model::Pixel(m) => ck.capture("", m),
    }
    ck
}

pub fn load_model(ck: &Checkpoint) -> Result<(Model, InputConfig)> {
    let kind = ck.values("meta.kind")?;
    let net = decode_net(&ck.values("meta.net2d")?)?;
    let input = decode_input(ck)?;
    let mut model = match kind.first() {
        Some(&k) if k == KIND_KPR => {
            let v = ck.values("meta.kpconv")?;
            if v.len() != 4 {
                return Err(Error::format("malformed meta.kpconv entry"));
            }
            let kp = KPConvConfig {
                kernel_points: v[0] as usize,
                radius: v[1],
                sigma: v[2],
                out_channels: v[3] as usize,
                seed: 0,
            };
            Model::Kpr(KprNet::new(net, kp, 0)?)
        }
        Some(&k) if k == KIND_PIXEL => Model::Pixel(PixelNet::new(net, 0)?),
        _ => return Err(Error::format("unknown model kind in checkpoint")),
    };
    match &mut model {
        Model::Kpr(m) => ck.restore("", m)?,
        Model::Pixel(m) => ck.restore("", m)?,
    }
    Ok((model, input))
}
