//! Flat `key = value` run configuration. Defaults, then the config file,
//! then command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use kprnet::kitti_io::{parse_sequence_list, LabelMap};
use kprnet::kpconv::KPConvConfig;
use kprnet::net2d::Net2DConfig;
use kprnet::postprocess_knn::KnnConfig;
use kprnet::projection::{ProjectionConfig, ProjectionMode};
use kprnet::train::{InputConfig, TrainConfig};

const DEFAULTS: &[(&str, &str)] = &[
    ("data.root", ""),
    ("data.label_map", ""),
    ("data.train_sequences", "0-7,9,10"),
    ("data.val_sequences", "8"),
    ("projection.mode", "spherical"),
    ("projection.height", "64"),
    ("projection.width", "2048"),
    ("projection.fov_up", "3"),
    ("projection.fov_down", "25"),
    ("projection.upsample", "none"),
    ("net.channels", "32,64,128"),
    ("net.blocks", "2"),
    ("net.groups", "4"),
    ("net.features", "64"),
    ("net.aspp_rates", "1,6,12,18"),
    ("net.decoder_channels", "64"),
    ("net.skip_channels", "32"),
    ("kpconv.kernel_points", "15"),
    ("kpconv.radius", "0.6"),
    ("kpconv.sigma", "0.3"),
    ("kpconv.out_channels", "128"),
    ("knn.k", "5"),
    ("knn.window", "5"),
    ("knn.sigma", "1.0"),
    ("knn.cutoff", "1.0"),
    ("train.model", "kpr"),
    ("train.lr", "0.01875"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "0.0001"),
    ("train.epochs", "120"),
    ("train.warmup", "1000"),
    ("train.batch", "24"),
    ("train.crop_width", "1025"),
    ("train.flip_prob", "0.5"),
    ("train.max_steps", "none"),
    ("train.checkpoint_every", "0"),
    ("train.freeze_net2d", "false"),
    ("seed", "0"),
    ("jobs", "0"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Kpr,
    Pixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => bail!("unknown config key `{key}`"),
        }
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v),
            None => Ok(()),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text).with_context(|| path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key has a default")
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| anyhow!("config key `{key}`: bad value `{v}`: {e}"))
    }

    fn get_list(&self, key: &str) -> Result<Vec<usize>> {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| anyhow!("config key `{key}`: bad list `{}`", self.raw(key)))
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn jobs(&self) -> Result<usize> {
        self.get("jobs")
    }

    pub fn data_root(&self) -> Result<PathBuf> {
        let root = self.raw("data.root");
        if root.is_empty() {
            bail!("no dataset root: pass --data-root or set KPRNET_DATA");
        }
        Ok(PathBuf::from(root))
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        let path = self.raw("data.label_map");
        if path.is_empty() {
            return Ok(LabelMap::semantic_kitti());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading label map {path}"))?;
        LabelMap::parse(&text).with_context(|| path.to_string())
    }

    pub fn train_sequences(&self) -> Result<Vec<u32>> {
        Ok(parse_sequence_list(self.raw("data.train_sequences"))?)
    }

    pub fn val_sequences(&self) -> Result<Vec<u32>> {
        Ok(parse_sequence_list(self.raw("data.val_sequences"))?)
    }

    pub fn projection(&self) -> Result<ProjectionConfig> {
        let mode = match self.raw("projection.mode") {
            "spherical" => ProjectionMode::Spherical,
            "unfold" => ProjectionMode::Unfold,
            other => bail!("config key `projection.mode`: expected spherical or unfold, got `{other}`"),
        };
        let cfg = ProjectionConfig {
            height: self.get("projection.height")?,
            width: self.get("projection.width")?,
            fov_up: self.get::<f64>("projection.fov_up")?.to_radians(),
            fov_down: self.get::<f64>("projection.fov_down")?.to_radians(),
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn upsample(&self) -> Result<Option<(usize, usize)>> {
        parse_size(self.raw("projection.upsample"))
            .map_err(|e| anyhow!("config key `projection.upsample`: {e}"))
    }

    pub fn input(&self) -> Result<InputConfig> {
        Ok(InputConfig {
            projection: self.projection()?,
            upsample_to: self.upsample()?,
        })
    }

    pub fn net(&self) -> Result<Net2DConfig> {
        let ch = self.get_list("net.channels")?;
        let channels: [usize; 3] = ch
            .try_into()
            .map_err(|_| anyhow!("config key `net.channels`: expected three widths"))?;
        let mut cfg = Net2DConfig::with_channels(
            &channels,
            self.get("net.blocks")?,
            self.get("net.groups")?,
            self.get("net.features")?,
        );
        cfg.aspp_rates = self.get_list("net.aspp_rates")?;
        cfg.decoder_channels = self.get("net.decoder_channels")?;
        cfg.skip_channels = self.get("net.skip_channels")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kpconv(&self) -> Result<KPConvConfig> {
        let cfg = KPConvConfig {
            kernel_points: self.get("kpconv.kernel_points")?,
            radius: self.get("kpconv.radius")?,
            sigma: self.get("kpconv.sigma")?,
            out_channels: self.get("kpconv.out_channels")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn knn(&self) -> Result<KnnConfig> {
        let cfg = KnnConfig {
            k: self.get("knn.k")?,
            window: self.get("knn.window")?,
            sigma_gauss: self.get("knn.sigma")?,
            cutoff: self.get("knn.cutoff")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        match self.raw("train.model") {
            "kpr" => Ok(ModelKind::Kpr),
            "pixel" => Ok(ModelKind::Pixel),
            other => bail!("config key `train.model`: expected kpr or pixel, got `{other}`"),
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let max_steps = match self.raw("train.max_steps") {
            "none" | "" => None,
            _ => Some(self.get("train.max_steps")?),
        };
        let cfg = TrainConfig {
            base_lr: self.get("train.lr")?,
            momentum: self.get("train.momentum")?,
            weight_decay: self.get("train.weight_decay")?,
            epochs: self.get("train.epochs")?,
            warmup_iters: self.get("train.warmup")?,
            batch_size: self.get("train.batch")?,
            crop_width: self.get("train.crop_width")?,
            flip_prob: self.get("train.flip_prob")?,
            seed: self.seed()?,
            upsample_to: self.upsample()?,
            max_steps,
            checkpoint_every: self.get("train.checkpoint_every")?,
            freeze_net2d: self.get("train.freeze_net2d")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds every typed section so bad values fail before any work.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.jobs()?;
        self.label_map()?;
        self.train_sequences()?;
        self.val_sequences()?;
        self.input()?;
        self.net()?;
        self.kpconv()?;
        self.knn()?;
        self.model_kind()?;
        self.train()?;
        Ok(())
    }
}

/// `HxW`, or `none`.
pub fn parse_size(s: &str) -> Result<Option<(usize, usize)>> {
    if s.is_empty() || s == "none" {
        return Ok(None);
    }
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| anyhow!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| anyhow!("expected HxW, got `{s}`"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        bail!("image size must be positive, got `{s}`");
    }
    Ok(Some((h, w)))
}
