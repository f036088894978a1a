//! Scan preparation, augmentation, and the forward/backward passes of both
//! models over a batch of scans.

use std::sync::Arc;

use rand::Rng;

use super::loss::{argmax_rows, cross_entropy};
use super::model::{InputConfig, KprNet, PixelNet};
use crate::error::{Error, Result};
use crate::kitti_io::{PointCloud, IGNORE};
use crate::kpconv::{radius_neighbors, Influences, KernelDisposition};
use crate::net2d::Mode;
use crate::postprocess_knn::{knn_filter, KnnConfig};
use crate::projection::{self, horizontal_flip, random_crop, RangeImage, CHANNELS};
use crate::tensor::Tensor;

/// A point cloud with per-point train ids (IGNORE where unlabeled).
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub id: String,
    pub cloud: PointCloud,
    pub labels: Vec<u8>,
}

impl Scan {
    pub fn new(id: impl Into<String>, cloud: PointCloud, labels: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if labels.len() != cloud.len() {
            return Err(Error::argument(format!(
                "scan {id}: {} labels for {} points",
                labels.len(),
                cloud.len()
            )));
        }
        Ok(Scan { id, cloud, labels })
    }

    pub fn unlabeled(id: impl Into<String>, cloud: PointCloud) -> Self {
        let n = cloud.len();
        Scan {
            id: id.into(),
            cloud,
            labels: vec![IGNORE; n],
        }
    }
}

/// A projected (and resized) scan, plus its kernel influences when a
/// kernel is given.
#[derive(Debug, Clone)]
pub struct PreparedScan {
    pub scan: Scan,
    pub image: RangeImage,
    pub points: Vec<[f64; 3]>,
    pub influences: Option<Arc<Influences>>,
}

pub fn prepare_scan(
    scan: Scan,
    input: &InputConfig,
    kernel: Option<&KernelDisposition>,
) -> Result<PreparedScan> {
    let ctx = |e: Error| e.context(format!("scan {}", scan.id));
    let mut image = projection::project(&scan.cloud, &input.projection).map_err(ctx)?;
    if let Some((h, w)) = input.upsample_to {
        image = projection::upsample_nearest(&image, h, w).map_err(ctx)?;
    }
    let points: Vec<[f64; 3]> = (0..scan.cloud.len()).map(|i| scan.cloud.point_f64(i)).collect();
    let influences = match kernel {
        Some(d) => {
            let nl = radius_neighbors(&points, d.radius).map_err(ctx)?;
            Some(Arc::new(Influences::compute(&points, &nl, d).map_err(ctx)?))
        }
        None => None,
    };
    Ok(PreparedScan {
        scan,
        image,
        points,
        influences,
    })
}

/// One augmented training view of a prepared scan.
#[derive(Debug, Clone)]
pub struct View {
    pub image: RangeImage,
    /// Points taking part in this step, ascending.
    pub kept: Vec<usize>,
}

/// Random crop (when narrower than the image) then random flip. Points
/// whose pixel fell outside the crop are excluded; points without any
/// pixel are kept, with zero features, only when the full width is used.
pub fn augment<R: Rng>(p: &PreparedScan, crop_width: usize, flip_prob: f64, rng: &mut R) -> Result<View> {
    let (image, cropped) = if crop_width < p.image.width {
        let c = random_crop(&p.image, crop_width, rng)?;
        (c.image, true)
    } else {
        (p.image.clone(), false)
    };
    let image = if flip_prob > 0.0 && rng.gen_bool(flip_prob) {
        horizontal_flip(&image)
    } else {
        image
    };
    let kept = (0..image.num_points())
        .filter(|&i| image.point_to_pixel[i].is_some() || !cropped)
        .collect();
    Ok(View { image, kept })
}

/// View of the whole image with every point.
pub fn full_view(p: &PreparedScan) -> View {
    View {
        image: p.image.clone(),
        kept: (0..p.image.num_points()).collect(),
    }
}

fn stack_inputs(views: &[View]) -> Result<Tensor> {
    let (h, w) = (views[0].image.height, views[0].image.width);
    let mut data = Vec::with_capacity(views.len() * CHANNELS * h * w);
    for v in views {
        if (v.image.height, v.image.width) != (h, w) {
            return Err(Error::argument(format!(
                "batch mixes {}x{} and {}x{} images",
                h, w, v.image.height, v.image.width
            )));
        }
        data.extend_from_slice(v.image.to_chw().data());
    }
    Tensor::from_vec(&[views.len(), CHANNELS, h, w], data)
}

/// Per-point rows `feats[b, :, r, c]` for the kept points of view `b`.
fn gather(feats: &Tensor, b: usize, view: &View) -> Tensor {
    let (f, h, w) = (feats.dim(1), feats.dim(2), feats.dim(3));
    let plane = h * w;
    let base = b * f * plane;
    let src = feats.data();
    let mut out = vec![0.0; view.kept.len() * f];
    for (j, &i) in view.kept.iter().enumerate() {
        if let Some((r, c)) = view.image.point_to_pixel[i] {
            let p = base + r * w + c;
            for (ch, o) in out[j * f..(j + 1) * f].iter_mut().enumerate() {
                *o = src[p + ch * plane];
            }
        }
    }
    Tensor::from_vec(&[view.kept.len(), f], out).expect("sized above")
}

/// Adjoint of [`gather`]: adds point gradients into their source pixels in
/// ascending point order.
fn scatter_add(grad: &mut Tensor, b: usize, view: &View, g_points: &Tensor) {
    let (f, h, w) = (grad.dim(1), grad.dim(2), grad.dim(3));
    let plane = h * w;
    let base = b * f * plane;
    let gp = g_points.data();
    let dst = grad.data_mut();
    for (j, &i) in view.kept.iter().enumerate() {
        if let Some((r, c)) = view.image.point_to_pixel[i] {
            let p = base + r * w + c;
            for ch in 0..f {
                dst[p + ch * plane] += gp[j * f + ch];
            }
        }
    }
}

/// Loss and accuracy over the counted (non-IGNORE) targets of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub counted: usize,
}

impl StepStats {
    pub fn accuracy(&self) -> f64 {
        if self.counted == 0 {
            0.0
        } else {
            self.correct as f64 / self.counted as f64
        }
    }
}

fn score(logits: &Tensor, targets: &[u8], loss: f64) -> StepStats {
    let preds = argmax_rows(logits);
    let mut s = StepStats { loss, ..Default::default() };
    for (&p, &t) in preds.iter().zip(targets) {
        if t != IGNORE {
            s.counted += 1;
            s.correct += usize::from(p == t);
        }
    }
    s
}

impl KprNet {
    /// Point logits for the kept points of every view, concatenated in
    /// view order.
    fn forward_views(&mut self, scans: &[&PreparedScan], views: &[View], mode: Mode) -> Result<Tensor> {
        let x = stack_inputs(views)?;
        let feats = self.net.forward(&x, mode)?;
        self.kpconv.clear_saved();
        let mut outs = Vec::with_capacity(views.len());
        for (b, (p, v)) in scans.iter().zip(views).enumerate() {
            let ctx = |e: Error| e.context(format!("scan {}", p.scan.id));
            let full = match &p.influences {
                Some(inf) if inf.disposition == self.kpconv.disposition => inf.clone(),
                _ => {
                    let nl = radius_neighbors(&p.points, self.radius()).map_err(ctx)?;
                    Arc::new(
                        Influences::compute(&p.points, &nl, &self.kpconv.disposition)
                            .map_err(ctx)?,
                    )
                }
            };
            let inf = if v.kept.len() == full.num_queries() {
                full
            } else {
                Arc::new(full.subset(&v.kept))
            };
            let f = gather(&feats, b, v);
            outs.push(self.kpconv.forward_with(&f, inf).map_err(ctx)?);
        }
        let c = self.kpconv.out_channels();
        let total: usize = outs.iter().map(|t| t.dim(0)).sum();
        let mut all = Vec::with_capacity(total * c);
        for t in outs {
            all.extend(t.into_data());
        }
        self.head.forward(&Tensor::from_vec(&[total, c], all)?, mode)
    }

    /// Forward and backward over one batch; parameter gradients are
    /// accumulated, not applied.
    pub fn forward_backward(
        &mut self,
        scans: &[&PreparedScan],
        views: &[View],
        train_net: bool,
    ) -> Result<StepStats> {
        let logits = self.forward_views(scans, views, Mode::Train)?;
        let targets: Vec<u8> = scans
            .iter()
            .zip(views)
            .flat_map(|(p, v)| v.kept.iter().map(|&i| p.scan.labels[i]))
            .collect();
        let (loss, g) = cross_entropy(&logits, &targets)?;
        let stats = score(&logits, &targets, loss);

        let g = self.head.backward(&g)?;
        let c = g.dim(1);
        let counts: Vec<usize> = views.iter().map(|v| v.kept.len()).collect();
        let mut offsets = vec![0];
        for n in &counts {
            offsets.push(offsets.last().unwrap() + n);
        }
        let f = self.net.feature_channels();
        let (h, w) = (views[0].image.height, views[0].image.width);
        let mut g_feats = Tensor::zeros(&[views.len(), f, h, w]);
        // the point layer pops saved states last-in first-out
        let mut per_view = vec![None; views.len()];
        for b in (0..views.len()).rev() {
            let rows = g.data()[offsets[b] * c..offsets[b + 1] * c].to_vec();
            let gy = Tensor::from_vec(&[counts[b], c], rows)?;
            per_view[b] = Some(self.kpconv.backward(&gy)?);
        }
        if train_net {
            for (b, gp) in per_view.iter().enumerate() {
                scatter_add(&mut g_feats, b, &views[b], gp.as_ref().unwrap());
            }
            self.net.backward(&g_feats)?;
        }
        Ok(stats)
    }

    /// Per-point predictions for every point of a scan.
    pub fn predict(&mut self, p: &PreparedScan) -> Result<Vec<u8>> {
        let view = full_view(p);
        let logits = self.forward_views(&[p], std::slice::from_ref(&view), Mode::Eval)?;
        self.kpconv.clear_saved();
        Ok(argmax_rows(&logits))
    }
}

/// `[B, C, H, W] -> [B*H*W, C]`
fn nchw_to_rows(t: &Tensor) -> Tensor {
    let (n, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    let plane = h * w;
    let src = t.data();
    let mut out = vec![0.0; n * plane * c];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                out[(b * plane + p) * c + ch] = src[(b * c + ch) * plane + p];
            }
        }
    }
    Tensor::from_vec(&[n * plane, c], out).expect("sized above")
}

fn rows_to_nchw(t: &Tensor, n: usize, h: usize, w: usize) -> Tensor {
    let c = t.dim(1);
    let plane = h * w;
    let src = t.data();
    let mut out = vec![0.0; n * c * plane];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                out[(b * c + ch) * plane + p] = src[(b * plane + p) * c + ch];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out).expect("sized above")
}

/// Train id of the point owning each pixel, IGNORE for empty pixels.
pub fn pixel_targets(p: &PreparedScan, image: &RangeImage) -> Vec<u8> {
    image
        .pixel_to_point
        .iter()
        .map(|o| o.map_or(IGNORE, |i| p.scan.labels[i]))
        .collect()
}

impl PixelNet {
    fn logits(&mut self, views: &[View], mode: Mode) -> Result<Tensor> {
        let x = stack_inputs(views)?;
        let feats = self.net.forward(&x, mode)?;
        self.classifier.forward(&feats)
    }

    pub fn forward_backward(&mut self, scans: &[&PreparedScan], views: &[View]) -> Result<StepStats> {
        let logits = self.logits(views, Mode::Train)?;
        let (n, h, w) = (logits.dim(0), logits.dim(2), logits.dim(3));
        let rows = nchw_to_rows(&logits);
        let targets: Vec<u8> = scans
            .iter()
            .zip(views)
            .flat_map(|(p, v)| pixel_targets(p, &v.image))
            .collect();
        let (loss, g) = cross_entropy(&rows, &targets)?;
        let stats = score(&rows, &targets, loss);
        let g = self.classifier.backward(&rows_to_nchw(&g, n, h, w))?;
        self.net.backward(&g)?;
        Ok(stats)
    }

    /// Arg-max class of every pixel; empty pixels get IGNORE.
    pub fn predict_pixels(&mut self, p: &PreparedScan) -> Result<Vec<u8>> {
        let view = full_view(p);
        let logits = self.logits(std::slice::from_ref(&view), Mode::Eval)?;
        let labels = argmax_rows(&nchw_to_rows(&logits));
        Ok(labels
            .into_iter()
            .zip(&p.image.valid)
            .map(|(l, &v)| if v { l } else { IGNORE })
            .collect())
    }

    /// Point labels read from each point's own pixel, or voted by KNN.
    pub fn predict(&mut self, p: &PreparedScan, knn: Option<&KnnConfig>) -> Result<Vec<u8>> {
        let pixels = self.predict_pixels(p)?;
        match knn {
            Some(cfg) => knn_filter(&pixels, &p.image, cfg),
            None => Ok(p
                .image
                .point_to_pixel
                .iter()
                .map(|px| px.map_or(IGNORE, |(r, c)| pixels[r * p.image.width + c]))
                .collect()),
        }
    }
}
