//! Range-weighted nearest-neighbor label voting inside a pixel window.

use crate::error::{Error, Result};
use crate::kitti_io::{IGNORE, NUM_CLASSES};
use crate::par;
use crate::projection::RangeImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnConfig {
    pub k: usize,
    /// Odd side length of the search window in pixels.
    pub window: usize,
    pub sigma_gauss: f64,
    /// Largest range difference allowed to vote; 0 disables the cutoff.
    pub cutoff: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: 5,
            window: 5,
            sigma_gauss: 1.0,
            cutoff: 1.0,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::argument("knn: k must be at least 1"));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::argument(format!("knn: window {} must be odd", self.window)));
        }
        if !(self.sigma_gauss > 0.0) {
            return Err(Error::argument("knn: sigma must be positive"));
        }
        if !(self.cutoff >= 0.0) {
            return Err(Error::argument("knn: cutoff must be non-negative"));
        }
        Ok(())
    }
}

/// Labels every point of `img` from the per-pixel labels around its pixel.
///
/// Window pixels are visited row-major; columns wrap around and rows past
/// the image edge are skipped. Candidates are ranked by range difference,
/// ties kept in visiting order, and the label with the largest summed
/// weight wins, ties going to the label of the better-ranked voter.
pub fn knn_filter(pixel_labels: &[u8], img: &RangeImage, cfg: &KnnConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    if pixel_labels.len() != img.height * img.width {
        return Err(Error::argument(format!(
            "knn: {} pixel labels for a {}x{} image",
            pixel_labels.len(),
            img.height,
            img.width
        )));
    }
    Ok(par::map_range(img.num_points(), |i| {
        vote_one(i, pixel_labels, img, cfg)
    }))
}

fn vote_one(i: usize, labels: &[u8], img: &RangeImage, cfg: &KnnConfig) -> u8 {
    let Some((r, c)) = img.point_to_pixel[i] else {
        return IGNORE;
    };
    let (h, w) = (img.height as isize, img.width as isize);
    let half = (cfg.window / 2) as isize;
    let own = img.ranges[i];
    let mut cand: Vec<(f64, u8)> = Vec::with_capacity(cfg.window * cfg.window);
    for dr in -half..=half {
        let rr = r as isize + dr;
        if rr < 0 || rr >= h {
            continue;
        }
        for dc in -half..=half {
            let cc = (c as isize + dc).rem_euclid(w);
            let p = (rr * w + cc) as usize;
            if let Some(j) = img.pixel_to_point[p] {
                cand.push(((img.ranges[j] - own).abs(), labels[p]));
            }
        }
    }
    // stable, so equal differences keep visiting order
    cand.sort_by(|a, b| a.0.total_cmp(&b.0));
    cand.truncate(cfg.k);

    let mut weight = [0.0f64; NUM_CLASSES];
    let mut first_rank = [usize::MAX; NUM_CLASSES];
    let mut any = false;
    for (rank, &(d, label)) in cand.iter().enumerate() {
        if usize::from(label) >= NUM_CLASSES || (cfg.cutoff > 0.0 && d > cfg.cutoff) {
            continue;
        }
        let wgt = (-d * d / (2.0 * cfg.sigma_gauss * cfg.sigma_gauss)).exp();
        if wgt <= 0.0 {
            continue;
        }
        let l = usize::from(label);
        weight[l] += wgt;
        first_rank[l] = first_rank[l].min(rank);
        any = true;
    }
    if !any {
        return labels[r * img.width + c];
    }
    let mut best = 0;
    for l in 1..NUM_CLASSES {
        if weight[l] > weight[best] || (weight[l] == weight[best] && first_rank[l] < first_rank[best]) {
            best = l;
        }
    }
    best as u8
}

/// Labels each pixel with the label of the point that won it.
pub fn pixel_labels_from_points(point_labels: &[u8], img: &RangeImage) -> Result<Vec<u8>> {
    if point_labels.len() != img.num_points() {
        return Err(Error::argument(format!(
            "{} point labels for {} points",
            point_labels.len(),
            img.num_points()
        )));
    }
    Ok(img
        .pixel_to_point
        .iter()
        .map(|p| p.map_or(IGNORE, |j| point_labels[j]))
        .collect())
}
