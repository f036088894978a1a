//! Point cloud to range image projection.
//!
//! Two row assignment schemes are supported: spherical projection bins the
//! elevation angle against a vertical field of view, while scan unfolding
//! recovers the beam index from the capture order of the points. Both share
//! the column rule (azimuth binned over the full circle) and the collision
//! rule (the nearest point owns the pixel, ties go to the lower index).
//!
//! Channel 0 of the image is inverse range, channel 1 is remission. Empty
//! pixels hold zeros.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kitti_io::PointCloud;
use crate::par;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMode {
    Spherical,
    Unfold,
}

impl std::str::FromStr for ProjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spherical" => Ok(ProjectionMode::Spherical),
            "unfold" => Ok(ProjectionMode::Unfold),
            _ => Err(Error::argument(format!(
                "unknown projection mode `{s}` (expected spherical or unfold)"
            ))),
        }
    }
}

impl std::fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProjectionMode::Spherical => "spherical",
            ProjectionMode::Unfold => "unfold",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    /// Radians above the horizon.
    pub fov_up: f64,
    /// Radians below the horizon, positive.
    pub fov_down: f64,
    pub mode: ProjectionMode,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            height: 64,
            width: 2048,
            fov_up: 3.0_f64.to_radians(),
            fov_down: 25.0_f64.to_radians(),
            mode: ProjectionMode::Spherical,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 1 || self.width < 2 {
            return Err(Error::argument(format!(
                "image must be at least 1x2, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.fov_up + self.fov_down > 0.0) {
            return Err(Error::argument("fov_up + fov_down must be positive"));
        }
        Ok(())
    }
}

/// Projected image plus the point/pixel correspondence in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    /// `[H, W, 2]`: inverse range, remission.
    pub data: Tensor,
    pub valid: Vec<bool>,
    /// Winning point of each pixel, row-major.
    pub pixel_to_point: Vec<Option<usize>>,
    /// Pixel `(row, col)` each point maps to; `None` if it was dropped.
    /// Points that lost a collision keep their pixel here.
    pub point_to_pixel: Vec<Option<(usize, usize)>>,
    /// Euclidean range of every point.
    pub ranges: Vec<f64>,
}

impl RangeImage {
    pub fn num_points(&self) -> usize {
        self.point_to_pixel.len()
    }

    pub fn pixel_index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data.data()[(row * self.width + col) * CHANNELS + channel]
    }

    /// Image data as a `[2, H, W]` planar tensor.
    pub fn to_chw(&self) -> Tensor {
        hwc_to_chw(&self.data)
    }

    pub fn dropped_count(&self) -> usize {
        self.point_to_pixel.iter().filter(|p| p.is_none()).count()
    }

    /// Pixels claimed by two or more points.
    pub fn collision_count(&self) -> usize {
        let mut hits = vec![0u32; self.height * self.width];
        for &(r, c) in self.point_to_pixel.iter().flatten() {
            hits[r * self.width + c] += 1;
        }
        hits.iter().filter(|&&h| h >= 2).count()
    }

    pub fn to_file(&self) -> RangeImageFile {
        RangeImageFile {
            height: self.height as u32,
            width: self.width as u32,
            channels: CHANNELS as u32,
            data: self.data.data().iter().map(|&v| v as f32).collect(),
            pixel_to_point: self
                .pixel_to_point
                .iter()
                .map(|p| p.map_or(-1, |i| i as i64))
                .collect(),
        }
    }
}

pub fn project(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<RangeImage> {
    match cfg.mode {
        ProjectionMode::Spherical => spherical_project(cloud, cfg),
        ProjectionMode::Unfold => unfold_project(cloud, cfg),
    }
}

fn yaw_of(p: [f64; 3]) -> f64 {
    p[1].atan2(p[0])
}

fn column_of(yaw: f64, width: usize) -> usize {
    let col = (0.5 * (1.0 - yaw / PI) * width as f64).floor();
    col.clamp(0.0, (width - 1) as f64) as usize
}

pub fn spherical_project(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<RangeImage> {
    cfg.validate()?;
    let ranges: Vec<f64> = par::map_range(cloud.len(), |i| cloud.range(i));
    let fov = cfg.fov_up + cfg.fov_down;
    let coords = par::map_range(cloud.len(), |i| {
        let r = ranges[i];
        if r == 0.0 {
            return None;
        }
        let p = cloud.point_f64(i);
        let pitch = (p[2] / r).clamp(-1.0, 1.0).asin();
        if pitch < -cfg.fov_down || pitch > cfg.fov_up {
            return None;
        }
        let row = ((1.0 - (pitch + cfg.fov_down) / fov) * cfg.height as f64).floor();
        let row = row.clamp(0.0, (cfg.height - 1) as f64) as usize;
        Some((row, column_of(yaw_of(p), cfg.width)))
    });
    Ok(assemble(cloud, cfg, coords, ranges))
}

/// Sign of the azimuth sweep, from the median step over the first points.
fn sweep_direction(yaws: &[f64]) -> f64 {
    let mut deltas: Vec<f64> = yaws
        .windows(2)
        .take(1000)
        .map(|w| w[1] - w[0])
        .collect();
    if deltas.is_empty() {
        return 1.0;
    }
    deltas.sort_by(f64::total_cmp);
    if deltas[deltas.len() / 2] < 0.0 {
        -1.0
    } else {
        1.0
    }
}

pub fn unfold_project(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<RangeImage> {
    cfg.validate()?;
    let ranges: Vec<f64> = par::map_range(cloud.len(), |i| cloud.range(i));
    let yaws: Vec<f64> = par::map_range(cloud.len(), |i| yaw_of(cloud.point_f64(i)));
    let usable: Vec<f64> = (0..cloud.len())
        .filter(|&i| ranges[i] > 0.0)
        .map(|i| yaws[i])
        .collect();
    let direction = sweep_direction(&usable);

    let mut coords = Vec::with_capacity(cloud.len());
    let mut row = 0usize;
    let mut prev: Option<f64> = None;
    for i in 0..cloud.len() {
        if ranges[i] == 0.0 {
            coords.push(None);
            continue;
        }
        let yaw = yaws[i];
        if let Some(p) = prev {
            if direction * (yaw - p) < -PI {
                row += 1;
            }
        }
        prev = Some(yaw);
        coords.push((row < cfg.height).then(|| (row, column_of(yaw, cfg.width))));
    }
    Ok(assemble(cloud, cfg, coords, ranges))
}

fn assemble(
    cloud: &PointCloud,
    cfg: &ProjectionConfig,
    coords: Vec<Option<(usize, usize)>>,
    ranges: Vec<f64>,
) -> RangeImage {
    let (h, w) = (cfg.height, cfg.width);
    let mut pixel_to_point: Vec<Option<usize>> = vec![None; h * w];
    for (i, c) in coords.iter().enumerate() {
        let Some((r, col)) = *c else { continue };
        let slot = &mut pixel_to_point[r * w + col];
        // strict comparison keeps the lowest index on exact ties
        match *slot {
            Some(j) if ranges[j] <= ranges[i] => {}
            _ => *slot = Some(i),
        }
    }
    let mut data = Tensor::zeros(&[h, w, CHANNELS]);
    let d = data.data_mut();
    for (p, owner) in pixel_to_point.iter().enumerate() {
        if let Some(i) = *owner {
            d[p * CHANNELS] = 1.0 / ranges[i];
            d[p * CHANNELS + 1] = f64::from(cloud.remission[i]);
        }
    }
    RangeImage {
        height: h,
        width: w,
        data,
        valid: pixel_to_point.iter().map(Option::is_some).collect(),
        pixel_to_point,
        point_to_pixel: coords,
        ranges,
    }
}

fn nearest_source(dst: usize, src_len: usize, dst_len: usize) -> usize {
    dst * src_len / dst_len
}

/// Destination index owning a source index after nearest resampling: the
/// first replica when enlarging, the nearest survivor when shrinking.
fn owner_of(src: usize, src_len: usize, dst_len: usize) -> usize {
    if dst_len >= src_len {
        (src * dst_len).div_ceil(src_len)
    } else {
        src * dst_len / src_len
    }
}

/// Nearest-neighbour resampling of an `[H, W, C]` tensor.
pub fn upsample_nearest_hwc(input: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::argument("upsample_nearest_hwc expects [H, W, C]"));
    }
    if new_h == 0 || new_w == 0 {
        return Err(Error::argument("upsample target must be at least 1x1"));
    }
    let (h, w, c) = (input.dim(0), input.dim(1), input.dim(2));
    let src = input.data();
    let mut out = vec![0.0; new_h * new_w * c];
    par::for_each_chunk(&mut out, new_w * c, |u, row| {
        let su = nearest_source(u, h, new_h);
        for v in 0..new_w {
            let sv = nearest_source(v, w, new_w);
            let s = (su * w + sv) * c;
            row[v * c..(v + 1) * c].copy_from_slice(&src[s..s + c]);
        }
    });
    Tensor::from_vec(&[new_h, new_w, c], out)
}

pub fn upsample_nearest(img: &RangeImage, new_h: usize, new_w: usize) -> Result<RangeImage> {
    let data = upsample_nearest_hwc(&img.data, new_h, new_w)?;
    let (h, w) = (img.height, img.width);
    let mut pixel_to_point = Vec::with_capacity(new_h * new_w);
    for u in 0..new_h {
        let su = nearest_source(u, h, new_h);
        for v in 0..new_w {
            pixel_to_point.push(img.pixel_to_point[su * w + nearest_source(v, w, new_w)]);
        }
    }
    let point_to_pixel = img
        .point_to_pixel
        .iter()
        .map(|p| p.map(|(r, c)| (owner_of(r, h, new_h), owner_of(c, w, new_w))))
        .collect();
    Ok(RangeImage {
        height: new_h,
        width: new_w,
        data,
        valid: pixel_to_point.iter().map(Option::is_some).collect(),
        pixel_to_point,
        point_to_pixel,
        ranges: img.ranges.clone(),
    })
}

/// Per-point values gathered from a per-pixel tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BackProjection {
    /// `[N, D]`
    pub features: Tensor,
    /// Points with no pixel; their feature rows are zero.
    pub dropped: Vec<bool>,
}

/// Gathers `per_pixel[H, W, D]` onto every point of `img`.
pub fn back_project(per_pixel: &Tensor, img: &RangeImage) -> Result<BackProjection> {
    if per_pixel.rank() != 3 || per_pixel.dim(0) != img.height || per_pixel.dim(1) != img.width
    {
        return Err(Error::argument(format!(
            "back_project: per-pixel tensor {:?} does not match a {}x{} image",
            per_pixel.shape(),
            img.height,
            img.width
        )));
    }
    let d = per_pixel.dim(2);
    let n = img.num_points();
    let src = per_pixel.data();
    let mut out = vec![0.0; n * d];
    par::for_each_chunk(&mut out, d.max(1), |i, row| {
        if let Some((r, c)) = img.point_to_pixel[i] {
            let s = (r * img.width + c) * d;
            row.copy_from_slice(&src[s..s + d]);
        }
    });
    Ok(BackProjection {
        features: Tensor::from_vec(&[n, d], out)?,
        dropped: img.point_to_pixel.iter().map(Option::is_none).collect(),
    })
}

/// A crop of a range image.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub image: RangeImage,
    /// First source column; the crop covers `start..start + width` modulo W.
    pub start: usize,
    /// Points whose pixel fell outside the crop.
    pub cropped_out: Vec<bool>,
}

/// Crops columns `start..start + width` (wrapping) at full height.
pub fn crop_columns(img: &RangeImage, start: usize, width: usize) -> Result<Crop> {
    let w = img.width;
    if width == 0 || width > w {
        return Err(Error::argument(format!(
            "crop width {width} outside 1..={w}"
        )));
    }
    let start = start % w;
    let h = img.height;
    let src = img.data.data();
    let mut data = Vec::with_capacity(h * width * CHANNELS);
    let mut pixel_to_point = Vec::with_capacity(h * width);
    for r in 0..h {
        for k in 0..width {
            let c = (start + k) % w;
            let p = r * w + c;
            data.extend_from_slice(&src[p * CHANNELS..(p + 1) * CHANNELS]);
            pixel_to_point.push(img.pixel_to_point[p]);
        }
    }
    let mut cropped_out = vec![false; img.num_points()];
    let point_to_pixel = img
        .point_to_pixel
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (r, c) = (*p)?;
            let k = (c + w - start) % w;
            if k < width {
                Some((r, k))
            } else {
                cropped_out[i] = true;
                None
            }
        })
        .collect();
    Ok(Crop {
        image: RangeImage {
            height: h,
            width,
            data: Tensor::from_vec(&[h, width, CHANNELS], data)?,
            valid: pixel_to_point.iter().map(Option::is_some).collect(),
            pixel_to_point,
            point_to_pixel,
            ranges: img.ranges.clone(),
        },
        start,
        cropped_out,
    })
}

/// Crop with a uniformly drawn start column.
pub fn random_crop<R: Rng>(img: &RangeImage, width: usize, rng: &mut R) -> Result<Crop> {
    let start = rng.gen_range(0..img.width);
    crop_columns(img, start, width)
}

/// Mirrors columns `c -> W - 1 - c`; the 3D points are untouched.
pub fn horizontal_flip(img: &RangeImage) -> RangeImage {
    let (h, w) = (img.height, img.width);
    let src = img.data.data();
    let mut data = vec![0.0; src.len()];
    let mut pixel_to_point = vec![None; h * w];
    for r in 0..h {
        for c in 0..w {
            let from = r * w + c;
            let to = r * w + (w - 1 - c);
            data[to * CHANNELS..(to + 1) * CHANNELS]
                .copy_from_slice(&src[from * CHANNELS..(from + 1) * CHANNELS]);
            pixel_to_point[to] = img.pixel_to_point[from];
        }
    }
    RangeImage {
        height: h,
        width: w,
        data: Tensor::from_vec(&[h, w, CHANNELS], data).expect("same size"),
        valid: pixel_to_point.iter().map(Option::is_some).collect(),
        pixel_to_point,
        point_to_pixel: img
            .point_to_pixel
            .iter()
            .map(|p| p.map(|(r, c)| (r, w - 1 - c)))
            .collect(),
        ranges: img.ranges.clone(),
    }
}

pub fn hwc_to_chw(t: &Tensor) -> Tensor {
    let (h, w, c) = (t.dim(0), t.dim(1), t.dim(2));
    let src = t.data();
    let mut out = vec![0.0; h * w * c];
    for p in 0..h * w {
        for k in 0..c {
            out[k * h * w + p] = src[p * c + k];
        }
    }
    Tensor::from_vec(&[c, h, w], out).expect("same size")
}

pub fn chw_to_hwc(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let src = t.data();
    let mut out = vec![0.0; h * w * c];
    for k in 0..c {
        for p in 0..h * w {
            out[p * c + k] = src[k * h * w + p];
        }
    }
    Tensor::from_vec(&[h, w, c], out).expect("same size")
}

const KPRI_MAGIC: &[u8; 4] = b"KPRI";
const KPRI_VERSION: u32 = 1;

/// On-disk range image: `KPRI`, u32 version, u32 H, u32 W, u32 C, then
/// `H*W*C` f32 (row-major, channel fastest) and `H*W` i64 pixel owners
/// (`-1` for empty), all little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImageFile {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub data: Vec<f32>,
    pub pixel_to_point: Vec<i64>,
}

impl RangeImageFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let pixels = self.height as usize * self.width as usize;
        if self.data.len() != pixels * self.channels as usize || self.pixel_to_point.len() != pixels
        {
            return Err(Error::argument("range image payload does not match header"));
        }
        let mut out = Vec::with_capacity(20 + self.data.len() * 4 + pixels * 8);
        out.extend_from_slice(KPRI_MAGIC);
        for v in [KPRI_VERSION, self.height, self.width, self.channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.pixel_to_point {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != KPRI_MAGIC {
            return Err(Error::format("missing KPRI header"));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
        let (version, height, width, channels) = (word(0), word(1), word(2), word(3));
        if version != KPRI_VERSION {
            return Err(Error::format(format!("unsupported KPRI version {version}")));
        }
        let pixels = height as usize * width as usize;
        let n_data = pixels * channels as usize;
        let expected = 20 + n_data * 4 + pixels * 8;
        if bytes.len() != expected {
            return Err(Error::format(format!(
                "KPRI payload is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let body = &bytes[20..];
        let data = body[..n_data * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let pixel_to_point = body[n_data * 4..]
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(RangeImageFile {
            height,
            width,
            channels,
            data,
            pixel_to_point,
        })
    }
}
