use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Rigid kernel point layout of a point convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDisposition {
    /// `K` positions in meters; index 0 is the origin.
    pub positions: Vec<[f64; 3]>,
    /// Distance at which a kernel point's influence reaches zero.
    pub sigma: f64,
    /// Neighborhood radius.
    pub radius: f64,
}

impl KernelDisposition {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::argument("kernel disposition has no points"));
        }
        if self.positions[0] != [0.0; 3] {
            return Err(Error::argument("kernel point 0 must be the origin"));
        }
        if !(self.radius > 0.0 && self.sigma > 0.0) {
            return Err(Error::argument("kernel radius and sigma must be positive"));
        }
        for (i, p) in self.positions.iter().enumerate() {
            if norm(*p) > self.radius * (1.0 + 1e-6) {
                return Err(Error::argument(format!(
                    "kernel point {i} lies outside the radius"
                )));
            }
            for q in &self.positions[..i] {
                if dist(*p, *q) == 0.0 {
                    return Err(Error::argument(format!("kernel point {i} is duplicated")));
                }
            }
        }
        Ok(())
    }

    /// Smallest distance between two kernel points (infinite for `K = 1`).
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, p) in self.positions.iter().enumerate() {
            for q in &self.positions[..i] {
                best = best.min(dist(*p, *q));
            }
        }
        best
    }
}

fn norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

/// Repulsion between every pair plus a quadratic pull towards the center,
/// for positions in unit-radius space.
fn energy(points: &[[f64; 3]]) -> f64 {
    let mut e = 0.0;
    for (i, p) in points.iter().enumerate() {
        for q in &points[..i] {
            e += 1.0 / dist(*p, *q);
        }
        if i > 0 {
            e += 0.5 * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        }
    }
    e
}

fn energy_gradient(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut grad = vec![[0.0; 3]; points.len()];
    for i in 1..points.len() {
        let p = points[i];
        let mut g = p;
        for (j, q) in points.iter().enumerate() {
            if j == i {
                continue;
            }
            let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            let r = norm(d);
            let r3 = r * r * r;
            for a in 0..3 {
                g[a] -= d[a] / r3;
            }
        }
        grad[i] = g;
    }
    grad
}

const MAX_ITERS: usize = 20_000;
const TOLERANCE: f64 = 1e-6;

/// Kernel points by mutual repulsion inside the unit ball, rescaled so the
/// non-center points have mean norm `0.75 * radius`. Sigma defaults to half
/// the radius.
pub fn generate_kernel_points(k: usize, radius: f64, seed: u64) -> Result<KernelDisposition> {
    generate_kernel_points_traced(k, radius, seed).map(|(d, _)| d)
}

/// Like [`generate_kernel_points`], also returning the unit-space positions
/// after every accepted descent step (the first entry is the initial draw).
pub fn generate_kernel_points_traced(
    k: usize,
    radius: f64,
    seed: u64,
) -> Result<(KernelDisposition, Vec<Vec<[f64; 3]>>)> {
    if k == 0 {
        return Err(Error::argument("kernel point count must be at least 1"));
    }
    if !(radius > 0.0) {
        return Err(Error::argument("kernel radius must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = vec![[0.0; 3]];
    while pts.len() < k {
        let p = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = norm(p);
        if n > 0.05 && n <= 1.0 && pts.iter().all(|q| dist(p, *q) > 1e-3) {
            pts.push(p);
        }
    }

    let mut trace = vec![pts.clone()];
    let mut step = 0.01;
    let mut e = energy(&pts);
    for _ in 0..MAX_ITERS {
        if k == 1 {
            break;
        }
        let grad = energy_gradient(&pts);
        let mut accepted = false;
        while step > 1e-14 {
            let cand: Vec<[f64; 3]> = pts
                .iter()
                .zip(&grad)
                .map(|(p, g)| [p[0] - step * g[0], p[1] - step * g[1], p[2] - step * g[2]])
                .collect();
            let ec = energy(&cand);
            if ec <= e {
                let moved = pts
                    .iter()
                    .zip(&cand)
                    .map(|(a, b)| dist(*a, *b))
                    .fold(0.0, f64::max);
                pts = cand;
                e = ec;
                step *= 1.2;
                accepted = true;
                trace.push(pts.clone());
                if moved < TOLERANCE {
                    return finish(pts, radius, trace);
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    finish(pts, radius, trace)
}

fn finish(
    pts: Vec<[f64; 3]>,
    radius: f64,
    trace: Vec<Vec<[f64; 3]>>,
) -> Result<(KernelDisposition, Vec<Vec<[f64; 3]>>)> {
    let mut scale = radius;
    if pts.len() > 1 {
        let mean = pts[1..].iter().map(|p| norm(*p)).sum::<f64>() / (pts.len() - 1) as f64;
        let max = pts[1..].iter().map(|p| norm(*p)).fold(0.0, f64::max);
        scale = 0.75 * radius / mean;
        // an uneven layout could push the outer shell past the radius
        scale = scale.min(radius / max);
    }
    // f32-representable positions survive checkpoint round trips exactly
    let positions = pts
        .iter()
        .map(|p| p.map(|v| f64::from((v * scale) as f32)))
        .collect();
    let disposition = KernelDisposition {
        positions,
        sigma: radius / 2.0,
        radius,
    };
    Ok((disposition, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_kernel_point_is_the_origin() {
        let d = generate_kernel_points(1, 0.6, 1).unwrap();
        assert_eq!(d.positions, vec![[0.0; 3]]);
        d.validate().unwrap();
    }

    #[test]
    fn two_points_sit_at_three_quarters_radius() {
        for seed in 0..4 {
            let d = generate_kernel_points(2, 0.6, seed).unwrap();
            assert_eq!(d.positions[0], [0.0; 3]);
            assert!((norm(d.positions[1]) - 0.45).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_points_is_an_error() {
        assert!(matches!(generate_kernel_points(0, 1.0, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn fifteen_points_descend_and_spread_out() {
        let (d, trace) = generate_kernel_points_traced(15, 0.6, 42).unwrap();
        d.validate().unwrap();
        assert!(d.min_pairwise_distance() > 0.3 * 0.6);
        // recompute the energy of every snapshot independently
        let recompute = |pts: &Vec<[f64; 3]>| {
            let mut e = 0.0;
            for i in 0..pts.len() {
                for j in (i + 1)..pts.len() {
                    let d: f64 = (0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum();
                    e += 1.0 / d.sqrt();
                }
            }
            e + pts[1..].iter().map(|p| 0.5 * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2])).sum::<f64>()
        };
        let energies: Vec<f64> = trace.iter().map(recompute).collect();
        assert!(energies.len() > 10);
        for w in energies.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
        let mean = d.positions[1..].iter().map(|p| norm(*p)).sum::<f64>() / 14.0;
        assert!((mean - 0.45).abs() < 1e-6);
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(
            generate_kernel_points(7, 1.0, 3).unwrap(),
            generate_kernel_points(7, 1.0, 3).unwrap()
        );
    }
}
