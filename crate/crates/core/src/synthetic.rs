//! Synthetic labeled LiDAR scans: a walled courtyard of simple primitives
//! swept by a simulated multi-beam sensor at the origin.
//!
//! Points are emitted beam by beam, top beam first, each beam sweeping yaw
//! from +pi down to -pi, which is the capture order scan unfolding expects.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kitti_io::PointCloud;

pub const CAR: u8 = 0;
pub const PERSON: u8 = 5;
pub const ROAD: u8 = 8;
pub const SIDEWALK: u8 = 10;
pub const BUILDING: u8 = 12;
pub const VEGETATION: u8 = 14;
pub const TRUNK: u8 = 15;
pub const TERRAIN: u8 = 16;
pub const POLE: u8 = 17;

const SENSOR_HEIGHT: f64 = 1.73;
const WALL_HEIGHT: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorConfig {
    pub beams: usize,
    /// Returns per beam per revolution.
    pub azimuth_samples: usize,
    /// Elevation of the top and bottom beams, radians.
    pub elevation_top: f64,
    pub elevation_bottom: f64,
    /// Per-beam elevation jitter as a fraction of the beam spacing.
    pub elevation_jitter: f64,
    /// Fraction of an azimuth step added to every yaw.
    pub azimuth_phase: f64,
    /// Standard deviation of additive range noise, meters.
    pub range_noise: f64,
    /// Half-width of uniform remission noise.
    pub remission_noise: f64,
    /// Probability that a return is lost.
    pub dropout: f64,
}

impl SensorConfig {
    /// A sensor whose beams fall inside the default vertical field of view.
    pub fn new(beams: usize, azimuth_samples: usize) -> Self {
        SensorConfig {
            beams,
            azimuth_samples,
            elevation_top: 2.5f64.to_radians(),
            elevation_bottom: -24.5f64.to_radians(),
            elevation_jitter: 0.15,
            azimuth_phase: 0.0,
            range_noise: 0.0,
            remission_noise: 0.02,
            dropout: 0.0,
        }
    }

    /// The same sensor with measurement noise and a shifted azimuth grid.
    pub fn noisy(self) -> Self {
        SensorConfig {
            azimuth_phase: 0.5,
            range_noise: 0.03,
            remission_noise: 0.06,
            dropout: 0.02,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    /// Axis-aligned box `min..max`.
    Cuboid { min: [f64; 3], max: [f64; 3] },
    /// Vertical cylinder.
    Cylinder { center: [f64; 2], radius: f64, z0: f64, z1: f64 },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Object {
    shape: Shape,
    label: u8,
}

/// Scene layout in sensor coordinates (ground at `z = -1.73`).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Courtyard half extents along x and y.
    half_x: f64,
    half_y: f64,
    road_half_width: f64,
    road_offset: f64,
    sidewalk_width: f64,
    objects: Vec<Object>,
}

fn remission_of(label: u8) -> f64 {
    match label {
        CAR => 0.30,
        PERSON => 0.20,
        ROAD => 0.08,
        SIDEWALK => 0.25,
        BUILDING => 0.45,
        VEGETATION => 0.60,
        TRUNK => 0.35,
        TERRAIN => 0.52,
        POLE => 0.40,
        _ => 0.5,
    }
}

impl Scene {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half_x = rng.gen_range(16.0..22.0);
        let half_y = rng.gen_range(12.0..16.0);
        let road_half_width = rng.gen_range(3.0..4.0);
        let road_offset = rng.gen_range(-1.0..1.0);
        let sidewalk_width = 2.0;
        let ground = -SENSOR_HEIGHT;
        let mut objects = Vec::new();
        let clear_of_sensor = |x: f64, y: f64, r: f64| x * x + y * y > (r + 2.5) * (r + 2.5);

        // cars parked along both lanes
        for _ in 0..rng.gen_range(3..6) {
            let x = rng.gen_range(-half_x + 3.0..half_x - 3.0);
            let lane = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let y = road_offset + lane * road_half_width * 0.5;
            if !clear_of_sensor(x, y, 2.5) {
                continue;
            }
            let (hl, hw) = (rng.gen_range(1.9..2.3), rng.gen_range(0.85..1.0));
            objects.push(Object {
                shape: Shape::Cuboid {
                    min: [x - hl, y - hw, ground],
                    max: [x + hl, y + hw, ground + rng.gen_range(1.4..1.7)],
                },
                label: CAR,
            });
        }
        // poles and trees on the sidewalks, people anywhere
        let sidewalk_y = |rng: &mut ChaCha8Rng| {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            road_offset + side * (road_half_width + rng.gen_range(0.3..sidewalk_width - 0.3))
        };
        for _ in 0..rng.gen_range(3..6) {
            let (x, y) = (rng.gen_range(-half_x + 1.0..half_x - 1.0), sidewalk_y(&mut rng));
            if !clear_of_sensor(x, y, 0.2) {
                continue;
            }
            objects.push(Object {
                shape: Shape::Cylinder { center: [x, y], radius: 0.12, z0: ground, z1: ground + 5.0 },
                label: POLE,
            });
        }
        for _ in 0..rng.gen_range(2..5) {
            let x = rng.gen_range(-half_x + 2.0..half_x - 2.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let y = road_offset + side * (road_half_width + sidewalk_width + rng.gen_range(1.5..4.0));
            if y.abs() > half_y - 2.0 || !clear_of_sensor(x, y, 2.0) {
                continue;
            }
            let trunk_top = ground + rng.gen_range(2.2..2.8);
            let canopy = rng.gen_range(1.3..1.8);
            objects.push(Object {
                shape: Shape::Cylinder { center: [x, y], radius: 0.25, z0: ground, z1: trunk_top },
                label: TRUNK,
            });
            objects.push(Object {
                shape: Shape::Sphere { center: [x, y, trunk_top + canopy * 0.8], radius: canopy },
                label: VEGETATION,
            });
        }
        for _ in 0..rng.gen_range(2..5) {
            let (x, y) = (rng.gen_range(-half_x + 2.0..half_x - 2.0), rng.gen_range(-half_y + 2.0..half_y - 2.0));
            if !clear_of_sensor(x, y, 0.3) {
                continue;
            }
            objects.push(Object {
                shape: Shape::Cylinder { center: [x, y], radius: 0.3, z0: ground, z1: ground + rng.gen_range(1.6..1.9) },
                label: PERSON,
            });
        }
        Scene {
            half_x,
            half_y,
            road_half_width,
            road_offset,
            sidewalk_width,
            objects,
        }
    }

    fn ground_label(&self, y: f64) -> u8 {
        let d = (y - self.road_offset).abs();
        if d <= self.road_half_width {
            ROAD
        } else if d <= self.road_half_width + self.sidewalk_width {
            SIDEWALK
        } else {
            TERRAIN
        }
    }

    /// Nearest hit along the unit direction `d` from the origin.
    fn cast(&self, d: [f64; 3]) -> Option<(f64, u8)> {
        let mut best: Option<(f64, u8)> = None;
        let mut consider = |t: f64, label: u8| {
            if t > 1e-6 && best.is_none_or(|(b, _)| t < b) {
                best = Some((t, label));
            }
        };
        // walls: leave the courtyard through the nearest side
        let mut t_wall = f64::INFINITY;
        for (dir, half) in [(d[0], self.half_x), (d[1], self.half_y)] {
            if dir.abs() > 1e-12 {
                t_wall = t_wall.min(half / dir.abs());
            }
        }
        if t_wall.is_finite() && t_wall * d[2] <= WALL_HEIGHT - SENSOR_HEIGHT {
            consider(t_wall, BUILDING);
        }
        if d[2] < 0.0 {
            let t = -SENSOR_HEIGHT / d[2];
            consider(t, self.ground_label(t * d[1]));
        }
        for o in &self.objects {
            if let Some(t) = intersect(&o.shape, d) {
                consider(t, o.label);
            }
        }
        best
    }
}

fn intersect(shape: &Shape, d: [f64; 3]) -> Option<f64> {
    match *shape {
        Shape::Cuboid { min, max } => {
            let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
            for a in 0..3 {
                if d[a].abs() < 1e-12 {
                    if 0.0 < min[a] || 0.0 > max[a] {
                        return None;
                    }
                    continue;
                }
                let (mut lo, mut hi) = (min[a] / d[a], max[a] / d[a]);
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                t0 = t0.max(lo);
                t1 = t1.min(hi);
            }
            (t0 <= t1 && t0 > 0.0).then_some(t0)
        }
        Shape::Cylinder { center, radius, z0, z1 } => {
            let a = d[0] * d[0] + d[1] * d[1];
            if a < 1e-12 {
                return None;
            }
            let b = -2.0 * (d[0] * center[0] + d[1] * center[1]);
            let c = center[0] * center[0] + center[1] * center[1] - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            let z = t * d[2];
            (t > 0.0 && z >= z0 && z <= z1).then_some(t)
        }
        Shape::Sphere { center, radius } => {
            let b = -2.0 * (d[0] * center[0] + d[1] * center[1] + d[2] * center[2]);
            let c = center.iter().map(|v| v * v).sum::<f64>() - radius * radius;
            let disc = b * b - 4.0 * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / 2.0;
            (t > 0.0).then_some(t)
        }
    }
}

/// A simulated scan with labels and the beam that produced each point.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScan {
    pub cloud: PointCloud,
    pub labels: Vec<u8>,
    pub beams: Vec<usize>,
}

/// Beam elevations, top first; the jitter is fixed by `seed`.
pub fn beam_elevations(sensor: &SensorConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_bea5);
    let n = sensor.beams;
    let spacing = if n > 1 {
        (sensor.elevation_top - sensor.elevation_bottom) / (n - 1) as f64
    } else {
        0.0
    };
    (0..n)
        .map(|b| {
            let j = rng.gen_range(-1.0..1.0) * sensor.elevation_jitter * spacing;
            sensor.elevation_top - b as f64 * spacing + j
        })
        .collect()
}

/// Sweeps `scene` with `sensor`. `seed` drives beam jitter and noise.
pub fn simulate(scene: &Scene, sensor: &SensorConfig, seed: u64) -> Result<SyntheticScan> {
    if sensor.beams == 0 || sensor.azimuth_samples == 0 {
        return Err(Error::argument("sensor needs at least one beam and one azimuth sample"));
    }
    let elevations = beam_elevations(sensor, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = sensor.azimuth_samples;
    let mut points = Vec::with_capacity(sensor.beams * a);
    let mut remission = Vec::with_capacity(sensor.beams * a);
    let mut labels = Vec::with_capacity(sensor.beams * a);
    let mut beams = Vec::with_capacity(sensor.beams * a);
    for (b, &el) in elevations.iter().enumerate() {
        for j in 0..a {
            let yaw = PI - (j as f64 + 0.5 + sensor.azimuth_phase) * 2.0 * PI / a as f64;
            let d = [el.cos() * yaw.cos(), el.cos() * yaw.sin(), el.sin()];
            let noise: f64 = rng.gen_range(-1.0..1.0);
            let rem_noise: f64 = rng.gen_range(-1.0..1.0);
            let lost = sensor.dropout > 0.0 && rng.gen_bool(sensor.dropout);
            let Some((t, label)) = scene.cast(d) else { continue };
            if lost {
                continue;
            }
            // uniform noise scaled to the requested standard deviation
            let r = (t + noise * sensor.range_noise * 3f64.sqrt()).max(0.1);
            points.push([(r * d[0]) as f32, (r * d[1]) as f32, (r * d[2]) as f32]);
            remission.push((remission_of(label) + rem_noise * sensor.remission_noise).clamp(0.0, 1.0) as f32);
            labels.push(label);
            beams.push(b);
        }
    }
    Ok(SyntheticScan {
        cloud: PointCloud::new(points, remission)?,
        labels,
        beams,
    })
}

/// `count` scans of distinct random scenes.
pub fn scan_set(count: usize, sensor: &SensorConfig, seed: u64) -> Result<Vec<SyntheticScan>> {
    (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(1000).wrapping_add(i as u64);
            simulate(&Scene::random(s), sensor, s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{project, ProjectionConfig, ProjectionMode};

    #[test]
    fn enclosed_scene_returns_every_ray() {
        let sensor = SensorConfig::new(8, 128);
        let s = simulate(&Scene::random(3), &sensor, 3).unwrap();
        assert_eq!(s.cloud.len(), 8 * 128);
        assert!(s.labels.contains(&BUILDING) && s.labels.contains(&ROAD));
    }

    #[test]
    fn simulation_is_seeded() {
        let sensor = SensorConfig::new(4, 64).noisy();
        let a = simulate(&Scene::random(1), &sensor, 9).unwrap();
        let b = simulate(&Scene::random(1), &sensor, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unfolding_recovers_beams() {
        let sensor = SensorConfig::new(16, 200);
        let s = simulate(&Scene::random(5), &sensor, 5).unwrap();
        let cfg = ProjectionConfig {
            height: 16,
            width: 128,
            mode: ProjectionMode::Unfold,
            ..Default::default()
        };
        let img = project(&s.cloud, &cfg).unwrap();
        for (i, px) in img.point_to_pixel.iter().enumerate() {
            assert_eq!(px.unwrap().0, s.beams[i]);
        }
    }

    #[test]
    fn ray_primitives_hit_where_expected() {
        let cube = Shape::Cuboid { min: [2.0, -1.0, -1.0], max: [3.0, 1.0, 1.0] };
        assert_eq!(intersect(&cube, [1.0, 0.0, 0.0]), Some(2.0));
        assert_eq!(intersect(&cube, [-1.0, 0.0, 0.0]), None);
        let cyl = Shape::Cylinder { center: [5.0, 0.0], radius: 1.0, z0: -1.0, z1: 1.0 };
        assert!((intersect(&cyl, [1.0, 0.0, 0.0]).unwrap() - 4.0).abs() < 1e-12);
        let sph = Shape::Sphere { center: [0.0, 0.0, 10.0], radius: 2.0 };
        assert!((intersect(&sph, [0.0, 0.0, 1.0]).unwrap() - 8.0).abs() < 1e-12);
    }
}
