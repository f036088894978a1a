//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 3 5`.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kprnet::checkpoint::{Checkpoint, NamedTensor};
use kprnet::gradcheck::{central_difference, relative_error};
use kprnet::kitti_io::{
    read_labels, read_point_cloud, write_labels, write_point_cloud, PointCloud, RawLabels, IGNORE,
    NUM_CLASSES,
};
use kprnet::kpconv::{
    generate_kernel_points, kpconv_forward, radius_neighbors, KPConv, KPConvConfig, PointHead,
};
use kprnet::metrics::ConfusionMatrix;
use kprnet::net2d::ops::{upsample_bilinear, upsample_bilinear_backward};
use kprnet::net2d::{Aspp, BatchNorm, Conv2d, ConvGeometry, Mode, Net2D, Net2DConfig, Relu};
use kprnet::param::{zero_grads, Entry, Visit};
use kprnet::postprocess_knn::{knn_filter, KnnConfig};
use kprnet::projection::{project, ProjectionConfig, ProjectionMode, RangeImage, RangeImageFile};
use kprnet::synthetic::{simulate, Scene, SensorConfig};
use kprnet::train::{
    cross_entropy, fit, lr_at, lr_at_time, prepare_scan, InputConfig, KprNet, PixelNet,
    PreparedScan, Scan, StepLog, TrainConfig,
};
use kprnet::Tensor;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

// ---------------------------------------------------------------- 1

/// Published per-class test IoUs, in class order.
const TABLE_IOU: [f64; NUM_CLASSES] = [
    95.5, 54.1, 47.9, 23.6, 42.6, 65.9, 65.0, 16.5, 93.2, 73.9, 80.6, 30.2, 91.7, 68.4, 85.7, 69.8,
    71.2, 58.7, 64.1,
];

fn metric_arithmetic() -> Outcome {
    let t = Instant::now();
    // per class: 1000 labeled points, IoU% * 10 of them hit, the rest missed
    let mut cm = ConfusionMatrix::new();
    for (c, &v) in TABLE_IOU.iter().enumerate() {
        let tp = (v * 10.0).round() as u64;
        cm.counts[c][c] = tp;
        cm.unassigned[c] = 1000 - tp;
    }
    for (c, iou) in cm.iou().iter().enumerate() {
        let iou = iou.ok_or("class without IoU")?;
        ensure((iou * 100.0 - TABLE_IOU[c]).abs() < 1e-9, || {
            format!("class {c}: IoU {iou} from the summary")
        })?;
    }
    let miou = cm.miou().ok_or("no mIoU")? * 100.0;
    ensure((miou - 63.1).abs() <= 0.05, || format!("mIoU {miou:.4}"))?;
    within(t.elapsed(), 1.0)?;
    Ok(format!("mIoU {miou:.4}"))
}

// ---------------------------------------------------------------- 2

fn schedule_closed_form() -> Outcome {
    let t = Instant::now();
    let cfg = TrainConfig::default();
    let total = 3000;
    let at_warm = lr_at(1000, total, &cfg);
    ensure(at_warm == 0.01875, || format!("lr(1000) = {at_warm:e}"))?;
    ensure(lr_at(0, total, &cfg) == 0.0, || "lr(0) is not 0".into())?;
    let mid = lr_at(2000, total, &cfg);
    ensure(mid == 0.009375, || format!("cosine midpoint {mid:e}"))?;
    let mut jump = 0.0f64;
    for eps in [1e-9, 1e-10, 1e-12] {
        jump = jump.max((lr_at_time(1000.0 - eps, total, &cfg) - at_warm).abs());
        jump = jump.max((lr_at_time(1000.0 + eps, total, &cfg) - at_warm).abs());
    }
    ensure(jump <= 1e-12, || format!("discontinuity {jump:e} at warmup end"))?;
    within(t.elapsed(), 1.0)?;
    Ok(format!("lr(1000) {at_warm}, midpoint {mid}, jump {jump:.1e}"))
}

// ---------------------------------------------------------------- 3

fn random_points(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.gen_range(-half..half),
                rng.gen_range(-half..half),
                rng.gen_range(-half..half),
            ]
        })
        .collect()
}

fn kpconv_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for inst in 0..100 {
        let n = rng.gen_range(1..=64);
        let k = rng.gen_range(1..=8);
        let (c_in, c_out) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let radius = rng.gen_range(0.3..0.9);
        let mut disp = generate_kernel_points(k, radius, inst).map_err(|e| e.to_string())?;
        disp.sigma = radius * rng.gen_range(0.3..0.8);
        let pts = random_points(&mut rng, n, 0.8);
        let feats = Tensor::random_uniform(&[n, c_in], 1.0, &mut rng);
        let w = Tensor::random_uniform(&[k, c_in, c_out], 1.0, &mut rng);
        let nl = radius_neighbors(&pts, radius).map_err(|e| e.to_string())?;
        let (y, _) = kpconv_forward(&feats, &pts, &nl, &disp, &w).map_err(|e| e.to_string())?;

        let (f, wd) = (feats.data(), w.data());
        for q in 0..n {
            for o in 0..c_out {
                let mut acc = 0.0;
                for j in 0..n {
                    let y3: Vec<f64> = (0..3).map(|a| pts[j][a] - pts[q][a]).collect();
                    if y3.iter().map(|v| v * v).sum::<f64>() > radius * radius {
                        continue;
                    }
                    for (kk, p) in disp.positions.iter().enumerate() {
                        let d = (0..3).map(|a| (y3[a] - p[a]).powi(2)).sum::<f64>().sqrt();
                        let h = (1.0 - d / disp.sigma).max(0.0);
                        for c in 0..c_in {
                            acc += h * f[j * c_in + c] * wd[(kk * c_in + c) * c_out + o];
                        }
                    }
                }
                worst = worst.max(relative_error(y.data()[q * c_out + o], acc, 1e-12));
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max relative error {worst:e}"))?;
    within(t.elapsed(), 5.0)?;
    Ok(format!("100 instances, max relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const FD_FLOOR: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;
const TRIALS: usize = 20;
const PROBES: usize = 6;

#[derive(Default)]
struct Check {
    worst: f64,
    checked: usize,
    /// Probes whose interval straddles a kink (ReLU); central differences
    /// say nothing there, so another coordinate is drawn.
    skipped: usize,
}

impl Check {
    /// Compares `analytic` with central differences of `eval` around `x0`.
    fn probe(&mut self, x0: f64, analytic: f64, mut eval: impl FnMut(f64) -> f64) -> bool {
        let coarse = central_difference(x0, FD_STEP, &mut eval);
        let fine = central_difference(x0, FD_STEP / 2.0, &mut eval);
        eval(x0);
        if relative_error(coarse, fine, FD_FLOOR) > 1e-2 {
            self.skipped += 1;
            return false;
        }
        self.checked += 1;
        self.worst = self.worst.max(relative_error(analytic, fine, FD_FLOOR));
        true
    }

    fn merge(&mut self, o: Check) {
        self.worst = self.worst.max(o.worst);
        self.checked += o.checked;
        self.skipped += o.skipped;
    }
}

fn param_names<M: Visit>(m: &mut M) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, e| {
        if let Entry::Param(p) = e {
            out.push((name.to_string(), p.value.len()));
        }
    });
    out
}

fn with_param<M: Visit, T>(m: &mut M, name: &str, f: impl FnOnce(&mut kprnet::param::Param) -> T) -> T {
    let mut f = Some(f);
    let mut out = None;
    m.visit("", &mut |n, e| {
        if let (Entry::Param(p), true) = (e, n == name) {
            out = Some((f.take().unwrap())(p));
        }
    });
    out.expect("parameter exists")
}

/// Gradient check of a layer: loss = sum(forward(x) * R) for a random R.
fn check_layer<M: Visit>(
    m: &mut M,
    x: &Tensor,
    fwd: &dyn Fn(&mut M, &Tensor) -> Tensor,
    bwd: &dyn Fn(&mut M, &Tensor) -> Tensor,
    rng: &mut ChaCha8Rng,
) -> Check {
    let y = fwd(m, x);
    let r = Tensor::random_uniform(y.shape(), 1.0, rng);
    zero_grads(m);
    let gx = bwd(m, &r);
    let mut check = Check::default();

    let mut xv = x.clone();
    let mut tries = 0;
    let mut done = 0;
    while done < PROBES.min(x.len()) && tries < 4 * PROBES {
        tries += 1;
        let i = rng.gen_range(0..x.len());
        let x0 = xv.data()[i];
        let ok = check.probe(x0, gx.data()[i], |v| {
            xv.data_mut()[i] = v;
            fwd(m, &xv).dot(&r)
        });
        done += usize::from(ok);
    }

    let params = param_names(m);
    if params.is_empty() {
        return check;
    }
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|(n, _)| with_param(m, n, |p| p.grad.data().to_vec()))
        .collect();
    let (mut tries, mut done) = (0, 0);
    while done < PROBES && tries < 4 * PROBES {
        tries += 1;
        let pi = rng.gen_range(0..params.len());
        let (name, len) = &params[pi];
        let i = rng.gen_range(0..*len);
        let x0 = with_param(m, name, |p| p.value.data()[i]);
        let ok = check.probe(x0, grads[pi][i], |v| {
            with_param(m, name, |p| p.value.data_mut()[i] = v);
            fwd(m, x).dot(&r)
        });
        done += usize::from(ok);
    }
    check
}

fn gradcheck_op(
    name: &str,
    mut trial: impl FnMut(&mut ChaCha8Rng) -> Check,
    seed: u64,
    report: &mut Vec<String>,
) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = Check::default();
    for _ in 0..TRIALS {
        total.merge(trial(&mut rng));
    }
    report.push(format!("{name} {:.1e} ({}/{} on kinks)", total.worst, total.skipped, total.checked + total.skipped));
    ensure(total.worst < FD_TOL, || {
        format!("{name}: max relative error {:e}", total.worst)
    })?;
    ensure(total.checked >= TRIALS && total.skipped * 10 <= total.checked, || {
        format!("{name}: {} probes checked, {} on kinks", total.checked, total.skipped)
    })
}

fn small_net() -> Net2DConfig {
    let mut cfg = Net2DConfig::with_channels(&[4, 8, 8], 1, 2, 4);
    cfg.aspp_rates = vec![1, 2];
    cfg.decoder_channels = 4;
    cfg.skip_channels = 4;
    cfg
}

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let mut report = Vec::new();

    gradcheck_op(
        "conv2d",
        |rng| {
            let groups = *[1, 2].choose(rng).unwrap();
            let kernel = *[1, 3].choose(rng).unwrap();
            let g = ConvGeometry {
                stride: rng.gen_range(1..=2),
                padding: rng.gen_range(0..=2),
                dilation: rng.gen_range(1..=2),
                groups,
            };
            let c_in = groups * rng.gen_range(1..=3);
            let c_out = groups * rng.gen_range(1..=3);
            let mut conv = Conv2d::new(c_in, c_out, kernel, g, rng.gen_bool(0.5), rng);
            let x = Tensor::random_uniform(&[2, c_in, rng.gen_range(5..9), rng.gen_range(5..9)], 1.0, rng);
            check_layer(&mut conv, &x, &|m, x| m.forward(x).unwrap(), &|m, g| m.backward(g).unwrap(), rng)
        },
        41,
        &mut report,
    )?;

    gradcheck_op(
        "batchnorm",
        |rng| {
            let c = rng.gen_range(1..=4);
            let mut bn = BatchNorm::new(c);
            for p in [&mut bn.gamma, &mut bn.beta] {
                p.value = Tensor::random_uniform(&[c], 1.0, rng);
            }
            let x = Tensor::random_uniform(&[rng.gen_range(2..4), c, 3, rng.gen_range(2..5)], 2.0, rng);
            // eval mode needs running statistics first
            bn.forward(&x, Mode::Train).unwrap();
            let mode = if rng.gen_bool(0.5) { Mode::Train } else { Mode::Eval };
            check_layer(&mut bn, &x, &|m, x| m.forward(x, mode).unwrap(), &|m, g| m.backward(g).unwrap(), rng)
        },
        42,
        &mut report,
    )?;

    gradcheck_op(
        "relu",
        |rng| {
            let mut relu = Relu::default();
            let x = Tensor::random_uniform(&[2, 3, 4, 5], 1.0, rng);
            check_layer(&mut relu, &x, &|m, x| m.forward(x), &|m, g| m.backward(g).unwrap(), rng)
        },
        43,
        &mut report,
    )?;

    struct Bilinear(usize, usize, Vec<usize>);
    impl Visit for Bilinear {
        fn visit(&mut self, _: &str, _: &mut dyn FnMut(&str, Entry<'_>)) {}
    }
    gradcheck_op(
        "bilinear",
        |rng| {
            let x = Tensor::random_uniform(&[2, 2, rng.gen_range(1..7), rng.gen_range(1..7)], 1.0, rng);
            let mut b = Bilinear(rng.gen_range(1..13), rng.gen_range(1..13), x.shape().to_vec());
            check_layer(
                &mut b,
                &x,
                &|m, x| upsample_bilinear(x, m.0, m.1).unwrap(),
                &|m, g| upsample_bilinear_backward(g, &m.2).unwrap(),
                rng,
            )
        },
        44,
        &mut report,
    )?;

    gradcheck_op(
        "aspp",
        |rng| {
            let c_in = rng.gen_range(1..=3);
            let rates: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=3)).collect();
            let mut aspp = Aspp::new(c_in, rng.gen_range(1..=3), &rates, rng).unwrap();
            let x = Tensor::random_uniform(&[2, c_in, rng.gen_range(3..6), rng.gen_range(3..7)], 1.0, rng);
            check_layer(
                &mut aspp,
                &x,
                &|m, x| m.forward(x, Mode::Train).unwrap(),
                &|m, g| m.backward(g).unwrap(),
                rng,
            )
        },
        45,
        &mut report,
    )?;

    gradcheck_op(
        "kpconv",
        |rng| {
            let n = rng.gen_range(4..40);
            let (c_in, c_out) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let k = rng.gen_range(1..=6);
            let disp = generate_kernel_points(k, 0.6, rng.gen()).unwrap();
            let pts = random_points(rng, n, 0.6);
            let nl = radius_neighbors(&pts, 0.6).unwrap();
            let mut layer = KPConv::new(disp, c_in, c_out, rng).unwrap();
            let x = Tensor::random_uniform(&[n, c_in], 1.0, rng);
            check_layer(
                &mut layer,
                &x,
                &|m, x| {
                    m.clear_saved();
                    m.forward(x, &pts, &nl).unwrap()
                },
                &|m, g| m.backward(g).unwrap(),
                rng,
            )
        },
        46,
        &mut report,
    )?;

    gradcheck_op(
        "head",
        |rng| {
            let c = rng.gen_range(1..=5);
            let mut head = PointHead::with_classes(c, rng.gen_range(2..=6), rng);
            let x = Tensor::random_uniform(&[rng.gen_range(3..20), c], 1.0, rng);
            check_layer(
                &mut head,
                &x,
                &|m, x| m.forward(x, Mode::Train).unwrap(),
                &|m, g| m.backward(g).unwrap(),
                rng,
            )
        },
        47,
        &mut report,
    )?;

    gradcheck_op(
        "cross_entropy",
        |rng| {
            let n = rng.gen_range(1..12);
            let logits = Tensor::random_uniform(&[n, NUM_CLASSES], 3.0, rng);
            let targets: Vec<u8> = (0..n)
                .map(|_| if rng.gen_bool(0.2) { IGNORE } else { rng.gen_range(0..NUM_CLASSES as u8) })
                .collect();
            let (_, g) = cross_entropy(&logits, &targets).unwrap();
            let mut check = Check::default();
            let mut x = logits.clone();
            for _ in 0..PROBES {
                let i = rng.gen_range(0..x.len());
                let x0 = x.data()[i];
                check.probe(x0, g.data()[i], |v| {
                    x.data_mut()[i] = v;
                    cross_entropy(&x, &targets).unwrap().0
                });
            }
            check
        },
        48,
        &mut report,
    )?;

    gradcheck_op(
        "net2d",
        |rng| {
            let mut net = Net2D::new(small_net(), rng).unwrap();
            let x = Tensor::random_uniform(&[2, 2, 16, 32], 1.0, rng);
            check_layer(
                &mut net,
                &x,
                &|m, x| m.forward(x, Mode::Train).unwrap(),
                &|m, g| m.backward(g).unwrap(),
                rng,
            )
        },
        49,
        &mut report,
    )?;

    within(t.elapsed(), 120.0)?;
    Ok(format!("{TRIALS} trials each; {}", report.join(", ")))
}

// ---------------------------------------------------------------- 5

fn neighbor_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pairs = 0usize;
    for cloud in 0..200 {
        let n = rng.gen_range(1..=500);
        let radius = rng.gen_range(0.05..0.6);
        let mut pts = random_points(&mut rng, n, 1.5);
        if cloud % 4 == 0 {
            // points on a lattice aligned with the voxel grid, so many sit
            // exactly on cell faces and exactly one radius apart
            for p in pts.iter_mut() {
                *p = p.map(|v| (v / radius).round() * radius);
            }
        }
        let nl = radius_neighbors(&pts, radius).map_err(|e| e.to_string())?;
        for (q, p) in pts.iter().enumerate() {
            let brute: BTreeSet<usize> = (0..n)
                .filter(|&j| {
                    let d: f64 = (0..3).map(|a| (pts[j][a] - p[a]) * (pts[j][a] - p[a])).sum();
                    d <= radius * radius
                })
                .collect();
            let got: BTreeSet<usize> = nl.neighbors(q).iter().copied().collect();
            ensure(got == brute, || format!("cloud {cloud}, query {q}: neighbor sets differ"))?;
            pairs += brute.len();
        }
    }
    within(t.elapsed(), 10.0)?;
    Ok(format!("200 clouds, {pairs} neighbor pairs"))
}

// ---------------------------------------------------------------- 6

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let mut points = Vec::with_capacity(n);
    let mut remission = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && rng.gen_bool(0.1) {
            // duplicate an earlier point to force exact range ties
            let j = rng.gen_range(0..i);
            points.push(points[j]);
        } else {
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let pitch = rng.gen_range(-27f64..5.0).to_radians();
            let r = rng.gen_range(1.0..40.0);
            points.push([
                (r * pitch.cos() * yaw.cos()) as f32,
                (r * pitch.cos() * yaw.sin()) as f32,
                (r * pitch.sin()) as f32,
            ]);
        }
        remission.push(rng.gen_range(0.0f32..1.0));
    }
    PointCloud::new(points, remission).unwrap()
}

/// Pixel of a point under spherical projection, derived independently.
fn spherical_pixel(p: [f32; 3], cfg: &ProjectionConfig) -> Option<(usize, usize)> {
    let [x, y, z] = p.map(f64::from);
    let r = (x * x + y * y + z * z).sqrt();
    if r == 0.0 {
        return None;
    }
    let pitch = (z / r).asin();
    if pitch > cfg.fov_up || pitch < -cfg.fov_down {
        return None;
    }
    let v = (cfg.fov_up - pitch) / (cfg.fov_up + cfg.fov_down);
    let row = ((v * cfg.height as f64) as usize).min(cfg.height - 1);
    let u = 0.5 * (1.0 - y.atan2(x) / std::f64::consts::PI);
    let col = ((u * cfg.width as f64) as usize).min(cfg.width - 1);
    Some((row, col))
}

fn projection_round_trip() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut winners, mut collisions, mut rebin_checked) = (0, 0, 0);
    for case in 0..50 {
        let n = rng.gen_range(1..3000);
        let cloud = random_cloud(&mut rng, n);
        let cfg = ProjectionConfig {
            height: rng.gen_range(8..64),
            width: rng.gen_range(16..512),
            ..Default::default()
        };
        let img = project(&cloud, &cfg).map_err(|e| e.to_string())?;
        let range = |i: usize| {
            let [x, y, z] = cloud.points[i].map(f64::from);
            (x * x + y * y + z * z).sqrt()
        };
        for (px, owner) in img.pixel_to_point.iter().enumerate() {
            let Some(j) = *owner else { continue };
            winners += 1;
            let (row, col) = (px / cfg.width, px % cfg.width);
            ensure(img.get(row, col, 0) == 1.0 / range(j), || {
                format!("case {case}: pixel {px} does not hold 1/range of point {j}")
            })?;
            ensure(img.get(row, col, 1) == f64::from(cloud.remission[j]), || {
                format!("case {case}: pixel {px} does not hold the remission of point {j}")
            })?;
        }
        // brute-force re-binning: every point into its own pixel, argmin
        // range with ties to the lower index
        let mut best: Vec<Option<usize>> = vec![None; cfg.height * cfg.width];
        let mut hits = vec![0usize; cfg.height * cfg.width];
        for i in 0..cloud.len() {
            let Some((r, c)) = spherical_pixel(cloud.points[i], &cfg) else { continue };
            let px = r * cfg.width + c;
            hits[px] += 1;
            let beats = match best[px] {
                None => true,
                Some(j) => range(i) < range(j) || (range(i) == range(j) && i < j),
            };
            if beats {
                best[px] = Some(i);
            }
        }
        // a few points lie within rounding of a bin edge; compare only the
        // pixels whose contents both binnings agree on
        let mut members_here = vec![Vec::new(); best.len()];
        let mut members_oracle = vec![Vec::new(); best.len()];
        for i in 0..cloud.len() {
            if let Some((r, c)) = img.point_to_pixel[i] {
                members_here[r * cfg.width + c].push(i);
            }
            if let Some((r, c)) = spherical_pixel(cloud.points[i], &cfg) {
                members_oracle[r * cfg.width + c].push(i);
            }
        }
        for px in 0..best.len() {
            if members_here[px] != members_oracle[px] {
                continue;
            }
            rebin_checked += 1;
            if hits[px] >= 2 {
                collisions += 1;
            }
            ensure(img.pixel_to_point[px] == best[px], || {
                format!("case {case}: pixel {px} winner differs from the argmin")
            })?;
        }
    }
    within(t.elapsed(), 10.0)?;
    Ok(format!("{winners} winners exact, {rebin_checked} pixels re-binned, {collisions} collisions"))
}

// ---------------------------------------------------------------- 7

fn unfold_recovery() -> Outcome {
    let t = Instant::now();
    let mut report = Vec::new();
    for (idx, &rows) in [4usize, 16, 64].iter().enumerate() {
        let sensor = SensorConfig::new(rows, 512);
        let scene = Scene::random(70 + idx as u64);
        let scan = simulate(&scene, &sensor, 700 + idx as u64).map_err(|e| e.to_string())?;
        let base = ProjectionConfig {
            height: rows,
            width: 512,
            mode: ProjectionMode::Unfold,
            ..Default::default()
        };
        let unfolded = project(&scan.cloud, &base).map_err(|e| e.to_string())?;
        let wrong = (0..scan.cloud.len())
            .filter(|&i| unfolded.point_to_pixel[i].map(|p| p.0) != Some(scan.beams[i]))
            .count();
        ensure(wrong == 0, || format!("R={rows}: {wrong} points on the wrong row"))?;
        let spherical = ProjectionConfig {
            mode: ProjectionMode::Spherical,
            ..base
        };
        let sph = project(&scan.cloud, &spherical).map_err(|e| e.to_string())?;
        let (cu, cs) = (unfolded.collision_count(), sph.collision_count());
        ensure(cu <= cs, || format!("R={rows}: {cu} unfold collisions vs {cs} spherical"))?;
        report.push(format!("R={rows} collisions {cu}/{cs}"));
    }
    within(t.elapsed(), 10.0)?;
    Ok(format!("all rows recovered; {}", report.join(", ")))
}

// ---------------------------------------------------------------- 8

/// Independent voting: candidates ordered by (range difference, visiting
/// order), first `k` vote with Gaussian weights.
fn knn_oracle(labels: &[u8], img: &RangeImage, cfg: &KnnConfig) -> Vec<u8> {
    let half = (cfg.window / 2) as i64;
    let (h, w) = (img.height as i64, img.width as i64);
    (0..img.num_points())
        .map(|i| {
            let Some((r, c)) = img.point_to_pixel[i] else { return IGNORE };
            let mut cand = Vec::new();
            for dr in -half..=half {
                for dc in -half..=half {
                    let rr = r as i64 + dr;
                    if !(0..h).contains(&rr) {
                        continue;
                    }
                    let cc = ((c as i64 + dc) % w + w) % w;
                    let px = (rr * w + cc) as usize;
                    if let Some(j) = img.pixel_to_point[px] {
                        let order = cand.len();
                        cand.push(((img.ranges[j] - img.ranges[i]).abs(), order, labels[px]));
                    }
                }
            }
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut score = [0.0; NUM_CLASSES];
            let mut rank_of = [usize::MAX; NUM_CLASSES];
            let mut voted = false;
            for (rank, &(d, _, l)) in cand.iter().take(cfg.k).enumerate() {
                if cfg.cutoff > 0.0 && d > cfg.cutoff {
                    continue;
                }
                let l = l as usize;
                let wgt = (-(d * d) / (2.0 * cfg.sigma_gauss * cfg.sigma_gauss)).exp();
                // a weight that underflows to zero is no vote at all
                if wgt == 0.0 {
                    continue;
                }
                score[l] += wgt;
                if rank_of[l] == usize::MAX {
                    rank_of[l] = rank;
                }
                voted = true;
            }
            if !voted {
                return labels[r * img.width + c];
            }
            (0..NUM_CLASSES)
                .max_by(|&a, &b| {
                    score[a].partial_cmp(&score[b]).unwrap().then(rank_of[b].cmp(&rank_of[a]))
                })
                .unwrap() as u8
        })
        .collect()
}

fn knn_agreement() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut points = 0;
    for case in 0..50 {
        let n = rng.gen_range(500..4000);
        let cloud = random_cloud(&mut rng, n);
        let cfg = ProjectionConfig {
            height: 32,
            width: 64,
            ..Default::default()
        };
        let img = project(&cloud, &cfg).map_err(|e| e.to_string())?;
        let labels: Vec<u8> = (0..32 * 64).map(|_| rng.gen_range(0..4)).collect();
        for k in [1, 3, 5] {
            for cutoff in [0.0, 1.0] {
                let kc = KnnConfig {
                    k,
                    window: *[3, 5].choose(&mut rng).unwrap(),
                    sigma_gauss: rng.gen_range(0.5..2.0),
                    cutoff,
                };
                let got = knn_filter(&labels, &img, &kc).map_err(|e| e.to_string())?;
                let want = knn_oracle(&labels, &img, &kc);
                ensure(got == want, || {
                    let i = got.iter().zip(&want).position(|(a, b)| a != b).unwrap();
                    format!("case {case}, k={k}, cutoff={cutoff}: point {i} voted {} vs {}", got[i], want[i])
                })?;
                points += got.len();
            }
        }
    }
    within(t.elapsed(), 10.0)?;
    Ok(format!("{points} votes agree"))
}

// ---------------------------------------------------------------- 9, 10

const TOY_SEED: u64 = 7;

struct ToyData {
    train: Vec<PreparedScan>,
    held_out: Vec<PreparedScan>,
}

fn toy_net() -> Net2DConfig {
    let mut cfg = Net2DConfig::with_channels(&[16, 32, 64], 1, 4, 32);
    cfg.decoder_channels = 32;
    cfg.skip_channels = 16;
    cfg
}

fn toy_kpconv() -> KPConvConfig {
    KPConvConfig {
        kernel_points: 7,
        out_channels: 32,
        ..Default::default()
    }
}

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        base_lr: 0.1,
        warmup_iters: 20,
        batch_size: 4,
        epochs: 500,
        upsample_to: None,
        seed: TOY_SEED,
        ..Default::default()
    }
}

fn toy_data() -> kprnet::Result<ToyData> {
    let input = InputConfig {
        projection: ProjectionConfig {
            height: 32,
            width: 256,
            mode: ProjectionMode::Unfold,
            ..Default::default()
        },
        upsample_to: None,
    };
    let kernel = toy_kpconv().disposition()?;
    let sensor = SensorConfig::new(32, 384);
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for i in 0..4u64 {
        let seed = TOY_SEED * 1000 + i;
        let scene = Scene::random(seed);
        let clean = simulate(&scene, &sensor, seed)?;
        // same scenes, measured again by a noisier sensor
        let noisy = simulate(&scene, &sensor.noisy(), seed + 500)?;
        let scan = Scan::new(format!("train-{i}"), clean.cloud, clean.labels)?;
        train.push(prepare_scan(scan, &input, Some(&kernel))?);
        let scan = Scan::new(format!("noisy-{i}"), noisy.cloud, noisy.labels)?;
        held_out.push(prepare_scan(scan, &input, Some(&kernel))?);
    }
    Ok(ToyData { train, held_out })
}

fn point_accuracy(preds: &[Vec<u8>], scans: &[PreparedScan]) -> f64 {
    let mut cm = ConfusionMatrix::new();
    for (p, s) in preds.iter().zip(scans) {
        cm.update(p, &s.scan.labels).unwrap();
    }
    cm.accuracy().unwrap_or(0.0)
}

struct ToyRun {
    kpr_log: Vec<StepLog>,
    pixel_log: Vec<StepLog>,
    kpr_model: KprNet,
    pixel_model: PixelNet,
}

fn toy_run(data: &ToyData) -> kprnet::Result<ToyRun> {
    let cfg = toy_train_config();
    let mut kpr = KprNet::new(toy_net(), toy_kpconv(), TOY_SEED)?;
    let kpr_log = fit(&mut kpr, &data.train, &cfg, |_, _| Ok(()))?;
    let mut pixel = PixelNet::new(toy_net(), TOY_SEED)?;
    let pixel_log = fit(&mut pixel, &data.train, &cfg, |_, _| Ok(()))?;
    Ok(ToyRun {
        kpr_log,
        pixel_log,
        kpr_model: kpr,
        pixel_model: pixel,
    })
}

fn end_to_end(data: &ToyData, run: &mut ToyRun, elapsed: Duration) -> Outcome {
    let t = Instant::now();
    let reached = run
        .kpr_log
        .iter()
        .find(|l| l.stats.loss < 0.05 && l.stats.accuracy() >= 0.99);
    let last = run.kpr_log.last().ok_or("empty training log")?;
    let Some(reached) = reached else {
        return Err(format!(
            "not reached in {} steps; final loss {:.4}, accuracy {:.4}",
            run.kpr_log.len(),
            last.stats.loss,
            last.stats.accuracy()
        ));
    };
    let err = |e: kprnet::Error| e.to_string();
    let kpr_preds = data
        .held_out
        .iter()
        .map(|s| run.kpr_model.predict(s))
        .collect::<kprnet::Result<Vec<_>>>()
        .map_err(err)?;
    let knn = KnnConfig::default();
    let knn_preds = data
        .held_out
        .iter()
        .map(|s| run.pixel_model.predict(s, Some(&knn)))
        .collect::<kprnet::Result<Vec<_>>>()
        .map_err(err)?;
    let kpr_acc = point_accuracy(&kpr_preds, &data.held_out);
    let knn_acc = point_accuracy(&knn_preds, &data.held_out);
    let detail = format!(
        "loss {:.4} / accuracy {:.4} at step {}; held-out noisy accuracy kpconv {:.4} vs knn {:.4}",
        reached.stats.loss,
        reached.stats.accuracy(),
        reached.step,
        kpr_acc,
        knn_acc
    );
    ensure(knn_acc <= kpr_acc, || format!("knn beats kpconv: {detail}"))?;
    within(elapsed + t.elapsed(), 600.0)?;
    Ok(detail)
}

fn same_bits(a: &[StepLog], b: &[StepLog]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.stats.loss.to_bits() == y.stats.loss.to_bits() && x.lr.to_bits() == y.lr.to_bits())
}

fn determinism(data: &ToyData, first: &ToyRun) -> Outcome {
    let second = toy_run(data).map_err(|e| e.to_string())?;
    ensure(same_bits(&first.kpr_log, &second.kpr_log), || "kpconv model loss logs differ".into())?;
    ensure(same_bits(&first.pixel_log, &second.pixel_log), || "pixel model loss logs differ".into())?;
    Ok(format!(
        "{} + {} logged losses bit-identical",
        first.kpr_log.len(),
        first.pixel_log.len()
    ))
}

// ---------------------------------------------------------------- 11

fn io_round_trips() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let finite = |rng: &mut ChaCha8Rng| loop {
        let v = f32::from_bits(rng.gen());
        if v.is_finite() {
            return v;
        }
    };
    for _ in 0..20 {
        let n = rng.gen_range(0..2000);
        let cloud = PointCloud::new(
            (0..n).map(|_| [finite(&mut rng), finite(&mut rng), finite(&mut rng)]).collect(),
            (0..n).map(|_| finite(&mut rng)).collect(),
        )
        .map_err(|e| e.to_string())?;
        let back = read_point_cloud(&write_point_cloud(&cloud)).map_err(|e| e.to_string())?;
        let bits = |c: &PointCloud| -> Vec<u32> {
            c.points.iter().flatten().chain(&c.remission).map(|v| v.to_bits()).collect()
        };
        ensure(bits(&back) == bits(&cloud), || ".bin round trip changed bits".into())?;

        let labels = RawLabels {
            raw: (0..n).map(|_| rng.gen()).collect(),
        };
        let back = read_labels(&write_labels(&labels)).map_err(|e| e.to_string())?;
        ensure(back == labels, || ".label round trip changed values".into())?;

        let (h, w) = (rng.gen_range(1..20u32), rng.gen_range(1..40u32));
        let img = RangeImageFile {
            height: h,
            width: w,
            channels: 2,
            data: (0..h * w * 2).map(|_| f32::from_bits(rng.gen())).collect(),
            pixel_to_point: (0..h * w).map(|_| rng.gen_range(-1..1_000_000)).collect(),
        };
        let back = RangeImageFile::decode(&img.encode().map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        ensure(
            back.height == h
                && back.width == w
                && back.pixel_to_point == img.pixel_to_point
                && back.data.iter().map(|v| v.to_bits()).eq(img.data.iter().map(|v| v.to_bits())),
            || "KPRI round trip changed bits".into(),
        )?;

        let ckpt = Checkpoint {
            tensors: (0..rng.gen_range(0..6))
                .map(|i| {
                    let shape: Vec<u32> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(1..6)).collect();
                    let len = shape.iter().product::<u32>() as usize;
                    NamedTensor {
                        name: format!("layer{i}.weight"),
                        shape,
                        data: (0..len).map(|_| f32::from_bits(rng.gen())).collect(),
                    }
                })
                .collect(),
        };
        let back = Checkpoint::decode(&ckpt.encode().map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let flat = |c: &Checkpoint| -> Vec<(String, Vec<u32>, Vec<u32>)> {
            c.tensors
                .iter()
                .map(|t| (t.name.clone(), t.shape.clone(), t.data.iter().map(|v| v.to_bits()).collect()))
                .collect()
        };
        ensure(flat(&back) == flat(&ckpt), || "KPRW round trip changed bits".into())?;
    }
    within(t.elapsed(), 5.0)?;
    Ok("20 random payloads per format bit-exact".into())
}

// ----------------------------------------------------------------

fn report(num: u32, name: &str, outcome: Outcome, elapsed: Duration) -> bool {
    let secs = elapsed.as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  {num:>2} {name}: {detail} [{secs:.1} s]");
            true
        }
        Err(detail) => {
            println!("FAIL  {num:>2} {name}: {detail} [{secs:.1} s]");
            false
        }
    }
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t = Instant::now();
    let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|_| Err("panicked".into()));
    (out, t.elapsed())
}

fn main() {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut all_ok = true;

    let simple: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "metric arithmetic", metric_arithmetic),
        (2, "schedule closed form", schedule_closed_form),
        (3, "kpconv oracle", kpconv_oracle),
        (4, "gradient checks", gradient_checks),
        (5, "neighbor search oracle", neighbor_oracle),
        (6, "projection round trip", projection_round_trip),
        (7, "scan unfolding", unfold_recovery),
        (8, "knn filter oracle", knn_agreement),
        (11, "io round trips", io_round_trips),
    ];
    for (num, name, f) in simple {
        if run(num) {
            let (out, dt) = timed(f);
            all_ok &= report(num, name, out, dt);
        }
    }

    if run(9) || run(10) {
        let t = Instant::now();
        let prepared = toy_data().and_then(|d| toy_run(&d).map(|r| (d, r)));
        let elapsed = t.elapsed();
        match prepared {
            Ok((data, mut first)) => {
                if run(9) {
                    let (out, dt) = timed(|| end_to_end(&data, &mut first, elapsed));
                    all_ok &= report(9, "end-to-end overfit", out, elapsed + dt);
                }
                if run(10) {
                    let (out, dt) = timed(|| determinism(&data, &first));
                    all_ok &= report(10, "determinism", out, dt);
                }
            }
            Err(e) => {
                for (num, name) in [(9, "end-to-end overfit"), (10, "determinism")] {
                    if run(num) {
                        all_ok &= report(num, name, Err(e.to_string()), elapsed);
                    }
                }
            }
        }
    }

    if !all_ok {
        std::process::exit(1);
    }
}
