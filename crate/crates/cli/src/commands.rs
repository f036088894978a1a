use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};

use kprnet::checkpoint::Checkpoint;
use kprnet::kitti_io::{
    discover_scans, load_labels, load_point_cloud, parse_sequence_list, remap, sequence_dir,
    write_file, write_labels, write_point_cloud, write_predictions, LabelMap, RawLabels, ScanPaths,
};
use kprnet::kpconv::generate_kernel_points;
use kprnet::metrics::ConfusionMatrix;
use kprnet::par;
use kprnet::postprocess_knn::{knn_filter, pixel_labels_from_points};
use kprnet::projection::{self, upsample_nearest};
use kprnet::synthetic::{simulate, Scene, SensorConfig};
use kprnet::train::{
    fit, load_model, log_to_csv, prepare_scan, save_model, InputConfig, KprNet, Model, PixelNet,
    PreparedScan, Scan, StepLog,
};

use crate::config::{ModelKind, RunConfig};

/// `<root>/sequences/NN/predictions/<frame>.label`
pub fn prediction_path(root: &Path, sequence: u32, frame: &str) -> PathBuf {
    sequence_dir(root, sequence)
        .join("predictions")
        .join(format!("{frame}.label"))
}

fn scan_name(s: &ScanPaths) -> String {
    format!("{:02}/{}", s.sequence, s.frame)
}

/// Runs `f` over the scans on the worker pool, results in input order.
fn each_scan<T: Send>(
    scans: &[ScanPaths],
    f: impl Fn(&ScanPaths) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    par::map_slice(scans, |s| f(s).with_context(|| format!("scan {}", scan_name(s))))
        .into_iter()
        .collect()
}

fn labeled_scan(s: &ScanPaths, map: &LabelMap) -> Result<Scan> {
    let cloud = load_point_cloud(&s.velodyne)?;
    let Some(label_path) = &s.label else {
        bail!("no ground truth labels next to {}", s.velodyne.display());
    };
    let labels = remap(&load_labels(label_path)?, map);
    Ok(Scan::new(scan_name(s), cloud, labels)?)
}

fn find_scans(cfg: &RunConfig, sequences: &[u32]) -> Result<Vec<ScanPaths>> {
    let root = cfg.data_root()?;
    let scans = discover_scans(&root, sequences)?;
    if scans.is_empty() {
        bail!("no scans under {} for sequences {:?}", root.display(), sequences);
    }
    Ok(scans)
}

pub fn project(cfg: &RunConfig, paths: &[PathBuf], out: &Path, stats: bool) -> Result<()> {
    let input = cfg.input()?;
    let rows = par::map_slice(paths, |path| -> Result<String> {
        let cloud = load_point_cloud(path)?;
        let mut img = projection::project(&cloud, &input.projection).with_context(|| path.display().to_string())?;
        let line = format!(
            "{}\t{}\t{}\t{}",
            path.display(),
            cloud.len(),
            img.dropped_count(),
            img.collision_count()
        );
        if let Some((h, w)) = input.upsample_to {
            img = upsample_nearest(&img, h, w)?;
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let bytes = img.to_file().encode()?;
        write_file(&out.join(format!("{stem}.kpri")), &bytes)?;
        Ok(line)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    if stats {
        println!("file\tpoints\tdropped\tcollisions");
        for r in rows {
            println!("{r}");
        }
    }
    Ok(())
}

fn prepare_all(
    cfg: &RunConfig,
    scans: &[ScanPaths],
    input: &InputConfig,
    kind: ModelKind,
) -> Result<Vec<PreparedScan>> {
    let map = cfg.label_map()?;
    let kernel = match kind {
        ModelKind::Kpr => Some(cfg.kpconv()?.disposition()?),
        ModelKind::Pixel => None,
    };
    each_scan(scans, |s| {
        Ok(prepare_scan(labeled_scan(s, &map)?, input, kernel.as_ref())?)
    })
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let kind = cfg.model_kind()?;
    let tcfg = cfg.train()?;
    let input = cfg.input()?;
    let scans = find_scans(cfg, &cfg.train_sequences()?)?;
    let t = Instant::now();
    let prepared = prepare_all(cfg, &scans, &input, kind)?;
    eprintln!("prepared {} scans in {:.1} s", prepared.len(), t.elapsed().as_secs_f64());

    let seed = cfg.seed()?;
    let mut model = match kind {
        ModelKind::Kpr => Model::Kpr(KprNet::new(cfg.net()?, cfg.kpconv()?, seed)?),
        ModelKind::Pixel => Model::Pixel(PixelNet::new(cfg.net()?, seed)?),
    };
    let total = tcfg.total_steps(prepared.len());
    let every = tcfg.checkpoint_every;
    let report = (total / 20).max(1);
    let progress = |l: &StepLog| {
        if l.step.is_multiple_of(report) || l.step + 1 == total {
            eprintln!(
                "step {}/{} epoch {} lr {:.3e} loss {:.4} acc {:.4}",
                l.step + 1,
                total,
                l.epoch,
                l.lr,
                l.stats.loss,
                l.stats.accuracy()
            );
        }
        every > 0 && (l.step + 1).is_multiple_of(every)
    };
    let snapshot = |step: usize, mut m: Model| {
        save_model(&mut m, &input).save(&out.join(format!("step{step:06}.kprw")))
    };
    let log = match &mut model {
        Model::Kpr(m) => fit(m, &prepared, &tcfg, |l, m| {
            if progress(l) {
                snapshot(l.step + 1, Model::Kpr(m.clone()))?;
            }
            Ok(())
        })?,
        Model::Pixel(m) => fit(m, &prepared, &tcfg, |l, m| {
            if progress(l) {
                snapshot(l.step + 1, Model::Pixel(m.clone()))?;
            }
            Ok(())
        })?,
    };
    write_file(&out.join("metrics.csv"), log_to_csv(&log).as_bytes())?;
    save_model(&mut model, &input).save(&out.join("model.kprw"))?;
    eprintln!("wrote {}", out.join("model.kprw").display());
    Ok(())
}

pub fn infer(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let (model, input) = load_model(&Checkpoint::load(checkpoint)?)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let map = cfg.label_map()?;
    let root = cfg.data_root()?;
    let scans = discover_scans(&root, &cfg.val_sequences()?)?;
    if scans.is_empty() {
        bail!("no scans under {}", root.display());
    }
    let kernel = match &model {
        Model::Kpr(m) => Some(m.kpconv.disposition.clone()),
        Model::Pixel(_) => None,
    };
    each_scan(&scans, |s| {
        let cloud = load_point_cloud(&s.velodyne)?;
        let p = prepare_scan(Scan::unlabeled(scan_name(s), cloud), &input, kernel.as_ref())?;
        let preds = match model.clone() {
            Model::Kpr(mut m) => m.predict(&p)?,
            Model::Pixel(mut m) => m.predict(&p, None)?,
        };
        write_file(&prediction_path(out, s.sequence, &s.frame), &write_predictions(&preds, &map)?)?;
        Ok(())
    })?;
    eprintln!("wrote {} prediction files under {}", scans.len(), out.display());
    Ok(())
}

pub fn postprocess(cfg: &RunConfig, predictions: &Path, out: &Path) -> Result<()> {
    let map = cfg.label_map()?;
    let input = cfg.input()?;
    let knn = cfg.knn()?;
    let scans = find_scans(cfg, &cfg.val_sequences()?)?;
    each_scan(&scans, |s| {
        let cloud = load_point_cloud(&s.velodyne)?;
        let pred_path = prediction_path(predictions, s.sequence, &s.frame);
        let preds = remap(&load_labels(&pred_path)?, &map);
        if preds.len() != cloud.len() {
            bail!("{}: {} labels for {} points", pred_path.display(), preds.len(), cloud.len());
        }
        let mut img = projection::project(&cloud, &input.projection)?;
        if let Some((h, w)) = input.upsample_to {
            img = upsample_nearest(&img, h, w)?;
        }
        let pixels = pixel_labels_from_points(&preds, &img)?;
        let filtered = knn_filter(&pixels, &img, &knn)?;
        write_file(&prediction_path(out, s.sequence, &s.frame), &write_predictions(&filtered, &map)?)?;
        Ok(())
    })?;
    eprintln!("filtered {} prediction files into {}", scans.len(), out.display());
    Ok(())
}

pub fn confusion(cfg: &RunConfig, predictions: &Path) -> Result<ConfusionMatrix> {
    let map = cfg.label_map()?;
    let scans = find_scans(cfg, &cfg.val_sequences()?)?;
    let parts = each_scan(&scans, |s| {
        let Some(gt_path) = &s.label else {
            bail!("no ground truth labels next to {}", s.velodyne.display());
        };
        let gt = remap(&load_labels(gt_path)?, &map);
        let pred = remap(&load_labels(&prediction_path(predictions, s.sequence, &s.frame))?, &map);
        Ok(ConfusionMatrix::from_labels(&pred, &gt)?)
    })?;
    let mut total = ConfusionMatrix::new();
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

pub fn eval(cfg: &RunConfig, predictions: &Path, csv: Option<&Path>) -> Result<()> {
    let cm = confusion(cfg, predictions)?;
    print!("{}", cm.to_text_table());
    if let Some(acc) = cm.accuracy() {
        println!("{:<16} {:>8.4}", "accuracy", acc);
    }
    if let Some(path) = csv {
        write_file(path, cm.to_csv().as_bytes())?;
    }
    Ok(())
}

pub fn kernel_points(cfg: &RunConfig, out: &Path) -> Result<()> {
    let kp = cfg.kpconv()?;
    let d = generate_kernel_points(kp.kernel_points, kp.radius, kp.seed)?;
    let mut text = String::new();
    let _ = writeln!(text, "# kernel points: {} radius: {} sigma: {}", d.len(), d.radius, d.sigma);
    for p in &d.positions {
        let _ = writeln!(text, "{} {} {}", p[0], p[1], p[2]);
    }
    write_file(out, text.as_bytes())?;
    println!(
        "{} points, radius {}, min pairwise distance {:.4}",
        d.len(),
        d.radius,
        d.min_pairwise_distance()
    );
    Ok(())
}

pub fn synth(
    cfg: &RunConfig,
    out: &Path,
    sequences: &str,
    per_sequence: usize,
    beams: usize,
    azimuth: usize,
    noisy: bool,
) -> Result<()> {
    let map = cfg.label_map()?;
    let seed = cfg.seed()?;
    let mut sensor = SensorConfig::new(beams, azimuth);
    if noisy {
        sensor = sensor.noisy();
    }
    let jobs: Vec<(u32, usize)> = parse_sequence_list(sequences)?
        .into_iter()
        .flat_map(|s| (0..per_sequence).map(move |f| (s, f)))
        .collect();
    let written = par::map_slice(&jobs, |&(seq, frame)| -> Result<()> {
        let s = seed
            .wrapping_mul(1_000_003)
            .wrapping_add(u64::from(seq) * 10_000 + frame as u64);
        let scan = simulate(&Scene::random(s), &sensor, s)?;
        let raw = scan
            .labels
            .iter()
            .map(|&l| map.inverse(l))
            .collect::<kprnet::Result<Vec<u16>>>()?;
        let dir = sequence_dir(out, seq);
        let name = format!("{frame:06}");
        write_file(&dir.join("velodyne").join(format!("{name}.bin")), &write_point_cloud(&scan.cloud))?;
        write_file(
            &dir.join("labels").join(format!("{name}.label")),
            &write_labels(&RawLabels::from_semantic(&raw)),
        )?;
        Ok(())
    });
    written.into_iter().collect::<Result<Vec<_>>>()?;
    println!("wrote {} scans under {}", jobs.len(), out.display());
    Ok(())
}
