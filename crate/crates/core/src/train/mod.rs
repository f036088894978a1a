//! Loss, optimizer, learning-rate schedule and the training loop.

pub mod config;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod schedule;
pub mod sgd;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::TrainConfig;
pub use loss::{argmax_rows, cross_entropy};
pub use model::{load_model, save_model, InputConfig, KprNet, Model, PixelNet};
pub use pipeline::{augment, full_view, prepare_scan, PreparedScan, Scan, StepStats, View};
pub use schedule::{lr_at, lr_at_time};
pub use sgd::{sgd_step, sgd_step_named, sgd_update, OptimizerState, SgdConfig};

use crate::error::{Error, Result};
use crate::param::{zero_grads, Visit};

/// A model the training loop can drive.
pub trait Trainable: Visit {
    /// Accumulates gradients for one batch and reports its loss.
    fn train_batch(&mut self, scans: &[&PreparedScan], views: &[View], cfg: &TrainConfig) -> Result<StepStats>;

    fn apply_update(&mut self, state: &mut OptimizerState, lr: f64, cfg: &TrainConfig) -> Result<()> {
        sgd_step(self, state, lr, cfg.sgd())
    }
}

impl Trainable for KprNet {
    fn train_batch(&mut self, scans: &[&PreparedScan], views: &[View], cfg: &TrainConfig) -> Result<StepStats> {
        self.forward_backward(scans, views, !cfg.freeze_net2d)
    }

    fn apply_update(&mut self, state: &mut OptimizerState, lr: f64, cfg: &TrainConfig) -> Result<()> {
        if !cfg.freeze_net2d {
            return sgd_step(self, state, lr, cfg.sgd());
        }
        sgd_step_named(&mut self.kpconv, "kpconv", state, lr, cfg.sgd())?;
        sgd_step_named(&mut self.head, "head", state, lr, cfg.sgd())?;
        state.step += 1;
        Ok(())
    }
}

impl Trainable for PixelNet {
    fn train_batch(&mut self, scans: &[&PreparedScan], views: &[View], _cfg: &TrainConfig) -> Result<StepStats> {
        self.forward_backward(scans, views)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub stats: StepStats,
}

/// CSV metrics log with a `step,lr,loss` header.
pub fn log_to_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for l in log {
        let _ = writeln!(s, "{},{:e},{:e}", l.step, l.lr, l.stats.loss);
    }
    s
}

/// Runs the configured number of steps. Each epoch visits the scans in a
/// seeded random order, one augmented view per scan. `on_step` sees every
/// step after its update.
pub fn fit<M, F>(
    model: &mut M,
    scans: &[PreparedScan],
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<StepLog>>
where
    M: Trainable,
    F: FnMut(&StepLog, &mut M) -> Result<()>,
{
    cfg.validate()?;
    if scans.is_empty() {
        return Err(Error::argument("no training scans"));
    }
    let total = cfg.total_steps(scans.len());
    cfg.validate_schedule(total)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = OptimizerState::default();
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    let mut order: Vec<usize> = (0..scans.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step == total {
                break 'epochs;
            }
            let picked: Vec<&PreparedScan> = batch.iter().map(|&i| &scans[i]).collect();
            let views = picked
                .iter()
                .map(|p| {
                    augment(p, cfg.crop_width, cfg.flip_prob, &mut rng)
                        .map_err(|e| e.context(format!("scan {}", p.scan.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            zero_grads(model);
            let stats = model
                .train_batch(&picked, &views, cfg)
                .map_err(|e| e.context(format!("step {step}")))?;
            if !stats.loss.is_finite() {
                return Err(Error::state(format!("step {step}: loss is {}", stats.loss)));
            }
            let lr = lr_at(step, total, cfg);
            model.apply_update(&mut state, lr, cfg)?;
            let entry = StepLog { step, epoch, lr, stats };
            log.push(entry);
            on_step(&entry, model)?;
            step += 1;
        }
    }
    Ok(log)
}
