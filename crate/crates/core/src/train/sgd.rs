use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::param::{Entry, Param, Visit};
use crate::tensor::Tensor;

/// Momentum buffers keyed by parameter name, plus the number of steps taken.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub buffers: BTreeMap<String, Tensor>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `g = grad + wd * p` (when `p.decay`), `buf = momentum * buf + g`,
/// `p -= lr * buf`.
pub fn sgd_update(p: &mut Param, buf: &mut Tensor, lr: f64, cfg: SgdConfig) -> Result<()> {
    if p.grad.shape() != p.value.shape() || buf.shape() != p.value.shape() {
        return Err(Error::argument(format!(
            "sgd: value {:?}, grad {:?}, buffer {:?}",
            p.value.shape(),
            p.grad.shape(),
            buf.shape()
        )));
    }
    let wd = if p.decay { cfg.weight_decay } else { 0.0 };
    for ((v, &g), b) in p
        .value
        .data_mut()
        .iter_mut()
        .zip(p.grad.data())
        .zip(buf.data_mut())
    {
        let g = g + wd * *v;
        *b = cfg.momentum * *b + g;
        *v -= lr * *b;
    }
    Ok(())
}

/// Applies one update to every parameter of `model`.
pub fn sgd_step<M: Visit + ?Sized>(
    model: &mut M,
    state: &mut OptimizerState,
    lr: f64,
    cfg: SgdConfig,
) -> Result<()> {
    sgd_step_named(model, "", state, lr, cfg)?;
    state.step += 1;
    Ok(())
}

/// Updates the parameters of `model` named under `prefix` without
/// advancing the step counter.
pub fn sgd_step_named<M: Visit + ?Sized>(
    model: &mut M,
    prefix: &str,
    state: &mut OptimizerState,
    lr: f64,
    cfg: SgdConfig,
) -> Result<()> {
    let mut failure = None;
    model.visit(prefix, &mut |name, e| {
        if let (Entry::Param(p), None) = (e, &failure) {
            let buf = state
                .buffers
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Err(err) = sgd_update(p, buf, lr, cfg) {
                failure = Some(err.context(name.to_string()));
            }
        }
    });
    failure.map_or(Ok(()), Err)
}
