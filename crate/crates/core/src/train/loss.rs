use crate::error::{Error, Result};
use crate::kitti_io::IGNORE;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over rows whose target is not IGNORE.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, targets: &[u8]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.dim(0) != targets.len() {
        return Err(Error::argument(format!(
            "cross_entropy: logits {:?} for {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let c = logits.dim(1);
    let counted = targets.iter().filter(|&&t| t != IGNORE).count();
    let mut grad = Tensor::zeros(logits.shape());
    if counted == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / counted as f64;
    let mut loss = 0.0;
    for (i, (row, g)) in logits
        .data()
        .chunks_exact(c)
        .zip(grad.data_mut().chunks_exact_mut(c))
        .enumerate()
    {
        let t = targets[i];
        if t == IGNORE {
            continue;
        }
        let t = usize::from(t);
        if t >= c {
            return Err(Error::Data {
                index: i,
                message: format!("target {t} outside {c} classes"),
            });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[t];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp() * inv;
        }
        g[t] -= inv;
    }
    Ok((loss * inv, grad))
}

/// Index of the largest logit in every row (first one on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<u8> {
    let c = logits.dim(1);
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}
