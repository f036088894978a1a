use super::config::TrainConfig;

/// Learning rate at a (possibly fractional) step: linear warmup from zero,
/// then a half cosine from `base_lr` down to zero at `total_steps`.
pub fn lr_at_time(t: f64, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_iters as f64;
    if t < warm {
        return cfg.base_lr * (t / warm);
    }
    let span = (total_steps as f64 - warm).max(f64::MIN_POSITIVE);
    let progress = ((t - warm) / span).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    lr_at_time(step as f64, total_steps, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_points() {
        let cfg = TrainConfig::default();
        let total = 5000;
        assert_eq!(lr_at(0, total, &cfg), 0.0);
        assert_eq!(lr_at(1000, total, &cfg), 0.01875);
        assert_eq!(lr_at(500, total, &cfg), 0.01875 / 2.0);
        assert_eq!(lr_at(3000, total, &cfg), 0.009375);
        assert!(lr_at(total, total, &cfg).abs() < 1e-18);
    }

    #[test]
    fn continuous_at_warmup_and_non_increasing_after() {
        let cfg = TrainConfig::default();
        let w = cfg.warmup_iters as f64;
        let eps = 1e-9;
        let left = lr_at_time(w - eps, 4000, &cfg);
        let right = lr_at_time(w + eps, 4000, &cfg);
        assert!((left - right).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 1000..=4000 {
            let v = lr_at(s, 4000, &cfg);
            assert!(v <= prev);
            prev = v;
        }
    }
}
