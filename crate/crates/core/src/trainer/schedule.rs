use super::TrainConfig;

/// Linear decay of the cluster-loss weight from `lambda_start` at step 0 to
/// `lambda_end` at `t_max`. Steps outside `[0, t_max]` are clamped.
pub fn lambda_at(t: usize, cfg: &TrainConfig) -> f64 {
    if cfg.t_max == 0 {
        return cfg.lambda_start;
    }
    let t = if t > cfg.t_max {
        log::warn!("lambda_at: step {t} beyond t_max {}, clamping", cfg.t_max);
        cfg.t_max
    } else {
        t
    };
    if t == cfg.t_max {
        return cfg.lambda_end;
    }
    cfg.lambda_start + (cfg.lambda_end - cfg.lambda_start) * t as f64 / cfg.t_max as f64
}

/// Number of warmup steps: `warmup_frac` of `t_max`, at least one.
pub fn warmup_steps(cfg: &TrainConfig) -> usize {
    ((cfg.warmup_frac * cfg.t_max as f64).round() as usize).clamp(1, cfg.t_max.max(1))
}

/// Linear warmup from `lr_min` to `lr_peak`, then linear decay back to
/// `lr_min` at `t_max`.
pub fn lr_at(t: usize, cfg: &TrainConfig) -> f64 {
    let t = t.min(cfg.t_max);
    let w = warmup_steps(cfg);
    if t <= w {
        return cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * t as f64 / w as f64;
    }
    let rest = (cfg.t_max - w).max(1);
    cfg.lr_peak - (cfg.lr_peak - cfg.lr_min) * (t - w) as f64 / rest as f64
}
