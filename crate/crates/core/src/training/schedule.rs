//! Learning-rate schedules: inverse-square-root with linear warmup for
//! pretraining, and halve-on-plateau for finetuning.

/// lr = base_lr · min(step/warmup, √(warmup/step)). Linear ramp up to
/// `base_lr` at `step == warmup`, then inverse-square-root decay.
pub fn lr_inverse_sqrt(step: u64, warmup: u64, base_lr: f64) -> f64 {
    assert!(step >= 1, "steps are 1-based");
    assert!(warmup >= 1, "warmup must cover at least one step");
    let s = step as f64;
    let w = warmup as f64;
    base_lr * (s / w).min((w / s).sqrt())
}

/// State for [`lr_plateau_halve`]: the current learning rate and the best
/// validation perplexity observed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauState {
    lr: f64,
    best: Option<f64>,
}

impl PlateauState {
    pub fn new(initial_lr: f64) -> Self {
        Self {
            lr: initial_lr,
            best: None,
        }
    }

    /// Rebuild mid-run state from a checkpoint.
    pub fn resume(lr: f64, best: Option<f64>) -> Self {
        Self { lr, best }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Observe one validation perplexity. The learning rate halves when the
/// value fails to improve on the best seen so far; the best updates only
/// on strict improvement. The first observation sets the baseline without
/// halving. Returns the rate to use from now on.
pub fn lr_plateau_halve(state: &mut PlateauState, valid_ppl: f64) -> f64 {
    match state.best {
        Some(best) if valid_ppl >= best => state.lr /= 2.0,
        _ => state.best = Some(valid_ppl),
    }
    state.lr
}
