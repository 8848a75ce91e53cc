use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};

/// Warm-up then step-decay learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_factor: f64,
    pub warmup_iters: usize,
    pub decay: f64,
    pub decay_steps: Vec<usize>,
    pub max_iters: usize,
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::full_vqa()
    }
}

impl Schedule {
    /// Full-scale Text-VQA setting.
    pub fn full_vqa() -> Self {
        Self {
            base_lr: 1e-4,
            warmup_factor: 0.2,
            warmup_iters: 2000,
            decay: 0.1,
            decay_steps: vec![14_000, 19_000],
            max_iters: 24_000,
            batch_size: 128,
        }
    }

    /// Full-scale Text-Caption setting.
    pub fn full_caption() -> Self {
        Self {
            decay_steps: vec![10_000, 11_000],
            max_iters: 12_000,
            ..Self::full_vqa()
        }
    }

    /// Batch 8 and iteration counts 100x below the Text-VQA setting. The
    /// base rate is raised because the desk model is far narrower.
    pub fn desk() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_factor: 0.2,
            warmup_iters: 20,
            decay: 0.1,
            decay_steps: vec![140, 190],
            max_iters: 240,
            batch_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(TapError::config(format!("schedule.{field}"), msg));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", "must be a finite non-negative number");
        }
        if !(self.warmup_factor > 0.0 && self.warmup_factor <= 1.0) {
            return bad("warmup_factor", "must be in (0, 1]");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay", "must be in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_steps", "must be strictly increasing");
        }
        if self.decay_steps.last().is_some_and(|&s| s >= self.max_iters) {
            return bad("decay_steps", "every step must be below max_iters");
        }
        Ok(())
    }

    /// Linear ramp from `warmup_factor * base_lr` to `base_lr` over the
    /// warm-up, then `base_lr * decay^k` once `k` decay steps have passed.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if iter < self.warmup_iters {
            let alpha = iter as f64 / self.warmup_iters as f64;
            return self.base_lr * (self.warmup_factor + (1.0 - self.warmup_factor) * alpha);
        }
        let k = self.decay_steps.iter().filter(|&&s| iter >= s).count();
        self.base_lr * self.decay.powi(k as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_points() {
        let s = Schedule::full_vqa();
        assert!((s.lr_at(0) - 2e-5).abs() < 1e-18);
        assert!((s.lr_at(1000) - 6e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(2000), 1e-4);
        assert_eq!(s.lr_at(13_999), 1e-4);
        assert!((s.lr_at(14_000) - 1e-5).abs() < 1e-18);
        assert!((s.lr_at(23_999) - 1e-6).abs() < 1e-18);
        s.validate().unwrap();
        Schedule::full_caption().validate().unwrap();
        Schedule::desk().validate().unwrap();
    }

    #[test]
    fn rejects_bad_steps() {
        let s = Schedule {
            decay_steps: vec![5, 5],
            ..Schedule::desk()
        };
        assert!(s.validate().unwrap_err().to_string().contains("schedule.decay_steps"));
        let s = Schedule {
            decay_steps: vec![10, 400],
            ..Schedule::desk()
        };
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn piecewise_monotone(a in 0usize..30_000, b in 0usize..30_000) {
            let s = Schedule::full_vqa();
            let (lo, hi) = (a.min(b), a.max(b));
            if hi < s.warmup_iters {
                prop_assert!(s.lr_at(lo) <= s.lr_at(hi));
            }
            if lo >= s.warmup_iters {
                prop_assert!(s.lr_at(lo) >= s.lr_at(hi));
            }
        }
    }
}
