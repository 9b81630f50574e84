//! Learning-rate schedules: linear scaling per 256 examples, linear warmup
//! from zero, then staircase exponential or polynomial decay.
//!
//! Schedules are evaluated in f64; the trainer narrows the result when it
//! hands the rate to an optimizer.

use std::fmt;

use crate::error::{Error, Result};

/// Reference batch of the linear scaling rule.
pub const REFERENCE_BATCH: f64 = 256.0;

/// Staircase boundaries computed from decimal epoch counts (e.g. 2.4) are
/// snapped within this many decay periods.
const STAIRCASE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decay {
    /// `peak · rate^⌊(e − warmup) / epochs_per_decay⌋`.
    Exponential { rate: f64, epochs_per_decay: f64 },
    /// `end + (peak − end) · (1 − progress)^power`, held at `end_lr` afterwards.
    Polynomial { power: f64, end_lr: f64 },
}

impl Decay {
    pub const DEFAULT_RATE: f64 = 0.97;
    pub const DEFAULT_EPOCHS_PER_DECAY: f64 = 2.4;
    pub const DEFAULT_POWER: f64 = 2.0;
    pub const DEFAULT_END_LR: f64 = 0.0;

    pub fn exponential() -> Self {
        Decay::Exponential {
            rate: Self::DEFAULT_RATE,
            epochs_per_decay: Self::DEFAULT_EPOCHS_PER_DECAY,
        }
    }

    pub fn polynomial() -> Self {
        Decay::Polynomial {
            power: Self::DEFAULT_POWER,
            end_lr: Self::DEFAULT_END_LR,
        }
    }

    pub fn kind(&self) -> DecayKind {
        match self {
            Decay::Exponential { .. } => DecayKind::Exponential,
            Decay::Polynomial { .. } => DecayKind::Polynomial,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayKind {
    Exponential,
    Polynomial,
}

impl fmt::Display for DecayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecayKind::Exponential => "exponential",
            DecayKind::Polynomial => "polynomial",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub lr_per_256: f64,
    pub global_batch: usize,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub steps_per_epoch: usize,
    pub decay: Decay,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Precondition(msg));
        if !(self.lr_per_256 > 0.0) {
            return bad(format!("lr_per_256 must be > 0, got {}", self.lr_per_256));
        }
        if self.global_batch == 0 || self.steps_per_epoch == 0 {
            return bad("global_batch and steps_per_epoch must be >= 1".into());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.total_epochs) {
            return bad(format!(
                "need 0 <= warmup_epochs ({}) <= total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        match self.decay {
            Decay::Exponential {
                rate,
                epochs_per_decay,
            } if !(rate > 0.0 && epochs_per_decay > 0.0) => {
                bad(format!("exponential decay needs rate > 0 and epochs_per_decay > 0, got {rate}, {epochs_per_decay}"))
            }
            Decay::Polynomial { power, end_lr } if !(power > 0.0 && end_lr >= 0.0) => {
                bad(format!("polynomial decay needs power > 0 and end_lr >= 0, got {power}, {end_lr}"))
            }
            _ => Ok(()),
        }
    }

    /// Peak learning rate reached at the end of warmup.
    pub fn peak(&self) -> f64 {
        base_lr(self.lr_per_256, self.global_batch)
    }

    pub fn total_steps(&self) -> usize {
        (self.total_epochs * self.steps_per_epoch as f64).round() as usize
    }
}

/// Linear scaling rule: `lr_per_256 · global_batch / 256`.
pub fn base_lr(lr_per_256: f64, global_batch: usize) -> f64 {
    lr_per_256 * global_batch as f64 / REFERENCE_BATCH
}

/// Learning rate at optimizer step `step` (epoch = step / steps_per_epoch).
pub fn lr_at(spec: &ScheduleSpec, step: usize) -> f64 {
    lr_at_epoch(spec, step as f64 / spec.steps_per_epoch as f64)
}

/// Learning rate at a fractional epoch.
pub fn lr_at_epoch(spec: &ScheduleSpec, epoch: f64) -> f64 {
    let peak = spec.peak();
    let warm = spec.warmup_epochs;
    if epoch < warm {
        return peak * epoch / warm;
    }
    let since = epoch - warm;
    match spec.decay {
        Decay::Exponential {
            rate,
            epochs_per_decay,
        } => {
            let k = (since / epochs_per_decay + STAIRCASE_SNAP).floor();
            peak * rate.powf(k)
        }
        Decay::Polynomial { power, end_lr } => {
            let span = spec.total_epochs - warm;
            if epoch >= spec.total_epochs || span <= 0.0 {
                return end_lr;
            }
            end_lr + (peak - end_lr) * (1.0 - since / span).powf(power)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(decay: Decay) -> ScheduleSpec {
        ScheduleSpec {
            lr_per_256: 0.1,
            global_batch: 1024,
            warmup_epochs: 5.0,
            total_epochs: 50.0,
            steps_per_epoch: 10,
            decay,
        }
    }

    #[test]
    fn base_lr_examples() {
        assert!((base_lr(0.118, 32768) - 15.104).abs() < 1e-12);
        assert!((base_lr(0.016, 4096) - 0.256).abs() < 1e-12);
        assert_eq!(base_lr(0.37, 256), 0.37);
    }

    #[test]
    fn warmup_boundaries() {
        let s = spec(Decay::polynomial());
        assert_eq!(lr_at(&s, 0), 0.0);
        assert_eq!(lr_at(&s, 50), s.peak());
        assert!((lr_at(&s, 25) - 0.5 * s.peak()).abs() < 1e-15);
    }

    #[test]
    fn polynomial_halfway() {
        let s = spec(Decay::polynomial());
        let mid = (s.warmup_epochs + s.total_epochs) / 2.0;
        assert!((lr_at_epoch(&s, mid) - 0.25 * s.peak()).abs() < 1e-12);
        assert_eq!(lr_at_epoch(&s, 50.0), 0.0);
        assert_eq!(lr_at_epoch(&s, 80.0), 0.0);
    }

    #[test]
    fn exponential_staircase() {
        let s = spec(Decay::exponential());
        assert!((lr_at_epoch(&s, 5.0 + 2.4) - 0.97 * s.peak()).abs() < 1e-12);
        assert!((lr_at_epoch(&s, 5.0 + 2.3999) - s.peak()).abs() < 1e-12);
        for k in 0..15 {
            let e = 5.0 + 2.4 * k as f64;
            let expect = s.peak() * 0.97f64.powi(k);
            assert!((lr_at_epoch(&s, e) - expect).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn zero_warmup() {
        let mut s = spec(Decay::polynomial());
        s.warmup_epochs = 0.0;
        assert_eq!(lr_at(&s, 0), s.peak());
    }

    #[test]
    fn validation() {
        let mut s = spec(Decay::polynomial());
        s.validate().unwrap();
        s.warmup_epochs = 60.0;
        assert!(s.validate().is_err());
        let mut s = spec(Decay::polynomial());
        s.lr_per_256 = 0.0;
        assert!(s.validate().is_err());
        let s = spec(Decay::Exponential {
            rate: 0.97,
            epochs_per_decay: 0.0,
        });
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn bounded_by_zero_and_peak(step in 0usize..2000, poly in any::<bool>(), warm in 0.0f64..20.0) {
            let mut s = spec(if poly { Decay::polynomial() } else { Decay::exponential() });
            s.warmup_epochs = warm;
            let lr = lr_at(&s, step);
            prop_assert!(lr >= 0.0);
            prop_assert!(lr <= s.peak() * (1.0 + 1e-15));
        }

        #[test]
        fn polynomial_continuous_at_warmup_end(warm in 0.5f64..40.0) {
            let mut s = spec(Decay::polynomial());
            s.warmup_epochs = warm;
            let h = 1e-9;
            let left = lr_at_epoch(&s, warm - h);
            let right = lr_at_epoch(&s, warm + h);
            prop_assert!((left - right).abs() < 1e-6 * s.peak());
        }
    }
}
