//! Piecewise learning-rate schedule used for distillation: linear warmup
//! to the peak, a constant stretch, then a cosine decay to zero at the
//! final step.

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub total: usize,
    pub peak: f64,
    warmup: usize,
    constant: usize,
}

impl LrSchedule {
    pub fn new(total: usize, peak: f64, warmup_frac: f64, constant_frac: f64) -> Result<Self> {
        if total == 0 {
            return config_err("schedule needs at least one step");
        }
        if peak <= 0.0 {
            return config_err("peak learning rate must be positive");
        }
        if warmup_frac < 0.0 || constant_frac < 0.0 || warmup_frac + constant_frac > 1.0 {
            return config_err("schedule fractions must be non-negative and sum to at most 1");
        }
        let warmup = (total as f64 * warmup_frac).round() as usize;
        let constant = (total as f64 * constant_frac).round() as usize;
        Ok(Self {
            total,
            peak,
            warmup: warmup.min(total),
            constant: constant.min(total - warmup.min(total)),
        })
    }

    /// Learning rate after `s` completed steps. Defined on 0..=total only;
    /// anything past the end is a contract violation, not a clamp.
    pub fn lr(&self, s: usize) -> Result<f64> {
        if s > self.total {
            return config_err(format!("step {s} lies past the schedule end {}", self.total));
        }
        if s < self.warmup {
            return Ok(self.peak * s as f64 / self.warmup as f64);
        }
        let hold_end = self.warmup + self.constant;
        if s <= hold_end {
            return Ok(self.peak);
        }
        let span = (self.total - hold_end) as f64;
        let p = (s - hold_end) as f64 / span;
        Ok(self.peak * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> LrSchedule {
        LrSchedule::new(1000, 0.002, 0.10, 0.40).unwrap()
    }

    #[test]
    fn endpoints_and_plateau_are_exact() {
        let s = reference();
        assert_eq!(s.lr(0).unwrap(), 0.0);
        assert_eq!(s.lr(100).unwrap(), 0.002);
        assert_eq!(s.lr(300).unwrap(), 0.002);
        assert_eq!(s.lr(500).unwrap(), 0.002);
        assert!(s.lr(1000).unwrap().abs() < 1e-12);
    }

    #[test]
    fn warmup_is_linear_and_decay_is_monotone() {
        let s = reference();
        for i in 0..100 {
            let expect = 0.002 * i as f64 / 100.0;
            assert!((s.lr(i).unwrap() - expect).abs() < 1e-15);
        }
        let mut prev = s.lr(500).unwrap();
        for i in 501..=1000 {
            let cur = s.lr(i).unwrap();
            assert!(cur <= prev + 1e-15, "rises at {i}");
            prev = cur;
        }
    }

    #[test]
    fn curve_has_no_jumps() {
        let s = reference();
        let bound = 0.002 / 100.0 + 0.002 * std::f64::consts::PI / (2.0 * 500.0) + 1e-12;
        for i in 0..1000 {
            let d = (s.lr(i + 1).unwrap() - s.lr(i).unwrap()).abs();
            assert!(d <= bound, "jump {d} at {i}");
        }
    }

    #[test]
    fn out_of_range_steps_are_rejected() {
        let s = reference();
        assert!(s.lr(1001).is_err());
        assert!(LrSchedule::new(0, 0.002, 0.1, 0.4).is_err());
        assert!(LrSchedule::new(100, 0.002, 0.7, 0.4).is_err());
        assert!(LrSchedule::new(100, -1.0, 0.1, 0.4).is_err());
    }

    #[test]
    fn degenerate_fractions_still_cover_every_step() {
        let s = LrSchedule::new(10, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(s.lr(0).unwrap(), 1.0);
        assert!(s.lr(10).unwrap().abs() < 1e-12);
        let hold = LrSchedule::new(10, 1.0, 0.0, 1.0).unwrap();
        for i in 0..=10 {
            assert_eq!(hold.lr(i).unwrap(), 1.0);
        }
    }
}
