//! Per-phase learning rate: linear ramp from 0 over the first epoch, then
//! cosine decay reaching 0 at the last step of the phase.

use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseSchedule {
    pub peak: f64,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
}

/// `step` counts from 0 at the start of the phase.
pub fn lr_at(step: usize, phase: &PhaseSchedule) -> f64 {
    let ramp = phase.steps_per_epoch.max(1);
    if step < ramp {
        return phase.peak * step as f64 / ramp as f64;
    }
    let last = phase.total_steps.saturating_sub(1);
    if last <= ramp {
        return phase.peak;
    }
    let progress = ((step - ramp) as f64 / (last - ramp) as f64).min(1.0);
    phase.peak * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_shape() {
        let p = PhaseSchedule { peak: 2.0, steps_per_epoch: 10, total_steps: 100 };
        assert_eq!(lr_at(0, &p), 0.0);
        assert!((lr_at(5, &p) - 1.0).abs() < 1e-12);
        assert_eq!(lr_at(10, &p), 2.0);
        assert!(lr_at(99, &p) < 1e-6);
        let mut prev = f64::INFINITY;
        for s in 10..100 {
            let lr = lr_at(s, &p);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
