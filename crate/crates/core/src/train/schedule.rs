use std::f64::consts::PI;

/// Linear warmup to `peak_lr` over `warmup` steps, then cosine decay to zero
/// at `total_steps`.
pub fn lr_at_step(step: u64, warmup: u64, total_steps: u64, peak_lr: f64) -> f64 {
    if step < warmup {
        return peak_lr * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup);
    if span == 0 {
        return if step > total_steps { 0.0 } else { peak_lr };
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    (peak_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at_step(0, 100, 1000, 1e-3), 0.0);
        assert_eq!(lr_at_step(50, 100, 1000, 1e-3), 5e-4);
        assert_eq!(lr_at_step(100, 100, 1000, 1e-3), 1e-3);
        assert!((lr_at_step(550, 100, 1000, 1e-3) - 5e-4).abs() < 1e-15);
        assert_eq!(lr_at_step(1000, 100, 1000, 1e-3), 0.0);
        assert_eq!(lr_at_step(0, 0, 10, 2.0), 2.0);
    }

    proptest! {
        #[test]
        fn bounded_and_monotone_after_warmup(warmup in 0u64..200, extra in 1u64..2000, s in 0u64..3000) {
            let total = warmup + extra;
            let lr = lr_at_step(s, warmup, total, 1e-3);
            prop_assert!((0.0..=1e-3).contains(&lr));
            if s >= warmup {
                prop_assert!(lr_at_step(s + 1, warmup, total, 1e-3) <= lr);
            } else {
                prop_assert!(lr_at_step(s + 1, warmup, total, 1e-3) >= lr);
            }
        }
    }
}
