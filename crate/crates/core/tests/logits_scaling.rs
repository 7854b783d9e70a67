//! Cost of the NeuralSort logits must grow quadratically, not cubically.
//!
//! Lives in its own test binary so no other test competes for the CPU while
//! it is timing.

use std::hint::black_box;
use std::time::{Duration, Instant};

use softsort_core::neural_sort_logits;

fn best_of(reps: usize, s: &[f64]) -> Duration {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            black_box(neural_sort_logits(black_box(s)).unwrap());
            t.elapsed()
        })
        .min()
        .unwrap()
}

fn scores(n: usize) -> Vec<f64> {
    // Deterministic and tie-free.
    (0..n).map(|i| ((i * 7919) % n) as f64 * 0.37 - 11.0).collect()
}

#[test]
fn logits_cost_is_quadratic() {
    let (small, large) = (scores(500), scores(2000));
    best_of(3, &large);
    let t_small = best_of(15, &small);
    let t_large = best_of(7, &large);
    let ratio = t_large.as_secs_f64() / t_small.as_secs_f64();
    println!("n=500: {t_small:?}, n=2000: {t_large:?}, ratio {ratio:.2}");
    // Quadratic predicts 16, cubic 64.
    assert!(ratio <= 25.0, "ratio {ratio:.2}");
}
