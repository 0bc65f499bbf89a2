use nalgebra::DVector;
use rkrl::ekf::EkfState;
use std::time::Instant;

fn main() {
    let n = 562;
    let mut state = EkfState::new(DVector::zeros(n), 1.0, 0.01, 0.001, 100).unwrap();
    let mut rng_state = 12345u64;
    let mut next = || {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
        (rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let steps = 500;
    let t0 = Instant::now();
    for _ in 0..steps {
        state.predict();
        let batch: Vec<(DVector<f64>, f64)> = (0..10)
            .map(|_| (DVector::from_fn(n, |_, _| next() * 0.2), next()))
            .collect();
        state.batch_update(&batch).unwrap();
    }
    let dt = t0.elapsed();
    println!(
        "{} steps in {:.2?} -> {:.3} ms/step; trace={:.3}, checks={}",
        steps,
        dt,
        dt.as_secs_f64() * 1000.0 / steps as f64,
        state.trace(),
        state.health().checks
    );
}
