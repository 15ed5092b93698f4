//! Samples the stationary random flow and compares its empirical space-time
//! covariance with the closed form, then checks incompressibility.
//!
//! cargo run --release --example field_covariance

use homogenize_lab::field::{covariance_exact, FieldState, SpectralMeasure, AlphaProfile};
use homogenize_lab::rng::{Level, StreamFactory};
use homogenize_lab::Result;

fn main() -> Result<()> {
    let streams = StreamFactory::new(2024, 0);
    let measure = SpectralMeasure::isotropic_shell(8, 1.0, 1.0, AlphaProfile::Constant(1.0), &mut streams.stream(Level::Custom(0), 0))?;
    println!("isotropic shell: {} modes, K0 = {:.3}, R(0,0) =\n{:.4}", measure.num_modes(), measure.k0(), measure.one_point_covariance());

    let (t, x) = (0.5, [1.0, 0.0]);
    let n = 20_000;
    let mut acc = nalgebra::DMatrix::<f64>::zeros(2, 2);
    let mut max_div: f64 = 0.0;
    for i in 0..n {
        let mut rng = streams.stream(Level::Field, i);
        let mut state = FieldState::sample_stationary(&measure, &mut rng);
        let v0 = state.evaluate(&measure, &[0.0, 0.0]);
        max_div = max_div.max(state.evaluate_gradient(&measure, &x).trace().abs());
        state.evolve(&measure, t, &mut rng)?;
        let vt = state.evaluate(&measure, &x);
        for a in 0..2 {
            for b in 0..2 {
                acc[(a, b)] += vt[a] * v0[b];
            }
        }
    }
    acc /= n as f64;
    println!("empirical E[V(t,x) V(0,0)^T] at t = {t}, x = {x:?}:\n{acc:.4}");
    println!("closed form:\n{:.4}", covariance_exact(&measure, t, &x));
    println!("max |div V| over {n} draws: {max_div:.2e}");
    Ok(())
}
