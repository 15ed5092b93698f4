//! Effective diffusivity of the shear flow two ways: Green-Kubo integration
//! of the Lagrangian velocity correlation, and the mean-square displacement of
//! fast characteristics. Both should approach `2 sigma / alpha = 2`.
//!
//! cargo run --release --example shear_diffusivity

use homogenize_lab::field::SpectralMeasure;
use homogenize_lab::green_kubo::{effective_diffusivity, estimate_correlators};
use homogenize_lab::microscale::{simulate_characteristic, MicroConfig};
use homogenize_lab::rng::{Level, StreamFactory};
use homogenize_lab::stats::mean_se;
use homogenize_lab::Result;

fn main() -> Result<()> {
    let measure = SpectralMeasure::shear(1.0, 1.0, 1.0)?;
    let streams = StreamFactory::new(11, 0);
    let dtau = MicroConfig::max_dtau(&measure);

    let table = estimate_correlators(&measure, None, 1000, 10.0, dtau, &streams)?;
    let gk = effective_diffusivity(&table)?;
    println!("Green-Kubo A =\n{:.4}standard errors =\n{:.4}", gk.a, gk.std_error);

    let eps = 0.1;
    let cfg = MicroConfig::new(eps, dtau, 0.0, 1.0);
    let disp: Vec<f64> = (0..1000u64)
        .map(|i| {
            let rec = simulate_characteristic(&measure, &cfg, &[0.3, 0.0], &mut streams.stream(Level::Epsilon(0), i), i)?;
            Ok(rec.final_position()[1].powi(2))
        })
        .collect::<Result<_>>()?;
    let (msd, se) = mean_se(&disp);
    println!("MSD slope of X_2 at eps = {eps}: {msd:.4} +- {:.4} (target 2)", 1.96 * se);
    Ok(())
}
