//! Homogenized coefficients of a reaction term from Green-Kubo correlators,
//! evaluated along a line of states and serialized to JSON.
//!
//! cargo run --release --example coefficients

use homogenize_lab::field::{AlphaProfile, SpectralMeasure};
use homogenize_lab::green_kubo::{assemble_coefficients, estimate_correlators};
use homogenize_lab::microscale::MicroConfig;
use homogenize_lab::nonlinearity::NonlinearitySpec;
use homogenize_lab::rng::{Level, StreamFactory};
use homogenize_lab::Result;

fn main() -> Result<()> {
    let streams = StreamFactory::new(3, 0);
    let measure = SpectralMeasure::isotropic_shell(8, 1.0, 1.0, AlphaProfile::Constant(1.0), &mut streams.stream(Level::Custom(0), 0))?;
    let spec = NonlinearitySpec::demo_zero_u(&measure)?;
    let table = estimate_correlators(&measure, Some(&spec), 1000, 10.0, MicroConfig::max_dtau(&measure), &streams)?;
    let coeffs = assemble_coefficients(&spec, &table, 3)?;

    println!("A =\n{:.4}kappa_0 =\n{:.4}", coeffs.a, coeffs.kappa0);
    println!("{:>6} {:>9} {:>9} {:>9} {:>9}", "u", "b", "c_1", "c_2", "c_0");
    for u in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let v = coeffs.evaluate(&spec, 0.0, &[0.0, 0.0], u);
        println!("{u:>6.2} {:>9.4} {:>9.4} {:>9.4} {:>9.4}", v.b, v.c[0], v.c[1], v.c0);
    }
    println!("{}", coeffs.to_json()?);
    Ok(())
}
