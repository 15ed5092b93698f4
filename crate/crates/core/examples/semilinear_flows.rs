//! Reaction-advection along characteristics in both scalings on the shear
//! flow. In the mean regime the limit is a deterministic integral equation
//! along the effective Brownian path; in the zero-mean regime the reaction
//! produces extra noise and the limit is a stochastic flow whose derivative
//! `xi = exp(Z)` stays positive.
//!
//! cargo run --release --example semilinear_flows

use homogenize_lab::field::SpectralMeasure;
use homogenize_lab::green_kubo::{assemble_coefficients, estimate_correlators};
use homogenize_lab::macroscale::{sample_effective_bm, simulate_limit_flow, solve_integral_equation};
use homogenize_lab::microscale::{default_u_grid, simulate_flow_map, MicroConfig, Regime};
use homogenize_lab::nonlinearity::NonlinearitySpec;
use homogenize_lab::rng::{Level, StreamFactory};
use homogenize_lab::stats::{ks_two_sample, mean_se, SampleSet};
use homogenize_lab::Result;

const N: u64 = 1000;

fn main() -> Result<()> {
    let measure = SpectralMeasure::shear(1.0, 1.0, 1.0)?;
    let streams = StreamFactory::new(17, 0);
    let dtau = MicroConfig::max_dtau(&measure);
    let x = [0.4, 0.0];
    let u0 = |y: &[f64]| (-(y[0] * y[0] + y[1] * y[1]) / 4.0).exp();
    let grid = default_u_grid(1.0);

    for (name, spec, regime) in [
        ("mean", NonlinearitySpec::demo_mean(&measure)?, Regime::Mean),
        ("zero-mean", NonlinearitySpec::demo_zero_u(&measure)?, Regime::ZeroMean),
    ] {
        let table = estimate_correlators(&measure, Some(&spec), 1000, 10.0, dtau, &streams)?;
        let coeffs = assemble_coefficients(&spec, &table, 17)?;

        let cfg = MicroConfig::new(0.1, dtau, 0.0, 1.0);
        let micro: Vec<f64> = (0..N)
            .map(|i| {
                let flow = simulate_flow_map(&measure, &cfg, &spec, regime, &grid, &x, &mut streams.stream(Level::Epsilon(0), i), i)?;
                flow.invert(u0(flow.final_position()))
            })
            .collect::<Result<_>>()?;

        let mut min_xi = f64::INFINITY;
        let limit: Vec<f64> = (0..N)
            .map(|i| {
                let path = sample_effective_bm(&coeffs, &x, 0.0, 1.0, 256, &mut streams.stream(Level::Limit, i))?;
                match regime {
                    Regime::Mean => Ok(solve_integral_equation(&spec, &path, u0)),
                    Regime::ZeroMean => {
                        let flow = simulate_limit_flow(&coeffs, &spec, &grid, &path, 256, i)?;
                        min_xi = flow.final_xi().iter().fold(min_xi, |m, v| m.min(*v));
                        flow.invert(u0(flow.final_position()))
                    }
                }
            })
            .collect::<Result<_>>()?;

        let (mm, _) = mean_se(&micro);
        let (ml, _) = mean_se(&limit);
        let ks = ks_two_sample(&SampleSet::new(micro, "micro", 17)?, &SampleSet::new(limit, "limit", 17)?)?;
        println!("{name:<10} mean u_eps(0,x) {mm:.4} vs limit {ml:.4}; KS {:.4} (p = {:.3})", ks.statistic, ks.p_value);
        if regime == Regime::ZeroMean {
            println!("{:<10} smallest limit xi at T: {min_xi:.4}", "");
        }
    }
    Ok(())
}
