//! The boundary-flip equilibrium: with flip probability 1/2 on a band of
//! mass epsilon, the utility pair sits at (1 - epsilon, 1 - epsilon);
//! and with the privacy-parameterized band defense, the adversary's
//! utility climbs toward the server's from below as the query budget
//! grows, so the gap |a - b| shrinks.

use extraction_game::attack::LowerLevelProblem;
use extraction_game::models::{ModelKind, ParametricModel, TrainLoss};
use extraction_game::numeric::rng_from_seed;
use extraction_game::theory::{
    bdpl_equilibrium_trend, calibrate_band_width, equilibrium_point, BdplTrendConfig,
    EquilibriumScenario,
};

fn main() -> extraction_game::Result<()> {
    let server = ParametricModel::linear(&[1.0, -1.0], 1.0)?;
    let scenario = EquilibriumScenario::new(server, 0.2, -10.0, 10.0, 100_000, 21)?;
    let point = equilibrium_point(&scenario, 200_000)?;
    println!(
        "equilibrium at epsilon = 0.2: (b, a) = ({:.4}, {:.4}), predicted (0.8, 0.8)",
        point.b_mean, point.a_mean
    );

    let kind = ModelKind::Mlp2 { hidden: 12 };
    let mut rng = rng_from_seed(42);
    let trend_server = ParametricModel::random_init(kind, 24, &mut rng);
    let delta = calibrate_band_width(&trend_server, 0.10, -3.0, 3.0, 300_000, 7)?;
    let trend = bdpl_equilibrium_trend(&BdplTrendConfig {
        server: trend_server,
        delta,
        t: 0.01,
        q_lo: -3.0,
        q_hi: 3.0,
        problem: LowerLevelProblem::new(kind, TrainLoss::CrossEntropy, 1e-2)?
            .with_tol(1e-4)
            .with_max_iters(400),
        query_sizes: vec![1000, 10_000, 20_000],
        seeds: 4,
        test_size: 20_000,
        seed: 123,
    })?;
    for p in &trend.points {
        println!(
            "  budget {:>6}: (b, a) = ({:.4}, {:.4})",
            p.pair_id, p.b_mean, p.a_mean
        );
    }
    println!(
        "median gaps {:?}, non-increasing = {}",
        trend.median_gaps, trend.non_increasing
    );
    Ok(())
}
