//! Basic extraction loop against a defended oracle: query, collect
//! responses, fit the adversary's model, and measure agreement with the
//! server as the query budget grows.

use extraction_game::attack::{extract, init_queries, LowerLevelProblem, QueryInit};
use extraction_game::defense::{DefenseOracle, DefenseStrategy, ResponseMode};
use extraction_game::metrics::{adversary_utility, LossKind};
use extraction_game::models::{ModelKind, ParametricModel, TrainLoss};
use extraction_game::numeric::{child_seed, rng_from_seed};

fn main() -> extraction_game::Result<()> {
    let server = ParametricModel::linear(&[1.0, -1.0], 1.0)?;
    let problem =
        LowerLevelProblem::new(ModelKind::LogisticLinear, TrainLoss::CrossEntropy, 1e-2)?;
    let mut test_rng = rng_from_seed(child_seed(1, 0, 0));
    let test = init_queries(50_000, 2, QueryInit::Uniform { lo: -10.0, hi: 10.0 }, &mut test_rng)?;

    for strategy in [
        DefenseStrategy::Identity,
        DefenseStrategy::SinePerturb { amp: 2.0, freq: 3.0 },
        DefenseStrategy::UniformFlip { c: 0.3 },
    ] {
        println!("{strategy:?}:");
        for n in [100usize, 1000, 10_000] {
            let mut rng = rng_from_seed(child_seed(2, n as u64, 0));
            let queries =
                init_queries(n, 2, QueryInit::Uniform { lo: -10.0, hi: 10.0 }, &mut rng)?;
            let mut oracle = DefenseOracle::new(
                server.clone(),
                strategy.clone(),
                ResponseMode::Hard,
                child_seed(3, n as u64, 0),
            )?;
            let (model, trace) = extract(&mut oracle, &queries, &problem, &mut rng)?;
            let agreement = adversary_utility(&model, &server, &test, LossKind::ZeroOne)?;
            println!(
                "  {n:>6} queries: agreement with server {agreement:.4} (converged = {})",
                trace.converged
            );
        }
    }
    Ok(())
}
