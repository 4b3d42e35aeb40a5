//! The uniform label-flip phase transition: extracting through an oracle
//! that flips every label with probability c yields a model that agrees
//! with the server almost perfectly for c < 1/2 and is its mirror image
//! for c > 1/2.

use extraction_game::attack::LowerLevelProblem;
use extraction_game::models::{ModelKind, ParametricModel, TrainLoss};
use extraction_game::theory::{verify_uniform_flip, EquilibriumScenario};

fn main() -> extraction_game::Result<()> {
    let server = ParametricModel::linear(&[1.0, -1.0], 1.0)?;
    let scenario = EquilibriumScenario::new(server, 0.1, -10.0, 10.0, 100_000, 3)?;
    let problem =
        LowerLevelProblem::new(ModelKind::LogisticLinear, TrainLoss::CrossEntropy, 1e-2)?;
    for c in [0.0, 0.1, 0.3, 0.45, 0.55, 0.7, 0.9, 1.0] {
        let report = verify_uniform_flip(c, &scenario, &problem, 20_000)?;
        println!(
            "c = {c:>4}: disagreement with the server = {:.4}",
            report.disagreement
        );
    }
    Ok(())
}
