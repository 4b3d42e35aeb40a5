//! Monte Carlo check of the boundary-flip risk identity: when labels are
//! flipped with probability 1/2 inside a band of mass epsilon around the
//! decision boundary, both the server and its band-mirrored twin have risk
//! exactly epsilon against the randomized oracle. A flip probability away
//! from 1/2 breaks the identity (negative control).

use extraction_game::models::ParametricModel;
use extraction_game::theory::{verify_risk_identity, EquilibriumScenario};

fn main() -> extraction_game::Result<()> {
    let server = ParametricModel::linear(&[1.0, -1.0], 1.0)?;
    let scenario = EquilibriumScenario::new(server, 0.1, -10.0, 10.0, 100_000, 9)?;
    for flip_prob in [0.5, 0.9] {
        let r = verify_risk_identity(&scenario, flip_prob)?;
        println!(
            "flip prob {flip_prob}: risk(f_S) = {:.4}, risk(f_B) = {:.4}, target epsilon = {:.2}, stderr = {:.4} -> {}",
            r.risk_fs,
            r.risk_fb,
            r.epsilon,
            r.stderr,
            if r.pass { "identity holds" } else { "identity violated (expected for p != 1/2)" }
        );
    }
    Ok(())
}
