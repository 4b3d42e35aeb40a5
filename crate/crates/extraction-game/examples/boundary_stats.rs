//! Quantifies how the optimized queries concentrate near the defense
//! decision boundary compared with uniform random queries.

use extraction_game::attack::{init_queries, QueryInit};
use extraction_game::harness::{boundary_concentration, gen_t1, optimize_t1};
use extraction_game::numeric::{child_seed, rng_from_seed};

fn main() -> extraction_game::Result<()> {
    let seed = 0;
    let t1 = gen_t1(seed)?;
    let (_, out) = optimize_t1(seed, 150)?;
    let strategy = &t1.strategies[out.winner()];
    for delta in [0.25, 0.5, 1.0] {
        let frac = boundary_concentration(&out.x_last, &t1.server, strategy, delta);
        let mut rng = rng_from_seed(child_seed(7000, seed, 0));
        let baseline_qs =
            init_queries(200, 2, QueryInit::Uniform { lo: -10.0, hi: 10.0 }, &mut rng)?;
        let baseline = boundary_concentration(&baseline_qs, &t1.server, strategy, delta);
        println!(
            "delta = {delta}: optimized fraction {frac:.3} vs uniform baseline {baseline:.3}"
        );
    }
    Ok(())
}
