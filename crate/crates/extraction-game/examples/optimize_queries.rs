//! Runs the descent-ascent solver on the 48-strategy sine-defense grid:
//! the server's strategy weights concentrate on the hardest perturbation
//! while the adversary's queries adapt, and the winning strategy plus the
//! loss trace are printed.

use extraction_game::harness::{gen_t1, optimize_t1, t1_strategy_index};

fn main() -> extraction_game::Result<()> {
    let seed = 0;
    let t0 = std::time::Instant::now();
    let (t1, out) = optimize_t1(seed, 150)?;
    let winner = out.winner();
    println!(
        "winner: index {winner} = {:?} (expected index {}), lambda_max = {:.3}, {:.0}s",
        t1.strategies[winner],
        t1_strategy_index(15.0, 0.1).unwrap(),
        out.lambda.as_slice().iter().cloned().fold(f64::MIN, f64::max),
        t0.elapsed().as_secs_f64()
    );
    for k in (0..out.trace.rows.len()).step_by(25) {
        let r = &out.trace.rows[k];
        let train = r.h_lower.iter().sum::<f64>() / r.h_lower.len() as f64;
        println!(
            "  iter {:>3}: upper H = {:.4}, mean training loss = {:.3}, grad proxy = {:.3}",
            r.k, r.h_upper, train, r.grad_proxy
        );
    }
    let dir = std::path::Path::new("target/examples-out/optimize");
    std::fs::create_dir_all(dir)?;
    out.trace.write_csv(&dir.join("trace.csv"))?;
    println!("trace written to {}", dir.join("trace.csv").display());
    let _ = gen_t1(seed)?;
    Ok(())
}
