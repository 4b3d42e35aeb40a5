//! End-to-end acceptance gate. Each test prints one PASS/FAIL line for its
//! numbered criterion; run with `--nocapture` to see the lines for passing
//! tests as well.

use extraction_game::attack::{fit_lower, init_queries, LowerLevelProblem, QueryInit};
use extraction_game::bilevel::{hypergrad_x, run as bilevel_run, BilevelConfig, BilevelOutcome, TestSet};
use extraction_game::defense::{DefenseOracle, DefenseStrategy, ResponseMode};
use extraction_game::harness::{
    boundary_concentration, case1_scenario, case2_scenario, gen_t1, optimize_t1, run_replication,
    t1_strategy_index, Scenario,
};
use extraction_game::metrics::{adversary_utility, server_utility, LossKind};
use extraction_game::models::{ridge_closed_form, ModelKind, ParametricModel, TrainLoss};
use extraction_game::numeric::{
    child_seed, neumann_inverse_apply, project_simplex, rng_from_seed, solve_spd, Mat,
};
use extraction_game::theory::{
    bdpl_equilibrium_trend, calibrate_band_width, equilibrium_point, verify_risk_identity,
    verify_uniform_flip, BdplTrendConfig, EquilibriumScenario,
};
use once_cell::sync::Lazy;
use rand::Rng as _;
use std::time::Instant;

fn report(id: &str, pass: bool, detail: &str) {
    println!("[{id}] {}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "[{id}] FAIL: {detail}");
}

fn run_case(scenario: &Scenario) -> (f64, f64, f64) {
    use rayon::prelude::*;
    let server = scenario.server.build().unwrap();
    let t0 = Instant::now();
    let results: Vec<(f64, f64)> = (0..scenario.reps)
        .into_par_iter()
        .map(|rep| run_replication(scenario, &server, &scenario.strategies[0], 0, rep).unwrap())
        .collect();
    let secs = t0.elapsed().as_secs_f64();
    let b = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
    let a = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    (b, a, secs)
}

#[test]
fn c1_sine_case_one_utilities() {
    let (b, a, secs) = run_case(&case1_scenario(2024));
    let pass = (b - 0.86).abs() <= 0.02 && (a - 0.92).abs() <= 0.02 && secs < 120.0;
    report(
        "1",
        pass,
        &format!("case 1 utilities (b, a) = ({b:.4}, {a:.4}), want (0.86, 0.92) +- 0.02, {secs:.0}s"),
    );
}

#[test]
fn c2_sine_case_two_utilities() {
    let (b, a, secs) = run_case(&case2_scenario(2024));
    let pass = (b - 0.98).abs() <= 0.02 && (a - 0.90).abs() <= 0.02 && secs < 120.0;
    report(
        "2",
        pass,
        &format!("case 2 utilities (b, a) = ({b:.4}, {a:.4}), want (0.98, 0.90) +- 0.02, {secs:.0}s"),
    );
}

fn flip_scenario(seed: u64) -> EquilibriumScenario {
    let server = ParametricModel::linear(&[1.0, -1.0], 1.0).unwrap();
    EquilibriumScenario::new(server, 0.1, -10.0, 10.0, 100_000, seed).unwrap()
}

#[test]
fn c3_uniform_flip_phase_transition() {
    let scenario = flip_scenario(11);
    let problem = LowerLevelProblem::new(
        ModelKind::LogisticLinear,
        TrainLoss::CrossEntropy,
        1e-2,
    )
    .unwrap();
    let t0 = Instant::now();
    let low = verify_uniform_flip(0.3, &scenario, &problem, 20_000).unwrap();
    let secs_low = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let high = verify_uniform_flip(0.7, &scenario, &problem, 20_000).unwrap();
    let secs_high = t0.elapsed().as_secs_f64();
    let pass = low.disagreement <= 0.02
        && high.disagreement >= 0.98
        && secs_low < 60.0
        && secs_high < 60.0;
    report(
        "3",
        pass,
        &format!(
            "disagreement c=0.3 -> {:.4} (<= 0.02), c=0.7 -> {:.4} (>= 0.98), {:.0}s/{:.0}s",
            low.disagreement, high.disagreement, secs_low, secs_high
        ),
    );
}

#[test]
fn c4_band_flip_risk_identity() {
    let scenario = flip_scenario(12);
    let ok = verify_risk_identity(&scenario, 0.5).unwrap();
    let identity_holds = (ok.risk_fs - 0.1).abs() <= 0.003
        && (ok.risk_fb - 0.1).abs() <= 0.003
        && ok.diff.abs() <= 3.0 * 2.0 * ok.stderr
        && ok.pass;
    let control = verify_risk_identity(&scenario, 0.9).unwrap();
    let pass = identity_holds && !control.pass;
    report(
        "4",
        pass,
        &format!(
            "p=0.5 risks ({:.4}, {:.4}) vs 0.1 +- 0.003, diff {:.4}; p=0.9 control pass={} (want false)",
            ok.risk_fs, ok.risk_fb, ok.diff, control.pass
        ),
    );
}

#[test]
fn c5_equilibrium_point_and_trend() {
    let server = ParametricModel::linear(&[1.0, -1.0], 1.0).unwrap();
    let scenario = EquilibriumScenario::new(server, 0.2, -10.0, 10.0, 100_000, 21).unwrap();
    let point = equilibrium_point(&scenario, 200_000).unwrap();
    let point_ok = (point.b_mean - 0.8).abs() <= 0.01 && (point.a_mean - 0.8).abs() <= 0.01;

    let kind = ModelKind::Mlp2 { hidden: 12 };
    let mut rng = rng_from_seed(42);
    let trend_server = ParametricModel::random_init(kind, 24, &mut rng);
    let delta = calibrate_band_width(&trend_server, 0.10, -3.0, 3.0, 300_000, 7).unwrap();
    let trend = bdpl_equilibrium_trend(&BdplTrendConfig {
        server: trend_server,
        delta,
        t: 0.01,
        q_lo: -3.0,
        q_hi: 3.0,
        problem: LowerLevelProblem::new(kind, TrainLoss::CrossEntropy, 1e-2)
            .unwrap()
            .with_tol(1e-4)
            .with_max_iters(400),
        query_sizes: vec![1000, 10_000, 20_000],
        seeds: 10,
        test_size: 20_000,
        seed: 123,
    })
    .unwrap();
    let pass = point_ok && trend.non_increasing;
    report(
        "5",
        pass,
        &format!(
            "equilibrium (b, a) = ({:.4}, {:.4}) vs (0.8, 0.8) +- 0.01; trend median gaps {:?} non-increasing = {}",
            point.b_mean, point.a_mean, trend.median_gaps, trend.non_increasing
        ),
    );
}

struct SharedT1 {
    outcomes: Vec<BilevelOutcome>,
    secs: f64,
}

static T1_RUNS: Lazy<SharedT1> = Lazy::new(|| {
    let t0 = Instant::now();
    let outcomes: Vec<BilevelOutcome> =
        (0..20).map(|seed| optimize_t1(seed, 150).unwrap().1).collect();
    SharedT1 { outcomes, secs: t0.elapsed().as_secs_f64() }
});

#[test]
fn c6_strategy_selection_and_loss_trace() {
    let shared = &*T1_RUNS;
    let target = t1_strategy_index(15.0, 0.1).unwrap();

    // mean adversary training loss (the weighted objective the queries
    // descend) across seeds per outer iteration, smoothed (window 5)
    let iters = shared.outcomes[0].trace.rows.len();
    let mean_loss: Vec<f64> = (0..iters)
        .map(|k| {
            shared.outcomes.iter().map(|o| o.trace.rows[k].h_upper).sum::<f64>()
                / shared.outcomes.len() as f64
        })
        .collect();
    let smooth: Vec<f64> =
        mean_loss.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    // tolerance scaled to the trace's dynamic range: stochastic evaluation
    // noise may wobble each step by up to 0.01% of the total decrease
    let tol = 1e-4 * (smooth[0] - *smooth.last().unwrap()).abs();
    let non_increasing = smooth.windows(2).all(|w| w[1] <= w[0] + tol);
    // plateau: everything after iteration 100 stays within 5% of the total
    // drop from the level at iteration 100
    let total_drop = (smooth[0] - *smooth.last().unwrap()).abs().max(1e-12);
    let plateau = smooth[100 - 4..]
        .iter()
        .all(|v| (v - smooth.last().unwrap()).abs() <= 0.05 * total_drop);

    let winners: Vec<usize> = shared.outcomes.iter().map(|o| o.winner()).collect();
    let hits = winners.iter().filter(|&&w| w == target).count();
    let one_hot = shared
        .outcomes
        .iter()
        .filter(|o| {
            o.lambda.as_slice().iter().cloned().fold(f64::MIN, f64::max) >= 0.9
        })
        .count();

    let pass = non_increasing && plateau && hits >= 15 && one_hot >= 15 && shared.secs < 600.0;
    report(
        "6",
        pass,
        &format!(
            "winner hits {hits}/20 (target index {target}, winners {winners:?}), one-hot {one_hot}/20, smoothed loss non-increasing = {non_increasing}, plateau by 100 = {plateau}, {:.0}s",
            shared.secs
        ),
    );
}

#[test]
fn c7_boundary_concentration_vs_uniform() {
    let shared = &*T1_RUNS;
    let t1 = gen_t1(0).unwrap();
    let delta = 0.5;
    let mut wins = 0;
    let mut fracs = Vec::new();
    for (seed, out) in shared.outcomes.iter().enumerate() {
        let strategy = &t1.strategies[out.winner()];
        let frac = boundary_concentration(&out.x_last, &t1.server, strategy, delta);
        let mut rng = rng_from_seed(child_seed(7000, seed as u64, 0));
        let baseline_qs =
            init_queries(200, 2, QueryInit::Uniform { lo: -10.0, hi: 10.0 }, &mut rng).unwrap();
        let baseline = boundary_concentration(&baseline_qs, &t1.server, strategy, delta);
        if frac > baseline {
            wins += 1;
        }
        fracs.push((frac, baseline));
    }
    let pass = wins >= 15;
    let mean_opt = fracs.iter().map(|f| f.0).sum::<f64>() / fracs.len() as f64;
    let mean_base = fracs.iter().map(|f| f.1).sum::<f64>() / fracs.len() as f64;
    report(
        "7",
        pass,
        &format!(
            "optimized band fraction beats uniform baseline in {wins}/20 paired seeds (mean {mean_opt:.3} vs {mean_base:.3}, delta = {delta})"
        ),
    );
}

#[test]
fn c8_scaled_ab_points_above_diagonal() {
    let dim = 16usize;
    let mut rng = rng_from_seed(5);
    let mut w = vec![0.0; dim];
    for v in w.iter_mut() {
        *v = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
    }
    let n: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in w.iter_mut() {
        *v *= 2.0 / n;
    }
    let server = ParametricModel::linear(&w, 0.0).unwrap();
    let mut strategies = Vec::new();
    for &amp in &[0.5, 1.0, 2.0, 4.0] {
        for &freq in &[0.5, 1.0, 2.0] {
            strategies.push(DefenseStrategy::SinePerturb { amp, freq });
        }
    }
    let inner = LowerLevelProblem::new(ModelKind::LogisticLinear, TrainLoss::CrossEntropy, 1e-2)
        .unwrap()
        .with_tol(1e-5);
    let mut test_rng = rng_from_seed(child_seed(5, 1, 0));
    let xs =
        init_queries(20_000, dim, QueryInit::Uniform { lo: -3.0, hi: 3.0 }, &mut test_rng).unwrap();
    let ys: Vec<f64> = (0..xs.rows()).map(|i| server.forward(xs.row(i)).unwrap().hard).collect();
    let test = TestSet::new(xs, ys).unwrap();
    let config = BilevelConfig {
        strategies: strategies.clone(),
        inner: inner.clone(),
        n_queries: 300,
        box_lo: -3.0,
        box_hi: 3.0,
        r0: 24.0,
        s0: 0.5,
        diminishing: true,
        neumann_steps: 30,
        neumann_scale: None,
        minibatch: 256,
        eval_size: 2000,
        outer_iters: 150,
        inner_iters_per_outer: 5,
        stop_window: 10,
        stop_rel_tol: 0.0,
        seed: 5,
    };
    let out = bilevel_run(&config, &server, &test).unwrap();
    let mut above = 0;
    for (j, strategy) in strategies.iter().enumerate() {
        let mut oracle = DefenseOracle::new(
            server.clone(),
            strategy.clone(),
            ResponseMode::Hard,
            child_seed(5, 20 + j as u64, 0),
        )
        .unwrap();
        let responses = oracle.respond(&out.x_last).unwrap();
        let authentic: Vec<f64> = (0..out.x_last.rows())
            .map(|i| server.forward(out.x_last.row(i)).unwrap().hard)
            .collect();
        let b = server_utility(&authentic, &responses.y, LossKind::ZeroOne).unwrap();
        let mut fit_rng = rng_from_seed(child_seed(5, 40 + j as u64, 0));
        let beta0 = ParametricModel::random_init(inner.kind, dim, &mut fit_rng);
        let (f_a, _) = fit_lower(&inner, &responses, &beta0.params).unwrap();
        let a = adversary_utility(&f_a, &server, &test.xs, LossKind::ZeroOne).unwrap();
        if a > b {
            above += 1;
        }
    }
    let pass = above as f64 >= 0.8 * strategies.len() as f64;
    report(
        "8",
        pass,
        &format!("AB points with a > b: {above}/{} (need >= 80%)", strategies.len()),
    );
}

#[test]
fn c9_numerical_property_suite() {
    // (a) hypergradient vs finite differences through the ridge closed form
    let server = ParametricModel::linear(&[1.0, -1.0], 1.0).unwrap();
    let mu = 0.3;
    let mut rng = rng_from_seed(5);
    let queries = init_queries(3, 2, QueryInit::Uniform { lo: -2.0, hi: 2.0 }, &mut rng).unwrap();
    let test = init_queries(20, 2, QueryInit::Uniform { lo: -3.0, hi: 3.0 }, &mut rng).unwrap();
    let test_y: Vec<f64> = (0..20).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let phi = |x: &Mat| -> f64 {
        let targets: Vec<f64> = (0..x.rows()).map(|i| server.raw(x.row(i))).collect();
        let beta = ridge_closed_form(x, &targets, mu).unwrap();
        let model = ParametricModel::new(ModelKind::Linear, 2, beta).unwrap();
        (0..test.rows())
            .map(|t| {
                let u = model.raw(test.row(t));
                (u - test_y[t]) * (u - test_y[t])
            })
            .sum::<f64>()
            / test.rows() as f64
    };
    let targets: Vec<f64> = (0..queries.rows()).map(|i| server.raw(queries.row(i))).collect();
    let beta_star = ridge_closed_form(&queries, &targets, mu).unwrap();
    let model = ParametricModel::new(ModelKind::Linear, 2, beta_star).unwrap();
    let q_grads: Vec<Vec<f64>> =
        (0..queries.rows()).map(|i| server.raw_grad_input(queries.row(i))).collect();
    let (_, mut gb) = model.batch_loss_grad(&test, TrainLoss::Squared, &test_y, 0.0).unwrap();
    for g in &mut gb {
        *g /= test.rows() as f64;
    }
    let hg = hypergrad_x(
        &model,
        &queries,
        &targets,
        Some(&q_grads),
        TrainLoss::Squared,
        mu,
        &gb,
        4000,
        None,
    )
    .unwrap();
    let h = 1e-5;
    let mut hyper_rel: f64 = 0.0;
    for e in 0..queries.rows() * queries.cols() {
        let mut hi = queries.clone();
        let mut lo = queries.clone();
        hi.as_mut_slice()[e] += h;
        lo.as_mut_slice()[e] -= h;
        let fd = (phi(&hi) - phi(&lo)) / (2.0 * h);
        hyper_rel = hyper_rel.max((fd - hg.as_slice()[e]).abs() / fd.abs().max(1e-8));
    }

    // (b) analytic gradients and HVPs vs central differences, 100 instances
    let mut grad_rel: f64 = 0.0;
    let mut hvp_rel: f64 = 0.0;
    for inst in 0..100 {
        let mut rng = rng_from_seed(child_seed(900, inst, 0));
        let dim = 2 + (inst % 3) as usize;
        let kind = if inst % 2 == 0 {
            ModelKind::LogisticLinear
        } else {
            ModelKind::Mlp2 { hidden: 3 }
        };
        let loss = if inst % 3 == 0 { TrainLoss::Squared } else { TrainLoss::CrossEntropy };
        let model = ParametricModel::random_init(kind, dim, &mut rng);
        let n = 4;
        let xs = init_queries(n, dim, QueryInit::Gaussian, &mut rng).unwrap();
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let mu = 0.3;
        let (_, grad) = model.batch_loss_grad(&xs, loss, &targets, mu).unwrap();
        let fh = 1e-6;
        for p in 0..model.params.len() {
            let mut up = model.clone();
            up.params[p] += fh;
            let mut dn = model.clone();
            dn.params[p] -= fh;
            let (vu, _) = up.batch_loss_grad(&xs, loss, &targets, mu).unwrap();
            let (vd, _) = dn.batch_loss_grad(&xs, loss, &targets, mu).unwrap();
            let fd = (vu - vd) / (2.0 * fh);
            grad_rel = grad_rel.max((fd - grad[p]).abs() / fd.abs().max(1.0));
        }
        let v: Vec<f64> = (0..model.params.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hvp = model.hvp_beta(&xs, loss, &targets, mu, &v).unwrap();
        let hh = 1e-5;
        for p in 0..model.params.len() {
            let mut up = model.clone();
            let mut dn = model.clone();
            for q in 0..model.params.len() {
                up.params[q] += hh * v[q];
                dn.params[q] -= hh * v[q];
            }
            let (_, gu) = up.batch_loss_grad(&xs, loss, &targets, mu).unwrap();
            let (_, gd) = dn.batch_loss_grad(&xs, loss, &targets, mu).unwrap();
            let fd = (gu[p] - gd[p]) / (2.0 * hh);
            hvp_rel = hvp_rel.max((fd - hvp[p]).abs() / fd.abs().max(1.0));
        }
    }

    // (c) simplex projection vs a brute-force grid oracle
    let mut simplex_err: f64 = 0.0;
    for inst in 0..20u64 {
        let mut rng = rng_from_seed(child_seed(901, inst, 0));
        let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let proj = project_simplex(&v).unwrap();
        // exhaustive grid over the 2-simplex; spacing 1/4000 keeps the
        // oracle's own discretization error well under the tolerance
        let r = 4000usize;
        let mut best = (f64::INFINITY, vec![0.0; 3]);
        for i in 0..=r {
            for j in 0..=(r - i) {
                let p = [i as f64 / r as f64, j as f64 / r as f64, (r - i - j) as f64 / r as f64];
                let d: f64 = p.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, p.to_vec());
                }
            }
        }
        for k in 0..3 {
            simplex_err = simplex_err.max((proj.as_slice()[k] - best.1[k]).abs());
        }
    }

    // (d) Neumann inverse application vs a dense SPD solve
    let mut neumann_err: f64 = 0.0;
    for inst in 0..20u64 {
        let mut rng = rng_from_seed(child_seed(902, inst, 0));
        let d = 4;
        // SPD matrix A = B B^T / d + I
        let mut b = vec![0.0; d * d];
        for x in b.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += b[i * d + k] * b[j * d + k];
                }
                a[i * d + j] = s / d as f64 + if i == j { 1.0 } else { 0.0 };
            }
        }
        let rhs: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let apply = |v: &[f64]| -> Vec<f64> {
            (0..d).map(|i| (0..d).map(|j| a[i * d + j] * v[j]).sum()).collect()
        };
        let trace: f64 = (0..d).map(|i| a[i * d + i]).sum();
        let approx = neumann_inverse_apply(&apply, &rhs, 4000, 1.0 / trace).unwrap();
        let exact = solve_spd(&a, &rhs).unwrap();
        for k in 0..d {
            neumann_err = neumann_err.max((approx[k] - exact[k]).abs());
        }
    }

    // (e) utilities stay in [0, 1] for random models and losses
    let mut utilities_ok = true;
    for inst in 0..50u64 {
        let mut rng = rng_from_seed(child_seed(903, inst, 0));
        let dim = 3;
        let f_a = ParametricModel::random_init(ModelKind::LogisticLinear, dim, &mut rng);
        let f_s = ParametricModel::random_init(ModelKind::LogisticLinear, dim, &mut rng);
        let xs = init_queries(50, dim, QueryInit::Gaussian, &mut rng).unwrap();
        for loss in [LossKind::ZeroOne, LossKind::CrossEntropy, LossKind::ScaledL2] {
            let u = adversary_utility(&f_a, &f_s, &xs, loss).unwrap();
            if !(0.0..=1.0).contains(&u) {
                utilities_ok = false;
            }
        }
    }

    // (f) bit-exact replay of a stochastic-oracle replication
    let scenario = case1_scenario(77);
    let server = scenario.server.build().unwrap();
    let strategy = DefenseStrategy::UniformFlip { c: 0.3 };
    let r1 = run_replication(&scenario, &server, &strategy, 0, 0).unwrap();
    let r2 = run_replication(&scenario, &server, &strategy, 0, 0).unwrap();
    let replay_ok = r1.0.to_bits() == r2.0.to_bits() && r1.1.to_bits() == r2.1.to_bits();

    let pass = hyper_rel <= 1e-3
        && grad_rel <= 1e-5
        && hvp_rel <= 1e-5
        && simplex_err <= 1e-3
        && neumann_err <= 1e-3
        && utilities_ok
        && replay_ok;
    report(
        "9",
        pass,
        &format!(
            "hypergrad rel {hyper_rel:.2e} (<=1e-3), grad rel {grad_rel:.2e} / hvp rel {hvp_rel:.2e} (<=1e-5), simplex {simplex_err:.2e} (<=1e-3), neumann {neumann_err:.2e} (<=1e-3), utilities in [0,1] = {utilities_ok}, bit-exact replay = {replay_ok}"
        ),
    );
}
