//! Executable verification of the theory at desk scale: the
//! risk-indistinguishability identity under boundary flipping, the 45-degree
//! equilibrium point, the uniform-flip phase transition, and the BDPL
//! approach to the equilibrium as query budgets grow.

use crate::attack::{extract, init_queries, LowerLevelProblem, QueryInit};
use crate::defense::{
    boundary_distance, construct_fb, DefenseOracle, DefenseStrategy, RegionSpec,
    ResponseMode,
};
use crate::error::{Error, Result};
use crate::metrics::{adversary_utility, ABPoint, LossKind};
use crate::models::ParametricModel;
use crate::numeric::{child_seed, rng_from_seed, Mat};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A boundary-flip scenario with its region calibrated to a target mass.
#[derive(Clone, Debug)]
pub struct EquilibriumScenario {
    pub server: ParametricModel,
    /// target P(x in S) = 2 epsilon under uniform queries on the box
    pub epsilon: f64,
    pub band_width: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    pub budget: usize,
    pub seed: u64,
}

/// Empirical quantile of boundary distances under uniform sampling; this is
/// the fixed point the width bisection would converge to, computed directly.
pub fn calibrate_band_width(
    server: &ParametricModel,
    mass: f64,
    q_lo: f64,
    q_hi: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&mass) {
        return Err(Error::Parameter(format!("region mass {mass} outside [0,1)")));
    }
    if mass == 0.0 {
        return Ok(0.0);
    }
    let mut rng = rng_from_seed(seed);
    let xs = init_queries(samples, server.dim, QueryInit::Uniform { lo: q_lo, hi: q_hi }, &mut rng)?;
    let mut dists: Vec<f64> =
        (0..xs.rows()).map(|i| boundary_distance(server, xs.row(i))).collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(dists[((mass * samples as f64) as usize).min(samples - 1)])
}

impl EquilibriumScenario {
    /// Builds the scenario, calibrating the band width so the region mass is
    /// 2 epsilon (within +-0.01, checked on an independent sample).
    pub fn new(
        server: ParametricModel,
        epsilon: f64,
        q_lo: f64,
        q_hi: f64,
        budget: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..0.5).contains(&epsilon) {
            return Err(Error::Parameter(format!("epsilon {epsilon} outside [0, 0.5)")));
        }
        if budget == 0 {
            return Err(Error::Parameter("budget must be >= 1".into()));
        }
        let band_width = calibrate_band_width(
            &server,
            2.0 * epsilon,
            q_lo,
            q_hi,
            1_000_000,
            child_seed(seed, 900, 0),
        )?;
        let scenario = Self { server, epsilon, band_width, q_lo, q_hi, budget, seed };
        if epsilon > 0.0 {
            let mass = scenario.estimate_region_mass(200_000, child_seed(seed, 901, 0))?;
            if (mass - 2.0 * epsilon).abs() > 0.01 {
                return Err(Error::DegenerateRegion(format!(
                    "calibrated mass {mass} misses target {}",
                    2.0 * epsilon
                )));
            }
        }
        Ok(scenario)
    }

    pub fn region(&self) -> RegionSpec {
        RegionSpec::Band { width: self.band_width }
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Mat> {
        let mut rng = rng_from_seed(seed);
        init_queries(n, self.server.dim, QueryInit::Uniform { lo: self.q_lo, hi: self.q_hi }, &mut rng)
    }

    pub fn estimate_region_mass(&self, n: usize, seed: u64) -> Result<f64> {
        let xs = self.sample(n, seed)?;
        let region = self.region();
        let inside =
            (0..xs.rows()).filter(|&i| region.contains(&self.server, xs.row(i))).count();
        Ok(inside as f64 / n as f64)
    }
}

/// Monte Carlo verdict on the Theorem-1 risk identity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiskIdentityReport {
    pub claim: String,
    pub epsilon: f64,
    pub flip_prob: f64,
    pub risk_fs: f64,
    pub risk_fb: f64,
    pub diff: f64,
    /// binomial standard error of each risk estimate
    pub stderr: f64,
    pub pass: bool,
    pub seed: u64,
    pub budget: usize,
}

/// Estimates the 0-1 risks of f_S and its band-mirrored twin f_B against
/// the flip oracle's responses. At flip probability 0.5 both risks equal
/// epsilon and are indistinguishable; at other probabilities the identity
/// breaks (negative control).
pub fn verify_risk_identity(
    scenario: &EquilibriumScenario,
    flip_prob: f64,
) -> Result<RiskIdentityReport> {
    let n = scenario.budget;
    let xs = scenario.sample(n, child_seed(scenario.seed, 1, 0))?;
    let strategy =
        DefenseStrategy::BoundaryFlip { region: scenario.region(), flip_prob };
    let mut oracle = DefenseOracle::new(
        scenario.server.clone(),
        strategy,
        ResponseMode::Hard,
        child_seed(scenario.seed, 2, 0),
    )?;
    let responses = oracle.respond(&xs)?;
    let fb = construct_fb(&scenario.server, scenario.region())?;
    let mut err_fs = 0usize;
    let mut err_fb = 0usize;
    for i in 0..n {
        let x = xs.row(i);
        if responses.y[i] != scenario.server.forward(x)?.hard {
            err_fs += 1;
        }
        if responses.y[i] != fb.hard(x) {
            err_fb += 1;
        }
    }
    let risk_fs = err_fs as f64 / n as f64;
    let risk_fb = err_fb as f64 / n as f64;
    let e = scenario.epsilon;
    let stderr = (e * (1.0 - e) / n as f64).sqrt().max(1e-9);
    let diff = (risk_fs - risk_fb).abs();
    let pass = (risk_fs - e).abs() <= 3.0 * stderr
        && (risk_fb - e).abs() <= 3.0 * stderr
        && diff <= 3.0 * (2.0 * stderr);
    Ok(RiskIdentityReport {
        claim: "theorem-1-risk-identity".into(),
        epsilon: e,
        flip_prob,
        risk_fs,
        risk_fb,
        diff,
        stderr,
        pass,
        seed: scenario.seed,
        budget: n,
    })
}

/// The equilibrium AB point: the server plays BoundaryFlip(p = 0.5) on the
/// mass-2e band; the adversary, facing two indistinguishable risk
/// minimizers, picks f_S or f_B by an explicit fair coin. Expected point
/// (1 - e, 1 - e) on the 45-degree line.
pub fn equilibrium_point(scenario: &EquilibriumScenario, coin_draws: usize) -> Result<ABPoint> {
    if coin_draws == 0 {
        return Err(Error::Parameter("coin_draws must be >= 1".into()));
    }
    let n = scenario.budget;
    let xs = scenario.sample(n, child_seed(scenario.seed, 3, 0))?;
    let strategy = DefenseStrategy::BoundaryFlip { region: scenario.region(), flip_prob: 0.5 };
    let mut oracle = DefenseOracle::new(
        scenario.server.clone(),
        strategy,
        ResponseMode::Hard,
        child_seed(scenario.seed, 4, 0),
    )?;
    let responses = oracle.respond(&xs)?;
    let authentic: Vec<f64> =
        (0..n).map(|i| scenario.server.forward(xs.row(i)).map(|p| p.hard)).collect::<Result<_>>()?;
    let b = crate::metrics::server_utility(&authentic, &responses.y, LossKind::ZeroOne)?;

    // utilities of the two candidate models against the authentic server
    let fb = construct_fb(&scenario.server, scenario.region())?;
    let test = scenario.sample(n, child_seed(scenario.seed, 5, 0))?;
    let u_fs = 1.0;
    let mut agree = 0usize;
    for i in 0..n {
        if fb.hard(test.row(i)) == scenario.server.forward(test.row(i))?.hard {
            agree += 1;
        }
    }
    let u_fb = agree as f64 / n as f64;

    let mut coin = rng_from_seed(child_seed(scenario.seed, 6, 0));
    let a = (0..coin_draws)
        .map(|_| if coin.gen_bool(0.5) { u_fs } else { u_fb })
        .sum::<f64>()
        / coin_draws as f64;

    Ok(ABPoint {
        pair_id: "boundary-flip-equilibrium".into(),
        strategy_params: format!("epsilon={} p=0.5", scenario.epsilon),
        b_mean: b,
        b_stderr: (b * (1.0 - b) / n as f64).sqrt(),
        a_mean: a,
        a_stderr: (u_fs - u_fb).abs() * 0.5 / (coin_draws as f64).sqrt(),
        reps: coin_draws,
        test_size: n,
    })
}

/// Verdict on the uniform-flip phase transition for one flip level c.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UniformFlipReport {
    pub claim: String,
    pub c: f64,
    pub disagreement: f64,
    pub threshold: f64,
    pub pass: bool,
    pub seed: u64,
    pub queries: usize,
    pub test_size: usize,
}

/// Extracts a model through a UniformFlip(c) oracle and reports the
/// disagreement with the server: near 0 for c < 0.5, near 1 for c > 0.5.
/// c = 0.5 is rejected (responses carry no signal).
pub fn verify_uniform_flip(
    c: f64,
    scenario: &EquilibriumScenario,
    problem: &LowerLevelProblem,
    queries: usize,
) -> Result<UniformFlipReport> {
    if c == 0.5 {
        return Err(Error::Parameter(
            "c = 0.5 is degenerate: responses are independent of the model".into(),
        ));
    }
    let mut rng = rng_from_seed(child_seed(scenario.seed, 7, 0));
    let qs = init_queries(
        queries,
        scenario.server.dim,
        QueryInit::Uniform { lo: scenario.q_lo, hi: scenario.q_hi },
        &mut rng,
    )?;
    let mut oracle = DefenseOracle::new(
        scenario.server.clone(),
        DefenseStrategy::UniformFlip { c },
        ResponseMode::Hard,
        child_seed(scenario.seed, 8, 0),
    )?;
    let (f_a, _) = extract(&mut oracle, &qs, problem, &mut rng)?;
    let test = scenario.sample(scenario.budget, child_seed(scenario.seed, 9, 0))?;
    let a = adversary_utility(&f_a, &scenario.server, &test, LossKind::ZeroOne)?;
    let disagreement = 1.0 - a;
    let (threshold, pass) = if c < 0.5 {
        (0.02, disagreement <= 0.02)
    } else {
        (0.98, disagreement >= 0.98)
    };
    Ok(UniformFlipReport {
        claim: "proposition-1-phase-transition".into(),
        c,
        disagreement,
        threshold,
        pass,
        seed: scenario.seed,
        queries,
        test_size: scenario.budget,
    })
}

/// Configuration of the BDPL query-growth experiment.
#[derive(Clone, Debug)]
pub struct BdplTrendConfig {
    pub server: ParametricModel,
    pub delta: f64,
    pub t: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    pub problem: LowerLevelProblem,
    pub query_sizes: Vec<usize>,
    pub seeds: usize,
    pub test_size: usize,
    pub seed: u64,
}

/// Trend report: per query size, the median AB point over seeds, plus the
/// median gap |a - b| whose monotone decrease quantifies the approach to
/// the 45-degree line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrendReport {
    pub claim: String,
    pub points: Vec<ABPoint>,
    pub median_gaps: Vec<f64>,
    pub non_increasing: bool,
    pub seed: u64,
    pub seeds: usize,
}

fn median(vals: &mut [f64]) -> f64 {
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        (vals[n / 2 - 1] + vals[n / 2]) / 2.0
    }
}

/// Runs the extraction under a Bdpl oracle for each query size and checks
/// that the median |a - b| does not increase with the budget.
pub fn bdpl_equilibrium_trend(config: &BdplTrendConfig) -> Result<TrendReport> {
    if config.query_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("query sizes must be strictly increasing".into()));
    }
    if config.seeds == 0 {
        return Err(Error::Parameter("need at least one seed".into()));
    }
    let strategy = DefenseStrategy::Bdpl { delta: config.delta, t: config.t };
    strategy.validate()?;
    let mut points = Vec::new();
    let mut median_gaps = Vec::new();
    for (si, &n_q) in config.query_sizes.iter().enumerate() {
        let runs: Result<Vec<(f64, f64)>> = (0..config.seeds)
            .into_par_iter()
            .map(|rep| {
                let root = child_seed(config.seed, 10 + si as u64, rep as u64);
                let mut rng = rng_from_seed(root);
                let qs = init_queries(
                    n_q,
                    config.server.dim,
                    QueryInit::Uniform { lo: config.q_lo, hi: config.q_hi },
                    &mut rng,
                )?;
                let mut oracle = DefenseOracle::new(
                    config.server.clone(),
                    strategy.clone(),
                    ResponseMode::Hard,
                    child_seed(root, 1, 0),
                )?;
                // server utility on this replication's queries
                let authentic: Vec<f64> = (0..n_q)
                    .map(|i| config.server.forward(qs.row(i)).map(|p| p.hard))
                    .collect::<Result<_>>()?;
                let responses = oracle.respond(&qs)?;
                let b = crate::metrics::server_utility(
                    &authentic,
                    &responses.y,
                    LossKind::ZeroOne,
                )?;
                // re-fit from the already-drawn responses
                let beta0 =
                    ParametricModel::random_init(config.problem.kind, config.server.dim, &mut rng);
                let (f_a, _) = crate::attack::fit_lower(&config.problem, &responses, &beta0.params)?;
                let mut test_rng = rng_from_seed(child_seed(root, 2, 0));
                let test = init_queries(
                    config.test_size,
                    config.server.dim,
                    QueryInit::Uniform { lo: config.q_lo, hi: config.q_hi },
                    &mut test_rng,
                )?;
                let a = adversary_utility(&f_a, &config.server, &test, LossKind::ZeroOne)?;
                Ok((b, a))
            })
            .collect();
        let runs = runs?;
        let mut gaps: Vec<f64> = runs.iter().map(|(b, a)| (a - b).abs()).collect();
        let gap = median(&mut gaps);
        let bs: Vec<f64> = runs.iter().map(|r| r.0).collect();
        let as_: Vec<f64> = runs.iter().map(|r| r.1).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        points.push(ABPoint {
            pair_id: format!("bdpl-n{n_q}"),
            strategy_params: format!("delta={} t={}", config.delta, config.t),
            b_mean: mean(&bs),
            b_stderr: 0.0,
            a_mean: mean(&as_),
            a_stderr: 0.0,
            reps: config.seeds,
            test_size: config.test_size,
        });
        median_gaps.push(gap);
    }
    let non_increasing = median_gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    Ok(TrendReport {
        claim: "bdpl-45-degree-trend".into(),
        points,
        median_gaps,
        non_increasing,
        seed: config.seed,
        seeds: config.seeds,
    })
}

/// Serializes any report as pretty JSON with an atomic write.
pub fn write_report_json<T: Serialize>(report: &T, path: &std::path::Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("report encode: {e}")))?;
    crate::metrics::atomic_write(path, text.as_bytes())
}
