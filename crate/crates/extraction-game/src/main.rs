use clap::{Args, Parser, Subcommand};
use extraction_game::attack::{init_queries, QueryInit};
use extraction_game::defense::{DefenseStrategy, StrategyCatalog};
use extraction_game::harness::{
    self, boundary_concentration, case1_scenario, gen_t1, run_scenario, Scenario,
};
use extraction_game::metrics::atomic_write;
use extraction_game::models::save_checkpoint;
use extraction_game::numeric::{child_seed, rng_from_seed, Mat};
use extraction_game::theory::{
    equilibrium_point, verify_risk_identity, write_report_json, EquilibriumScenario,
};
use extraction_game::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "extraction-game", about = "Model-extraction attack/defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario config (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root RNG seed (overrides the config's seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Replication count (overrides the config's reps)
    #[arg(long)]
    reps: Option<usize>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Assertions like "a>=0.84", "b<=0.95", or "pass"; exit 1 on failure
    #[arg(long = "assert")]
    asserts: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark dataset (server, strategy grid, queries, test set)
    GenData(Common),
    /// Run replications and write the utility-pair (a, b) curve
    AbCurve(Common),
    /// Run the query-optimization solver and write its trace
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Outer iteration budget
        #[arg(long, default_value_t = 150)]
        iters: usize,
    },
    /// Check the flip-defense risk identity and the predicted equilibrium point
    VerifyTheory {
        #[command(flatten)]
        common: Common,
        /// Band mass epsilon for the flip region
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        /// Flip probability to test (0.5 is the identity case)
        #[arg(long, default_value_t = 0.5)]
        flip_prob: f64,
    },
    /// Measure how concentrated a query set is near the defense boundary
    BoundaryStats {
        #[command(flatten)]
        common: Common,
        /// CSV of query points (one row per point); defaults to <out>/queries.csv
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Band half-width
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
    let asserts = common_of(&cli.command).asserts.clone();
    match run(cli.command, &mut metrics) {
        Ok(()) => {
            if let Err(msg) = check_asserts(&metrics, &asserts) {
                eprintln!("assertion failed: {msg}");
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}

fn common_of(cmd: &Command) -> &Common {
    match cmd {
        Command::GenData(c) | Command::AbCurve(c) => c,
        Command::Optimize { common, .. }
        | Command::VerifyTheory { common, .. }
        | Command::BoundaryStats { common, .. } => common,
    }
}

fn load_scenario(common: &Common) -> Result<Scenario> {
    let mut s = match &common.config {
        Some(path) => Scenario::load(path)?,
        None => case1_scenario(0),
    };
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    if let Some(reps) = common.reps {
        s.reps = reps;
    }
    s.validate()?;
    Ok(s)
}

fn run(cmd: Command, metrics: &mut BTreeMap<String, f64>) -> Result<()> {
    match cmd {
        Command::GenData(common) => {
            let seed = common.seed.unwrap_or(0);
            let t1 = gen_t1(seed)?;
            std::fs::create_dir_all(&common.out)?;
            save_checkpoint(&t1.server, &common.out.join("server.json"))?;
            StrategyCatalog { strategies: t1.strategies.clone() }
                .save(&common.out.join("strategies.toml"))?;
            write_points_csv(&t1.queries0, None, &common.out.join("queries0.csv"))?;
            write_points_csv(&t1.test.xs, Some(&t1.test.ys), &common.out.join("test.csv"))?;
            println!(
                "wrote dataset: {} strategies, {} queries, {} test points -> {}",
                t1.strategies.len(),
                t1.queries0.rows(),
                t1.test.len(),
                common.out.display()
            );
            Ok(())
        }
        Command::AbCurve(common) => {
            let scenario = load_scenario(&common)?;
            let summary = run_scenario(&scenario, &common.out)?;
            for p in &summary.points {
                println!(
                    "{}: b = {:.4} +- {:.4}, a = {:.4} +- {:.4} ({} reps)",
                    p.pair_id, p.b_mean, p.b_stderr, p.a_mean, p.a_stderr, p.reps
                );
            }
            if let Some(p) = summary.points.last() {
                metrics.insert("a".into(), p.a_mean);
                metrics.insert("b".into(), p.b_mean);
            }
            metrics.insert("errors".into(), summary.errors.len() as f64);
            Ok(())
        }
        Command::Optimize { common, iters } => {
            let seed = common.seed.unwrap_or(0);
            let (scenario_out, winner) = if let Some(path) = &common.config {
                let mut s = Scenario::load(path)?;
                if let Some(seed) = common.seed {
                    s.seed = seed;
                }
                if s.optimize.is_none() {
                    return Err(Error::Config("scenario has no [optimize] section".into()));
                }
                let summary = run_scenario(&s, &common.out)?;
                (common.out.clone(), summary.winner)
            } else {
                let (t1, out) = harness::optimize_t1(seed, iters)?;
                std::fs::create_dir_all(&common.out)?;
                out.trace.write_csv(&common.out.join("trace.csv"))?;
                write_points_csv(&out.x_last, None, &common.out.join("queries.csv"))?;
                write_report_json(
                    &serde_json::json!({
                        "winner": out.winner(),
                        "lambda": out.lambda.as_slice(),
                        "iterations": out.trace.rows.len(),
                        "strategies": t1.strategies.len(),
                    }),
                    &common.out.join("optimize.json"),
                )?;
                (common.out.clone(), Some(out.winner()))
            };
            if let Some(w) = winner {
                println!("winner strategy index: {w} (artifacts in {})", scenario_out.display());
                metrics.insert("winner".into(), w as f64);
            }
            Ok(())
        }
        Command::VerifyTheory { common, epsilon, flip_prob } => {
            let seed = common.seed.unwrap_or(0);
            let server = extraction_game::models::ParametricModel::linear(&[1.0, -1.0], 1.0)?;
            let scenario =
                EquilibriumScenario::new(server, epsilon, -10.0, 10.0, 100_000, seed)?;
            let report = verify_risk_identity(&scenario, flip_prob)?;
            let point = equilibrium_point(&scenario, 200_000)?;
            std::fs::create_dir_all(&common.out)?;
            write_report_json(&report, &common.out.join("risk_identity.json"))?;
            write_report_json(&point, &common.out.join("equilibrium.json"))?;
            println!(
                "risk identity (p = {flip_prob}): risk(f_S) {:.4}, risk(f_B) {:.4}, target {:.4} -> {}",
                report.risk_fs,
                report.risk_fb,
                report.epsilon,
                if report.pass { "PASS" } else { "FAIL" }
            );
            println!(
                "equilibrium point: (b, a) = ({:.4}, {:.4}), predicted {:.4}",
                point.b_mean,
                point.a_mean,
                1.0 - epsilon
            );
            metrics.insert("pass".into(), if report.pass { 1.0 } else { 0.0 });
            metrics.insert("a".into(), point.a_mean);
            metrics.insert("b".into(), point.b_mean);
            Ok(())
        }
        Command::BoundaryStats { common, queries, delta } => {
            let scenario = load_scenario(&common)?;
            let server = scenario.server.build()?;
            let strategy = scenario.strategies.first().cloned().unwrap_or(DefenseStrategy::Identity);
            let qpath = queries.unwrap_or_else(|| common.out.join("queries.csv"));
            let qs = read_points_csv(&qpath, server.dim)?;
            let frac = boundary_concentration(&qs, &server, &strategy, delta);
            let mut rng = rng_from_seed(child_seed(scenario.seed, 7, 0));
            let baseline = init_queries(
                100_000,
                server.dim,
                QueryInit::Uniform { lo: scenario.test_lo, hi: scenario.test_hi },
                &mut rng,
            )?;
            let frac_uniform = boundary_concentration(&baseline, &server, &strategy, delta);
            std::fs::create_dir_all(&common.out)?;
            write_report_json(
                &serde_json::json!({
                    "delta": delta,
                    "fraction": frac,
                    "fraction_uniform": frac_uniform,
                    "n_queries": qs.rows(),
                }),
                &common.out.join("boundary_stats.json"),
            )?;
            println!(
                "within-band fraction: queries {frac:.4}, uniform baseline {frac_uniform:.4} (delta = {delta})"
            );
            metrics.insert("fraction".into(), frac);
            metrics.insert("fraction_uniform".into(), frac_uniform);
            metrics.insert("excess".into(), frac - frac_uniform);
            Ok(())
        }
    }
}

fn write_points_csv(x: &Mat, labels: Option<&[f64]>, path: &Path) -> Result<()> {
    let mut text = String::new();
    for i in 0..x.rows() {
        let mut row: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(ys) = labels {
            row.push(ys[i].to_string());
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

fn read_points_csv(path: &Path, dim: usize) -> Result<Mat> {
    let text = std::fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < dim {
            return Err(Error::Data(format!(
                "{}:{}: expected at least {dim} columns, found {}",
                path.display(),
                lineno + 1,
                cells.len()
            )));
        }
        for c in &cells[..dim] {
            let v: f64 = c.trim().parse().map_err(|_| {
                Error::Data(format!("{}:{}: bad number {c:?}", path.display(), lineno + 1))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Mat::new(rows, dim, data)
}

/// Checks expressions like "a>=0.84", "b<=0.95", "pass" against the metric map.
fn check_asserts(metrics: &BTreeMap<String, f64>, exprs: &[String]) -> std::result::Result<(), String> {
    for expr in exprs {
        let (name, op, value) = if let Some((n, v)) = expr.split_once(">=") {
            (n, ">=", v)
        } else if let Some((n, v)) = expr.split_once("<=") {
            (n, "<=", v)
        } else if expr.trim() == "pass" {
            ("pass", ">=", "1")
        } else {
            return Err(format!("cannot parse assertion {expr:?} (want NAME>=V or NAME<=V)"));
        };
        let actual = metrics
            .get(name.trim())
            .ok_or_else(|| format!("unknown metric {:?}; have {:?}", name.trim(), metrics.keys()))?;
        let target: f64 = value
            .trim()
            .parse()
            .map_err(|_| format!("bad assertion value in {expr:?}"))?;
        let ok = match op {
            ">=" => *actual >= target,
            _ => *actual <= target,
        };
        if !ok {
            return Err(format!("{expr}: actual {} = {actual:.6}", name.trim()));
        }
    }
    Ok(())
}
