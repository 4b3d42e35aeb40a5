//! Experiment orchestration: scenario configs, synthetic data generation,
//! IDX dataset ingestion, replication runs, and artifact output.

use crate::attack::{fit_lower, init_queries, LowerLevelProblem, QueryInit};
use crate::bilevel::{run as bilevel_run, BilevelConfig, BilevelOutcome, TestSet};
use crate::defense::{boundary_distance, DefenseOracle, DefenseStrategy, ResponseMode};
use crate::error::{Error, Result};
use crate::metrics::{
    adversary_utility, atomic_write, server_utility, write_ab_csv, write_ab_json, ABPoint,
    LossKind,
};
use crate::models::{save_checkpoint, ModelKind, ParametricModel};
use crate::numeric::{child_seed, rng_from_seed, Mat};
use byteorder::{BigEndian, ReadBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Read as _;
use std::path::Path;

/// How the server model is obtained.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum ServerSpec {
    Linear { weights: Vec<f64>, bias: f64 },
    Random { kind: ModelKind, dim: usize, seed: u64 },
    Checkpoint { path: String },
}

impl ServerSpec {
    pub fn build(&self) -> Result<ParametricModel> {
        match self {
            ServerSpec::Linear { weights, bias } => ParametricModel::linear(weights, *bias),
            ServerSpec::Random { kind, dim, seed } => {
                let mut rng = rng_from_seed(*seed);
                Ok(ParametricModel::random_init(*kind, *dim, &mut rng))
            }
            ServerSpec::Checkpoint { path } => crate::models::load_checkpoint(Path::new(path)),
        }
    }
}

/// Optional query-optimization stage parameters (the descent-ascent solver).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizeSpec {
    pub r0: f64,
    pub s0: f64,
    pub outer_iters: usize,
    pub neumann_steps: usize,
    pub minibatch: usize,
    pub eval_size: usize,
    pub inner_iters_per_outer: usize,
}

/// A fully serializable experiment description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub reps: usize,
    pub server: ServerSpec,
    pub strategies: Vec<DefenseStrategy>,
    pub adversary: LowerLevelProblem,
    pub n_queries: usize,
    pub query_init: QueryInit,
    pub response_mode: ResponseMode,
    pub test_size: usize,
    pub test_lo: f64,
    pub test_hi: f64,
    pub eval_loss: LossKind,
    pub optimize: Option<OptimizeSpec>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let s: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("scenario parse: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 || self.n_queries == 0 || self.test_size == 0 {
            return Err(Error::Config("reps, n_queries, test_size must be >= 1".into()));
        }
        if !(self.test_lo < self.test_hi) {
            return Err(Error::Config("invalid test box".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies".into()));
        }
        for s in &self.strategies {
            s.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.eval_loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("scenario encode: {e}")))
    }

    /// SHA-256 of the canonical config text; stored in all outputs.
    pub fn config_hash(&self) -> Result<String> {
        let text = self.to_toml()?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }
}

/// The synthetic linear-server setting: 2-d hyperplane server, the 6 x 8
/// grid of sine perturbations, gaussian initial queries, and a 10^5-point
/// uniform test set labeled by 1{x_1 >= x_2 - 1}.
pub struct T1Data {
    pub server: ParametricModel,
    pub strategies: Vec<DefenseStrategy>,
    pub queries0: Mat,
    pub test: TestSet,
}

pub const T1_AMP_GRID: [f64; 6] = [0.1, 0.5, 1.0, 5.0, 10.0, 15.0];
pub const T1_FREQ_GRID: [f64; 8] = [0.1, -0.1, 1.0, -1.0, 5.0, -5.0, 8.0, -8.0];

/// Index of (amp, freq) in the T1 strategy grid.
pub fn t1_strategy_index(amp: f64, freq: f64) -> Option<usize> {
    let i = T1_AMP_GRID.iter().position(|&m| m == amp)?;
    let j = T1_FREQ_GRID.iter().position(|&w| w == freq)?;
    Some(i * T1_FREQ_GRID.len() + j)
}

pub fn gen_t1(seed: u64) -> Result<T1Data> {
    let server = ParametricModel::linear(&[1.0, -1.0], 1.0)?;
    let mut strategies = Vec::with_capacity(48);
    for &amp in &T1_AMP_GRID {
        for &freq in &T1_FREQ_GRID {
            strategies.push(DefenseStrategy::SinePerturb { amp, freq });
        }
    }
    let mut rng = rng_from_seed(child_seed(seed, 40, 0));
    let queries0 = init_queries(200, 2, QueryInit::Gaussian, &mut rng)?;
    let mut test_rng = rng_from_seed(child_seed(seed, 41, 0));
    let xs = init_queries(100_000, 2, QueryInit::Uniform { lo: -10.0, hi: 10.0 }, &mut test_rng)?;
    let ys: Vec<f64> = (0..xs.rows())
        .map(|i| {
            let r = xs.row(i);
            if r[0] >= r[1] - 1.0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    Ok(T1Data { server, strategies, queries0, test: TestSet::new(xs, ys)? })
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = crate::numeric::norm2(v);
    v.iter().map(|x| x / n).collect()
}

/// The first hyperplane-sine case: utilities near (0.86, 0.92).
pub fn case1_scenario(seed: u64) -> Scenario {
    let w: Vec<f64> = unit(&[1.0, 1.0, 1.0]).iter().map(|v| v * 1.9).collect();
    Scenario {
        name: "hyperplane-sine-case1".into(),
        seed,
        reps: 50,
        server: ServerSpec::Linear { weights: w, bias: 0.0 },
        strategies: vec![DefenseStrategy::SinePerturb { amp: 2.0, freq: 3.0 }],
        adversary: LowerLevelProblem::new(
            ModelKind::LogisticLinear,
            crate::models::TrainLoss::CrossEntropy,
            2.0,
        )
        .unwrap()
        .with_tol(1e-6),
        n_queries: 50,
        query_init: QueryInit::Uniform { lo: -3.0, hi: 3.0 },
        response_mode: ResponseMode::Hard,
        test_size: 100_000,
        test_lo: -3.0,
        test_hi: 3.0,
        eval_loss: LossKind::ZeroOne,
        optimize: None,
    }
}

/// The second hyperplane-sine case: utilities near (0.98, 0.90).
pub fn case2_scenario(seed: u64) -> Scenario {
    let w: Vec<f64> = unit(&[1.0, 1.0, -1.0]).iter().map(|v| v * 4.5).collect();
    Scenario {
        name: "hyperplane-sine-case2".into(),
        seed,
        reps: 50,
        server: ServerSpec::Linear { weights: w, bias: 0.0 },
        strategies: vec![DefenseStrategy::SinePerturb { amp: 0.8, freq: 1.0 }],
        adversary: LowerLevelProblem::new(
            ModelKind::LogisticLinear,
            crate::models::TrainLoss::CrossEntropy,
            5.0,
        )
        .unwrap()
        .with_tol(1e-6),
        n_queries: 50,
        query_init: QueryInit::Uniform { lo: 0.0, hi: 6.0 },
        response_mode: ResponseMode::Hard,
        test_size: 100_000,
        test_lo: 0.0,
        test_hi: 6.0,
        eval_loss: LossKind::ZeroOne,
        optimize: None,
    }
}

/// One replication of the query/extract/evaluate loop for a strategy;
/// returns (server utility, adversary utility).
pub fn run_replication(
    scenario: &Scenario,
    server: &ParametricModel,
    strategy: &DefenseStrategy,
    strategy_idx: usize,
    rep: usize,
) -> Result<(f64, f64)> {
    let root = child_seed(scenario.seed, strategy_idx as u64, rep as u64);
    let mut rng = rng_from_seed(root);
    let queries = init_queries(scenario.n_queries, server.dim, scenario.query_init, &mut rng)?;
    let mut oracle = DefenseOracle::new(
        server.clone(),
        strategy.clone(),
        scenario.response_mode,
        child_seed(root, 1, 0),
    )?;
    let responses = oracle.respond(&queries)?;
    let authentic: Vec<f64> = (0..queries.rows())
        .map(|i| {
            let p = server.forward(queries.row(i))?;
            Ok(match scenario.response_mode {
                ResponseMode::Hard => p.hard,
                ResponseMode::Soft => p.soft,
            })
        })
        .collect::<Result<_>>()?;
    let b = server_utility(&authentic, &responses.y, scenario.eval_loss)?;
    let beta0 = ParametricModel::random_init(scenario.adversary.kind, server.dim, &mut rng);
    let (f_a, _) = fit_lower(&scenario.adversary, &responses, &beta0.params)?;
    let mut test_rng = rng_from_seed(child_seed(root, 2, 0));
    let test = init_queries(
        scenario.test_size,
        server.dim,
        QueryInit::Uniform { lo: scenario.test_lo, hi: scenario.test_hi },
        &mut test_rng,
    )?;
    let a = adversary_utility(&f_a, server, &test, scenario.eval_loss)?;
    Ok((b, a))
}

fn mean_stderr(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Everything run_scenario produces besides the files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub points: Vec<ABPoint>,
    /// replication errors, recorded without aborting the others
    pub errors: Vec<String>,
    pub winner: Option<usize>,
}

/// Executes a scenario's replications and writes the artifact directory:
/// config snapshot + hash, AB CSV/JSON, optional optimizer trace and
/// checkpoints, and a summary.
pub fn run_scenario(scenario: &Scenario, out_dir: &Path) -> Result<RunSummary> {
    scenario.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let config_text = scenario.to_toml()?;
    let hash = scenario.config_hash()?;
    atomic_write(&out_dir.join("config.toml"), config_text.as_bytes())?;
    atomic_write(&out_dir.join("config.sha256"), hash.as_bytes())?;

    let server = scenario.server.build()?;
    let mut errors: Vec<String> = Vec::new();
    let mut points = Vec::new();

    let mut winner = None;
    let mut optimized_queries: Option<Mat> = None;
    if let Some(opt) = &scenario.optimize {
        let config = BilevelConfig {
            strategies: scenario.strategies.clone(),
            inner: scenario.adversary.clone(),
            n_queries: scenario.n_queries,
            box_lo: scenario.test_lo,
            box_hi: scenario.test_hi,
            r0: opt.r0,
            s0: opt.s0,
            diminishing: true,
            neumann_steps: opt.neumann_steps,
            neumann_scale: None,
            minibatch: opt.minibatch,
            eval_size: opt.eval_size,
            outer_iters: opt.outer_iters,
            inner_iters_per_outer: opt.inner_iters_per_outer,
            stop_window: 10,
            stop_rel_tol: 1e-3,
            seed: scenario.seed,
        };
        let test = uniform_test_set(&server, scenario, child_seed(scenario.seed, 90, 0))?;
        let out = bilevel_run(&config, &server, &test)?;
        out.trace.write_csv(&out_dir.join("trace.csv"))?;
        write_queries_csv(&out.x_last, &out_dir.join("queries.csv"))?;
        for (j, beta) in out.betas.iter().enumerate() {
            let model = ParametricModel::new(scenario.adversary.kind, server.dim, beta.clone())?;
            save_checkpoint(&model, &out_dir.join(format!("adversary_{j}.json")))?;
        }
        winner = Some(out.winner());
        optimized_queries = Some(out.x_last.clone());
        crate::theory::write_report_json(
            &serde_json::json!({
                "winner": out.winner(),
                "lambda": out.lambda.as_slice(),
                "iterations": out.trace.rows.len(),
            }),
            &out_dir.join("optimize.json"),
        )?;
    }
    let _ = &optimized_queries;

    for (j, strategy) in scenario.strategies.iter().enumerate() {
        let results: Vec<Result<(f64, f64)>> = (0..scenario.reps)
            .into_par_iter()
            .map(|rep| run_replication(scenario, &server, strategy, j, rep))
            .collect();
        let mut bs = Vec::new();
        let mut as_ = Vec::new();
        for (rep, r) in results.into_iter().enumerate() {
            match r {
                Ok((b, a)) => {
                    bs.push(b);
                    as_.push(a);
                }
                Err(e) => errors.push(format!("strategy {j} rep {rep}: {e}")),
            }
        }
        if bs.is_empty() {
            return Err(Error::Data(format!("strategy {j}: every replication failed")));
        }
        let (b_mean, b_stderr) = mean_stderr(&bs);
        let (a_mean, a_stderr) = mean_stderr(&as_);
        points.push(ABPoint {
            pair_id: format!("{}-s{j}", scenario.name),
            strategy_params: format!("{strategy:?}"),
            b_mean,
            b_stderr,
            a_mean,
            a_stderr,
            reps: bs.len(),
            test_size: scenario.test_size,
        });
    }

    write_ab_csv(&points, &out_dir.join("ab.csv"))?;
    let config_json = serde_json::json!({ "hash": hash, "name": scenario.name, "seed": scenario.seed });
    write_ab_json(&points, &config_json, &out_dir.join("ab.json"))?;
    let summary = RunSummary {
        name: scenario.name.clone(),
        config_hash: hash,
        seed: scenario.seed,
        points,
        errors,
        winner,
    };
    crate::theory::write_report_json(&summary, &out_dir.join("summary.json"))?;
    Ok(summary)
}

fn uniform_test_set(server: &ParametricModel, scenario: &Scenario, seed: u64) -> Result<TestSet> {
    let mut rng = rng_from_seed(seed);
    let xs = init_queries(
        scenario.test_size,
        server.dim,
        QueryInit::Uniform { lo: scenario.test_lo, hi: scenario.test_hi },
        &mut rng,
    )?;
    let ys: Vec<f64> =
        (0..xs.rows()).map(|i| server.forward(xs.row(i)).map(|p| p.hard)).collect::<Result<_>>()?;
    TestSet::new(xs, ys)
}

fn write_queries_csv(x: &Mat, path: &Path) -> Result<()> {
    let mut text = String::new();
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

/// Normalized distance from x to the decision boundary of the defended
/// score (falls back to the server's boundary for flip defenses, whose
/// decision surface is the server's own).
pub fn defended_boundary_distance(
    server: &ParametricModel,
    strategy: &DefenseStrategy,
    x: &[f64],
) -> f64 {
    match (strategy.defended_raw(server, x), strategy.defended_raw_grad_x(server, x)) {
        (Some(raw), Some(grad)) => {
            let g = crate::numeric::norm2(&grad);
            if g <= 1e-12 {
                f64::INFINITY
            } else {
                raw.abs() / g
            }
        }
        _ => boundary_distance(server, x),
    }
}

/// Fraction of queries within normalized distance delta of the defense
/// decision boundary.
pub fn boundary_concentration(
    queries: &Mat,
    server: &ParametricModel,
    strategy: &DefenseStrategy,
    delta: f64,
) -> f64 {
    let within = (0..queries.rows())
        .filter(|&i| defended_boundary_distance(server, strategy, queries.row(i)) <= delta)
        .count();
    within as f64 / queries.rows() as f64
}

/// n x rows x cols images in [0,1] plus per-image labels.
#[derive(Clone, Debug)]
pub struct IdxDataset {
    pub images: Mat,
    /// class ids, or +-1 after pair filtering
    pub labels: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

/// Reads an IDX image/label file pair (big-endian headers), optionally
/// filtering to a class pair whose labels are remapped to (+1, -1).
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    filter: Option<(u8, u8)>,
) -> Result<IdxDataset> {
    let mut imf = std::fs::File::open(images_path)?;
    let magic = imf
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Data(format!("{}: truncated header", images_path.display())))?;
    if magic != 0x0000_0803 {
        return Err(Error::Data(format!(
            "{}: bad magic {magic:#010x}, expected 0x00000803",
            images_path.display()
        )));
    }
    let n = imf.read_u32::<BigEndian>().map_err(|_| truncated(images_path))? as usize;
    let rows = imf.read_u32::<BigEndian>().map_err(|_| truncated(images_path))? as usize;
    let cols = imf.read_u32::<BigEndian>().map_err(|_| truncated(images_path))? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    imf.read_exact(&mut pixels).map_err(|_| truncated(images_path))?;

    let mut lbf = std::fs::File::open(labels_path)?;
    let magic = lbf.read_u32::<BigEndian>().map_err(|_| truncated(labels_path))?;
    if magic != 0x0000_0801 {
        return Err(Error::Data(format!(
            "{}: bad magic {magic:#010x}, expected 0x00000801",
            labels_path.display()
        )));
    }
    let n_labels = lbf.read_u32::<BigEndian>().map_err(|_| truncated(labels_path))? as usize;
    if n_labels != n {
        return Err(Error::Data(format!(
            "{n} images but {n_labels} labels (dimension mismatch)"
        )));
    }
    let mut labels = vec![0u8; n_labels];
    lbf.read_exact(&mut labels).map_err(|_| truncated(labels_path))?;

    let d = rows * cols;
    let mut kept_images = Vec::new();
    let mut kept_labels = Vec::new();
    for i in 0..n {
        let label = labels[i];
        let mapped = match filter {
            Some((pos, neg)) => {
                if label == pos {
                    1.0
                } else if label == neg {
                    -1.0
                } else {
                    continue;
                }
            }
            None => label as f64,
        };
        kept_images.extend(pixels[i * d..(i + 1) * d].iter().map(|&p| p as f64 / 255.0));
        kept_labels.push(mapped);
    }
    if kept_labels.is_empty() {
        return Err(Error::Data("no records after class filtering".into()));
    }
    Ok(IdxDataset {
        images: Mat::new(kept_labels.len(), d, kept_images)?,
        labels: kept_labels,
        rows,
        cols,
    })
}

fn truncated(path: &Path) -> Error {
    Error::Data(format!("{}: truncated file", path.display()))
}

/// Maps errors to the process exit codes documented in the CLI contract:
/// 2 for configuration problems, 3 for data problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        _ => 1,
    }
}

/// Re-exported for callers that orchestrate the optimizer directly.
pub fn optimize_t1(seed: u64, outer_iters: usize) -> Result<(T1Data, BilevelOutcome)> {
    let t1 = gen_t1(seed)?;
    let config = t1_bilevel_config(seed, outer_iters);
    let out = bilevel_run(&config, &t1.server, &t1.test)?;
    Ok((t1, out))
}

/// Solver settings for the 48-strategy synthetic run.
pub fn t1_bilevel_config(seed: u64, outer_iters: usize) -> BilevelConfig {
    BilevelConfig {
        strategies: gen_t1(seed).expect("static grid").strategies,
        inner: LowerLevelProblem::new(
            ModelKind::LogisticLinear,
            crate::models::TrainLoss::CrossEntropy,
            1e-2,
        )
        .expect("positive mu")
        .with_tol(1e-5),
        n_queries: 200,
        box_lo: -10.0,
        box_hi: 10.0,
        // the 1/m factor in the weighted objective shrinks the query
        // gradient by the strategy count (48), so the query stepsize is
        // scaled up accordingly; the weight stepsize is large so the
        // weights lock onto the worst-case strategy within a few outer
        // iterations (both still diminish as 1/sqrt(k+1))
        r0: 384.0,
        s0: 500.0,
        diminishing: true,
        neumann_steps: 30,
        neumann_scale: None,
        minibatch: 256,
        eval_size: 10_000,
        outer_iters,
        inner_iters_per_outer: 5,
        stop_window: 10,
        stop_rel_tol: 0.0,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::WriteBytesExt;
    use std::io::Write as _;

    #[test]
    fn t1_data_matches_spec() {
        let t1 = gen_t1(0).unwrap();
        assert_eq!(t1.strategies.len(), 48);
        assert_eq!(t1.queries0.rows(), 200);
        assert_eq!(t1.test.len(), 100_000);
        // label formula checks
        let lbl = |x1: f64, x2: f64| if x1 >= x2 - 1.0 { 1.0 } else { -1.0 };
        assert_eq!(lbl(0.0, 0.0), 1.0);
        assert_eq!(lbl(0.0, 2.0), -1.0);
        for i in 0..t1.test.len() {
            let r = t1.test.xs.row(i);
            assert_eq!(t1.test.ys[i], lbl(r[0], r[1]));
        }
        // labels agree with the server's sign
        for i in 0..200 {
            let r = t1.test.xs.row(i);
            assert_eq!(t1.test.ys[i], t1.server.forward(r).unwrap().hard);
        }
        assert_eq!(t1_strategy_index(15.0, 0.1), Some(40));
        assert_eq!(t1_strategy_index(0.1, 0.1), Some(0));
        assert_eq!(t1_strategy_index(2.0, 0.1), None);
    }

    #[test]
    fn scenario_round_trip_and_hash() {
        let s = case1_scenario(7);
        let text = s.to_toml().unwrap();
        let back: Scenario = toml::from_str(&text).unwrap();
        assert_eq!(back.name, s.name);
        assert_eq!(back.config_hash().unwrap(), s.config_hash().unwrap());
        // hash changes with the seed
        assert_ne!(case1_scenario(8).config_hash().unwrap(), s.config_hash().unwrap());
    }

    fn write_idx_fixture(
        dir: &Path,
        labels: &[u8],
        rows: usize,
        cols: usize,
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let img_path = dir.join("images.idx");
        let lbl_path = dir.join("labels.idx");
        let mut f = std::fs::File::create(&img_path).unwrap();
        f.write_u32::<BigEndian>(0x0000_0803).unwrap();
        f.write_u32::<BigEndian>(labels.len() as u32).unwrap();
        f.write_u32::<BigEndian>(rows as u32).unwrap();
        f.write_u32::<BigEndian>(cols as u32).unwrap();
        for (i, _) in labels.iter().enumerate() {
            for p in 0..rows * cols {
                f.write_all(&[(i * 37 + p * 11) as u8]).unwrap();
            }
        }
        let mut f = std::fs::File::create(&lbl_path).unwrap();
        f.write_u32::<BigEndian>(0x0000_0801).unwrap();
        f.write_u32::<BigEndian>(labels.len() as u32).unwrap();
        f.write_all(labels).unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn idx_round_trip_and_filter() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_fixture(dir.path(), &[2, 8, 5, 2], 4, 3);
        let ds = load_idx(&img, &lbl, None).unwrap();
        assert_eq!(ds.images.rows(), 4);
        assert_eq!(ds.images.cols(), 12);
        assert_eq!(ds.labels, vec![2.0, 8.0, 5.0, 2.0]);
        assert!(ds.images.as_slice().iter().all(|&p| (0.0..=1.0).contains(&p)));

        let ds = load_idx(&img, &lbl, Some((2, 8))).unwrap();
        assert_eq!(ds.images.rows(), 3);
        assert_eq!(ds.labels, vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn idx_error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_fixture(dir.path(), &[1, 2], 2, 2);

        // corrupt the image magic
        let bad_img = dir.path().join("bad.idx");
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&bad_img, &bytes).unwrap();
        let err = load_idx(&bad_img, &lbl, None).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");

        // truncate the pixel payload
        let cut_img = dir.path().join("cut.idx");
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&cut_img, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_idx(&cut_img, &lbl, None).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        // label count mismatch
        let (_, lbl3) = {
            let d2 = dir.path().join("three");
            std::fs::create_dir(&d2).unwrap();
            write_idx_fixture(&d2, &[1, 2, 3], 2, 2)
        };
        let err = load_idx(&img, &lbl3, None).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{err}");
    }

    #[test]
    fn boundary_concentration_baseline() {
        let server = ParametricModel::linear(&[1.0, -1.0], 1.0).unwrap();
        let strategy = DefenseStrategy::Identity;
        // queries exactly on the boundary
        let on = Mat::new(2, 2, vec![0.0, 1.0, 1.0, 2.0]).unwrap();
        assert_eq!(boundary_concentration(&on, &server, &strategy, 0.01), 1.0);
        // uniform queries: fraction approximately the band mass
        let delta =
            crate::theory::calibrate_band_width(&server, 0.3, -10.0, 10.0, 200_000, 3).unwrap();
        let mut rng = rng_from_seed(4);
        let xs =
            init_queries(100_000, 2, QueryInit::Uniform { lo: -10.0, hi: 10.0 }, &mut rng).unwrap();
        let frac = boundary_concentration(&xs, &server, &strategy, delta);
        assert!((frac - 0.3).abs() <= 0.01, "frac {frac}");
    }

    #[test]
    fn run_scenario_writes_artifacts() {
        let mut s = case1_scenario(3);
        s.reps = 4;
        s.test_size = 5000;
        let dir = tempfile::tempdir().unwrap();
        let out = run_scenario(&s, dir.path()).unwrap();
        assert_eq!(out.points.len(), 1);
        assert!(out.errors.is_empty());
        for f in ["config.toml", "config.sha256", "ab.csv", "ab.json", "summary.json"] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        // byte-identical re-run under the same config and seed
        let dir2 = tempfile::tempdir().unwrap();
        run_scenario(&s, dir2.path()).unwrap();
        for f in ["config.toml", "ab.csv"] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(dir2.path().join(f)).unwrap(),
                "{f} differs between identical runs"
            );
        }
    }
}
