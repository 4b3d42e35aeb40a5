//! The adversary's lower-level problem: query generation and regularized
//! risk minimization against oracle responses.

use crate::defense::DefenseOracle;
use crate::error::{Error, Result};
use crate::models::{ModelKind, ParametricModel, TrainLoss};
use crate::numeric::{axpy, norm2, Mat, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Whether labels are hard signs or soft probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// y in {-1, +1}
    Hard,
    /// y in [0, 1]
    Soft,
}

/// Query points together with oracle labels.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub xs: Mat,
    pub y: Vec<f64>,
    pub mode: LabelMode,
}

impl LabeledBatch {
    pub fn new(xs: Mat, y: Vec<f64>, mode: LabelMode) -> Result<Self> {
        if xs.rows() == 0 {
            return Err(Error::Dimension("empty batch".into()));
        }
        if xs.rows() != y.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} labels",
                xs.rows(),
                y.len()
            )));
        }
        for &v in &y {
            let ok = match mode {
                LabelMode::Hard => v == 1.0 || v == -1.0,
                LabelMode::Soft => (0.0..=1.0).contains(&v),
            };
            if !ok {
                return Err(Error::Parameter(format!("label {v} invalid for {mode:?} mode")));
            }
        }
        Ok(Self { xs, y, mode })
    }

    pub fn len(&self) -> usize {
        self.xs.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Label vector in the form the given training loss expects:
    /// probabilities for cross-entropy, signed values for squared loss.
    pub fn targets_for(&self, loss: TrainLoss) -> Vec<f64> {
        match (loss, self.mode) {
            (TrainLoss::CrossEntropy, LabelMode::Hard) => {
                self.y.iter().map(|&v| (v + 1.0) / 2.0).collect()
            }
            (TrainLoss::CrossEntropy, LabelMode::Soft) => self.y.clone(),
            (TrainLoss::Squared, LabelMode::Hard) => self.y.clone(),
            (TrainLoss::Squared, LabelMode::Soft) => {
                self.y.iter().map(|&v| 2.0 * v - 1.0).collect()
            }
            (TrainLoss::ZeroOne, _) => self.y.clone(),
        }
    }
}

/// Query initialization scheme.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum QueryInit {
    Gaussian,
    Uniform { lo: f64, hi: f64 },
}

/// Draws a seeded, reproducible n x d query matrix.
pub fn init_queries(n: usize, d: usize, scheme: QueryInit, rng: &mut Rng) -> Result<Mat> {
    if n == 0 || d == 0 {
        return Err(Error::Dimension(format!("degenerate query shape {n}x{d}")));
    }
    let data: Vec<f64> = match scheme {
        QueryInit::Gaussian => (0..n * d).map(|_| StandardNormal.sample(rng)).collect(),
        QueryInit::Uniform { lo, hi } => {
            if !(lo < hi) {
                return Err(Error::Parameter(format!("uniform bounds [{lo}, {hi}] invalid")));
            }
            (0..n * d).map(|_| rng.gen_range(lo..hi)).collect()
        }
    };
    Mat::new(n, d, data)
}

/// The adversary's regularized risk-minimization problem
/// h(x, beta) = sum_i loss(f_A(x_i; beta), y_i) + mu ||beta||^2.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LowerLevelProblem {
    pub kind: ModelKind,
    pub loss: TrainLoss,
    /// ridge coefficient; must be > 0 for strong convexity
    pub mu: f64,
    /// stop when ||grad h|| <= tol
    pub tol: f64,
    pub max_iters: usize,
    /// initial backtracking stepsize
    pub step0: f64,
}

impl LowerLevelProblem {
    pub fn new(kind: ModelKind, loss: TrainLoss, mu: f64) -> Result<Self> {
        if mu <= 0.0 {
            return Err(Error::Parameter(format!("ridge coefficient {mu} must be > 0")));
        }
        Ok(Self { kind, loss, mu, tol: 1e-6, max_iters: 5000, step0: 1.0 })
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }
}

/// Per-iteration record of the inner solve.
#[derive(Clone, Debug, Default)]
pub struct FitTrace {
    pub grad_norms: Vec<f64>,
    pub objectives: Vec<f64>,
    pub converged: bool,
}

/// Full-batch gradient descent with Armijo backtracking, terminated when
/// the gradient norm drops below the problem tolerance.
pub fn fit_lower(
    problem: &LowerLevelProblem,
    batch: &LabeledBatch,
    beta0: &[f64],
) -> Result<(ParametricModel, FitTrace)> {
    let d = batch.xs.cols();
    let mut model = ParametricModel::new(problem.kind, d, beta0.to_vec())?;
    let targets = batch.targets_for(problem.loss);
    let mut trace = FitTrace::default();
    let mut step = problem.step0;

    let (mut obj, mut grad) =
        model.batch_loss_grad(&batch.xs, problem.loss, &targets, problem.mu)?;
    for k in 0..problem.max_iters {
        let gn = norm2(&grad);
        trace.grad_norms.push(gn);
        trace.objectives.push(obj);
        if gn <= problem.tol {
            trace.converged = true;
            break;
        }
        // backtracking guarantees objective descent, so only flag divergence
        // when the gradient blew up AND the objective stopped improving
        if k >= 100 && gn > 10.0 * trace.grad_norms[k - 100] && obj >= trace.objectives[k - 100] {
            return Err(Error::Divergence(format!(
                "gradient norm grew from {} to {gn} over 100 iterations",
                trace.grad_norms[k - 100]
            )));
        }
        // Armijo backtracking along -grad
        step = (step * 2.0).min(problem.step0);
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand = model.params.clone();
            axpy(-step, &grad, &mut cand);
            let cand_model = model.with_params(cand)?;
            let (cand_obj, cand_grad) =
                cand_model.batch_loss_grad(&batch.xs, problem.loss, &targets, problem.mu)?;
            if cand_obj <= obj - 1e-4 * step * gn * gn {
                model = cand_model;
                obj = cand_obj;
                grad = cand_grad;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // stepsize underflow: gradient is at floating-point noise level
            trace.converged = gn <= problem.tol * 10.0;
            break;
        }
    }
    Ok((model, trace))
}

/// Convenience pipeline: query the oracle, then fit the adversary model
/// from a random initialization.
pub fn extract(
    oracle: &mut DefenseOracle,
    queries: &Mat,
    problem: &LowerLevelProblem,
    rng: &mut Rng,
) -> Result<(ParametricModel, FitTrace)> {
    let batch = oracle.respond(queries)?;
    let beta0 = ParametricModel::random_init(problem.kind, queries.cols(), rng);
    fit_lower(problem, &batch, &beta0.params)
}
