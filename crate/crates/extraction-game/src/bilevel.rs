//! Stochastic gradient descent-ascent solver for the min-max bi-level
//! program: queries x descend, simplex weights lambda ascend, and the
//! per-strategy adversary parameters are solved to tolerance in the fastest
//! timescale. Hypergradients in x come from implicit differentiation with a
//! truncated Neumann series for the inverse Hessian.

use crate::attack::{fit_lower, LowerLevelProblem};
use crate::defense::{DefenseOracle, DefenseStrategy, ResponseMode};
use crate::error::{Error, Result};
use crate::metrics::atomic_write;
use crate::models::{sigmoid, ParametricModel, TrainLoss};
use crate::numeric::{
    child_seed, dot, neumann_inverse_apply, project_box, project_simplex, rng_from_seed, Mat,
    SimplexWeights,
};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Fixed evaluation points with hard +-1 labels.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub xs: Mat,
    pub ys: Vec<f64>,
}

impl TestSet {
    pub fn new(xs: Mat, ys: Vec<f64>) -> Result<Self> {
        if xs.rows() != ys.len() || xs.rows() == 0 {
            return Err(Error::Dimension(format!(
                "{} test points vs {} labels",
                xs.rows(),
                ys.len()
            )));
        }
        if ys.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::Parameter("test labels must be +-1".into()));
        }
        Ok(Self { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.xs.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// The optimizer's iterate.
#[derive(Clone, Debug)]
pub struct GameState {
    pub x: Mat,
    pub betas: Vec<Vec<f64>>,
    pub lambda: SimplexWeights,
    pub k: usize,
}

/// Configuration for one solver run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BilevelConfig {
    pub strategies: Vec<DefenseStrategy>,
    pub inner: LowerLevelProblem,
    pub n_queries: usize,
    /// query box constraint, applied elementwise
    pub box_lo: f64,
    pub box_hi: f64,
    /// x stepsize r_k = r0 / sqrt(k+1); keep r0 well below s0 so x moves in
    /// the slowest timescale
    pub r0: f64,
    /// lambda stepsize s_k = s0 / sqrt(k+1)
    pub s0: f64,
    pub diminishing: bool,
    pub neumann_steps: usize,
    /// None picks 1/trace of the inner Hessian
    pub neumann_scale: Option<f64>,
    /// test minibatch size for the hypergradient estimate
    pub minibatch: usize,
    /// fixed test subset size for per-iteration H_j evaluation
    pub eval_size: usize,
    pub outer_iters: usize,
    /// inner gradient steps per outer update before falling back to a full
    /// solve to tolerance
    pub inner_iters_per_outer: usize,
    pub stop_window: usize,
    /// early-stop threshold on the windowed relative decrease of the upper
    /// objective; values <= 0 disable early stopping
    pub stop_rel_tol: f64,
    pub seed: u64,
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("no defense strategies".into()));
        }
        for s in &self.strategies {
            s.validate()?;
        }
        if self.n_queries == 0 {
            return Err(Error::Config("n_queries must be >= 1".into()));
        }
        if !(self.box_lo < self.box_hi) {
            return Err(Error::Config("invalid query box".into()));
        }
        if !(self.r0 > 0.0 && self.s0 > 0.0) {
            return Err(Error::Config("stepsizes must be positive".into()));
        }
        if self.minibatch == 0 || self.eval_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.stop_window == 0 {
            return Err(Error::Config("stop window must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of the per-iteration trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub h_upper: f64,
    /// lower-level objectives h_j at the inner solutions
    pub h_lower: Vec<f64>,
    /// projected-gradient residual ||x - Proj(x - r grad)|| / r
    pub grad_proxy: f64,
    pub lambda: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    /// CSV columns: k, H, h_1..h_m, grad_proxy, lambda_1..lambda_m.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let m = self.rows.first().map_or(0, |r| r.h_lower.len());
        let mut text = String::from("k,H");
        for j in 1..=m {
            text.push_str(&format!(",h_{j}"));
        }
        text.push_str(",grad_proxy");
        for j in 1..=m {
            text.push_str(&format!(",lambda_{j}"));
        }
        text.push('\n');
        for r in &self.rows {
            text.push_str(&format!("{},{}", r.k, r.h_upper));
            for h in &r.h_lower {
                text.push_str(&format!(",{h}"));
            }
            text.push_str(&format!(",{}", r.grad_proxy));
            for l in &r.lambda {
                text.push_str(&format!(",{l}"));
            }
            text.push('\n');
        }
        atomic_write(path, text.as_bytes())
    }
}

/// Result of a solver run.
#[derive(Clone, Debug)]
pub struct BilevelOutcome {
    /// uniform draw from the query iterates (Algorithm output)
    pub x_bar: Mat,
    /// last iterate, also useful in practice
    pub x_last: Mat,
    pub lambda: SimplexWeights,
    pub betas: Vec<Vec<f64>>,
    pub trace: Trace,
}

impl BilevelOutcome {
    /// Index of the strategy with the largest final weight.
    pub fn winner(&self) -> usize {
        self.lambda
            .as_slice()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

/// Weighted upper objective H = (1/m) sum_j H_j lambda_j where H_j is the
/// mean test loss of adversary j; returns (H, [H_1..H_m]).
///
/// The 1/m factor is applied verbatim even though the lambda weights
/// already sum to one, matching the discretized objective as stated.
pub fn upper_objective(
    adversaries: &[ParametricModel],
    lambda: &SimplexWeights,
    test_xs: &Mat,
    test_ys: &[f64],
    loss: TrainLoss,
) -> Result<(f64, Vec<f64>)> {
    if test_xs.rows() == 0 || test_xs.rows() != test_ys.len() {
        return Err(Error::Dimension("empty or mismatched test set".into()));
    }
    if adversaries.len() != lambda.len() {
        return Err(Error::Dimension("adversary count != lambda length".into()));
    }
    let m = adversaries.len();
    let mut h_js = Vec::with_capacity(m);
    for model in adversaries {
        let mut total = 0.0;
        for t in 0..test_xs.rows() {
            let u = model.raw(test_xs.row(t));
            let q = (test_ys[t] + 1.0) / 2.0;
            total += loss.value(u, q);
        }
        h_js.push(total / test_xs.rows() as f64);
    }
    let h = h_js
        .iter()
        .zip(lambda.as_slice())
        .map(|(hj, l)| hj * l)
        .sum::<f64>()
        / m as f64;
    Ok((h, h_js))
}

/// One projected-ascent step on the simplex weights; the gradient of H in
/// lambda_j is H_j / m.
pub fn ascent_lambda(
    lambda: &SimplexWeights,
    h_js: &[f64],
    s_k: f64,
) -> Result<SimplexWeights> {
    if h_js.len() != lambda.len() {
        return Err(Error::Dimension("H_j count != lambda length".into()));
    }
    let m = h_js.len() as f64;
    let v: Vec<f64> = lambda
        .as_slice()
        .iter()
        .zip(h_js)
        .map(|(l, h)| l + s_k * h / m)
        .collect();
    project_simplex(&v)
}

/// Implicit-function-theorem hypergradient of the upper objective in the
/// query matrix for one strategy:
/// -grad^2_{x beta} h_j . [grad^2_{beta beta} h_j]^{-1} . grad_beta H_j.
///
/// `target_grad_x` carries d(target_i)/dx_i for defenses whose responses
/// vary smoothly with the query point; pass None for sampled (piecewise
/// constant) responses.
#[allow(clippy::too_many_arguments)]
pub fn hypergrad_x(
    adversary: &ParametricModel,
    queries: &Mat,
    targets: &[f64],
    target_grad_x: Option<&[Vec<f64>]>,
    inner_loss: TrainLoss,
    mu: f64,
    grad_beta_upper: &[f64],
    neumann_steps: usize,
    neumann_scale: Option<f64>,
) -> Result<Mat> {
    let p = adversary.params.len();
    if grad_beta_upper.len() != p {
        return Err(Error::Dimension("grad_beta_upper length".into()));
    }
    let scale = match neumann_scale {
        Some(s) => s,
        None => {
            // exact trace of the inner Hessian via unit-vector probes
            let mut tr = 0.0;
            for k in 0..p {
                let mut e = vec![0.0; p];
                e[k] = 1.0;
                tr += adversary.hvp_beta(queries, inner_loss, targets, mu, &e)?[k];
            }
            if !(tr > 0.0) {
                return Err(Error::Divergence(format!(
                    "inner Hessian trace {tr} not positive; retry with a smaller scale"
                )));
            }
            1.0 / tr
        }
    };
    let hvp = |v: &[f64]| {
        adversary
            .hvp_beta(queries, inner_loss, targets, mu, v)
            .expect("shapes checked above")
    };
    let u = neumann_inverse_apply(hvp, grad_beta_upper, neumann_steps, scale)?;
    // standard mixed-derivative term with targets held fixed
    let mut flat = adversary.cross_hvp_xbeta(queries, inner_loss, targets, &u)?;
    // target-dependence term: d/dq of the per-point inner gradient is
    // d2l/du dq * grad_beta(raw), chained through dq_i/dx_i
    if let Some(tg) = target_grad_x {
        if tg.len() != queries.rows() {
            return Err(Error::Dimension("target_grad_x rows".into()));
        }
        let c = inner_loss.d2l_du_dtarget()?;
        let d = queries.cols();
        for i in 0..queries.rows() {
            let coef = c * dot(&adversary.raw_grad_params(queries.row(i)), &u);
            for (col, g) in tg[i].iter().enumerate() {
                flat[i * d + col] += coef * g;
            }
        }
    }
    for v in &mut flat {
        *v = -*v;
    }
    Mat::new(queries.rows(), queries.cols(), flat)
}

/// Windowed mean of the projected-gradient residual at the end of a trace;
/// a practical surrogate for the smoothed-objective stationarity measure.
pub fn stationarity_proxy(trace: &Trace, window: usize) -> Result<f64> {
    if window == 0 || window > trace.rows.len() {
        return Err(Error::Parameter(format!(
            "window {window} invalid for trace of length {}",
            trace.rows.len()
        )));
    }
    let tail = &trace.rows[trace.rows.len() - window..];
    Ok(tail.iter().map(|r| r.grad_proxy).sum::<f64>() / window as f64)
}

/// Soft defended targets at the current queries plus their x-gradients for
/// smooth strategies; sampled soft responses for flip strategies.
fn defended_targets(
    server: &ParametricModel,
    strategy: &DefenseStrategy,
    x: &Mat,
    seed: u64,
) -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>)> {
    if strategy.is_deterministic() {
        let mut q = Vec::with_capacity(x.rows());
        let mut grads = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let raw = strategy.defended_raw(server, x.row(i)).expect("deterministic");
            let s = sigmoid(raw);
            q.push(s);
            let mut g = strategy.defended_raw_grad_x(server, x.row(i)).expect("deterministic");
            for v in &mut g {
                *v *= s * (1.0 - s);
            }
            grads.push(g);
        }
        Ok((q, Some(grads)))
    } else {
        let mut oracle =
            DefenseOracle::new(server.clone(), strategy.clone(), ResponseMode::Soft, seed)?;
        let batch = oracle.respond(x)?;
        Ok((batch.y, None))
    }
}

/// Runs the three-timescale descent-ascent loop on a server model and test
/// set; returns the drawn query matrix, final weights, and full trace.
pub fn run(config: &BilevelConfig, server: &ParametricModel, test: &TestSet) -> Result<BilevelOutcome> {
    config.validate()?;
    let m = config.strategies.len();
    let d = server.dim;
    let n = config.n_queries;
    let upper_loss = TrainLoss::CrossEntropy;

    let mut init_rng = rng_from_seed(child_seed(config.seed, 0, 0));
    let x0: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut init_rng)).collect();
    let mut x = project_box(&Mat::new(n, d, x0)?, config.box_lo, config.box_hi)?;
    let mut betas: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            ParametricModel::random_init(config.inner.kind, d, &mut init_rng).params
        })
        .collect();
    let mut lambda = SimplexWeights::uniform(m)?;

    // fixed evaluation subset for per-iteration H_j
    let mut eval_rng = rng_from_seed(child_seed(config.seed, 1, 0));
    let eval_idx: Vec<usize> = (0..config.eval_size.min(test.len()))
        .map(|_| eval_rng.gen_range(0..test.len()))
        .collect();
    let eval_xs = gather_rows(&test.xs, &eval_idx)?;
    let eval_ys: Vec<f64> = eval_idx.iter().map(|&i| test.ys[i]).collect();

    let mut trace = Trace::default();
    let mut x_history: Vec<Mat> = vec![x.clone()];

    for k in 0..config.outer_iters {
        let (r_k, s_k) = if config.diminishing {
            let f = 1.0 / ((k + 1) as f64).sqrt();
            (config.r0 * f, config.s0 * f)
        } else {
            (config.r0, config.s0)
        };

        // per-strategy: inner solve to tolerance, then the hypergradient
        struct PerStrategy {
            beta: Vec<f64>,
            h_lower: f64,
            hypergrad: Mat,
        }
        let x_ref = &x;
        let betas_ref = &betas;
        let results: Result<Vec<PerStrategy>> = (0..m)
            .into_par_iter()
            .map(|j| {
                let strategy = &config.strategies[j];
                let (q, q_grads) = defended_targets(
                    server,
                    strategy,
                    x_ref,
                    child_seed(config.seed, 2 + j as u64, k as u64),
                )?;
                let batch = crate::attack::LabeledBatch {
                    xs: x_ref.clone(),
                    y: q.clone(),
                    mode: crate::attack::LabelMode::Soft,
                };
                // warm-started inner steps; fall back to a full solve so the
                // inner stop criterion holds before the gradient evaluation
                let mut prob = config.inner.clone();
                prob.max_iters = config.inner_iters_per_outer;
                let (mut model, mut tr) = fit_lower(&prob, &batch, &betas_ref[j])?;
                if !tr.converged {
                    prob.max_iters = 500;
                    let refit = fit_lower(&prob, &batch, &model.params)?;
                    model = refit.0;
                    tr = refit.1;
                }
                let h_lower = *tr.objectives.last().unwrap();

                // minibatch estimate of grad_beta H_j
                let mut mb_rng =
                    rng_from_seed(child_seed(config.seed, 100 + j as u64, k as u64));
                let b = config.minibatch.min(test.len());
                let idx: Vec<usize> = (0..b).map(|_| mb_rng.gen_range(0..test.len())).collect();
                let mb_xs = gather_rows(&test.xs, &idx)?;
                let mb_q: Vec<f64> = idx.iter().map(|&i| (test.ys[i] + 1.0) / 2.0).collect();
                let (_, mut gb) = model.batch_loss_grad(&mb_xs, upper_loss, &mb_q, 0.0)?;
                for g in &mut gb {
                    *g /= b as f64;
                }
                let hypergrad = hypergrad_x(
                    &model,
                    x_ref,
                    &q,
                    q_grads.as_deref(),
                    config.inner.loss,
                    config.inner.mu,
                    &gb,
                    config.neumann_steps,
                    config.neumann_scale,
                )?;
                Ok(PerStrategy { beta: model.params, h_lower, hypergrad })
            })
            .collect();
        let results = results?;

        // deterministic reduction by strategy index
        let mut grad_x = vec![0.0; n * d];
        let mut h_lower = Vec::with_capacity(m);
        for (j, r) in results.iter().enumerate() {
            let w = lambda.as_slice()[j] / m as f64;
            for (g, v) in grad_x.iter_mut().zip(r.hypergrad.as_slice()) {
                *g += w * v;
            }
            h_lower.push(r.h_lower);
        }
        for (j, r) in results.into_iter().enumerate() {
            betas[j] = r.beta;
        }

        let adversaries: Vec<ParametricModel> = betas
            .iter()
            .map(|b| ParametricModel::new(config.inner.kind, d, b.clone()))
            .collect::<Result<_>>()?;
        let (h_upper, h_js) = upper_objective(&adversaries, &lambda, &eval_xs, &eval_ys, upper_loss)?;
        if !h_upper.is_finite() {
            return Err(Error::NonFinite(format!("upper objective at iteration {k}")));
        }

        // x descent (slow timescale)
        let mut x_step = x.as_slice().to_vec();
        for (xv, g) in x_step.iter_mut().zip(&grad_x) {
            *xv -= r_k * g;
        }
        let x_new = project_box(&Mat::new(n, d, x_step)?, config.box_lo, config.box_hi)?;
        let residual: f64 = x
            .as_slice()
            .iter()
            .zip(x_new.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let grad_proxy = residual / r_k;

        // lambda ascent (medium timescale)
        lambda = ascent_lambda(&lambda, &h_js, s_k)?;
        assert!(lambda.check(), "lambda left the simplex at iteration {k}");
        // re-weight the per-strategy losses with the updated lambda so the
        // trace reflects the state this iteration produced
        let h_upper = h_js
            .iter()
            .zip(lambda.as_slice())
            .map(|(h, l)| h * l)
            .sum::<f64>()
            / m as f64;
        x = x_new;
        assert!(
            x.as_slice().iter().all(|&v| (config.box_lo..=config.box_hi).contains(&v)),
            "x left the box at iteration {k}"
        );
        x_history.push(x.clone());

        trace.rows.push(TraceRow {
            k,
            h_upper,
            h_lower,
            grad_proxy,
            lambda: lambda.as_slice().to_vec(),
        });

        // stop once the windowed relative decrease of H flattens out
        let w = config.stop_window;
        if config.stop_rel_tol > 0.0 && trace.rows.len() > w {
            let prev = trace.rows[trace.rows.len() - 1 - w].h_upper;
            let cur = h_upper;
            if (prev - cur) / prev.abs().max(1e-12) < config.stop_rel_tol {
                break;
            }
        }
    }

    let mut draw_rng = rng_from_seed(child_seed(config.seed, 3, 0));
    let pick = draw_rng.gen_range(0..x_history.len());
    Ok(BilevelOutcome {
        x_bar: x_history[pick].clone(),
        x_last: x.clone(),
        lambda,
        betas,
        trace,
    })
}

fn gather_rows(src: &Mat, idx: &[usize]) -> Result<Mat> {
    let d = src.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(src.row(i));
    }
    Mat::new(idx.len(), d, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{init_queries, QueryInit};
    use crate::models::{ridge_closed_form, ModelKind};
    use crate::numeric::norm2;

    #[test]
    fn upper_objective_hand_example() {
        // two linear adversaries on a 3-point test set, uniform lambda
        let a1 = ParametricModel::linear(&[1.0, 0.0], 0.0).unwrap();
        let a2 = ParametricModel::linear(&[0.0, 1.0], 0.5).unwrap();
        let xs = Mat::new(3, 2, vec![1.0, 0.0, -1.0, 2.0, 0.5, -0.5]).unwrap();
        let ys = vec![1.0, -1.0, 1.0];
        let ce = |u: f64, q: f64| -> f64 {
            let p: f64 = 1.0 / (1.0 + (-u as f64).exp());
            -q * p.ln() - (1.0 - q) * (1.0 - p).ln()
        };
        let mut h1 = 0.0;
        let mut h2 = 0.0;
        for t in 0..3 {
            let q = (ys[t] + 1.0) / 2.0;
            h1 += ce(a1.raw(xs.row(t)), q);
            h2 += ce(a2.raw(xs.row(t)), q);
        }
        h1 /= 3.0;
        h2 /= 3.0;
        let lambda = SimplexWeights::uniform(2).unwrap();
        let (h, h_js) = upper_objective(
            &[a1.clone(), a2],
            &lambda,
            &xs,
            &ys,
            TrainLoss::CrossEntropy,
        )
        .unwrap();
        assert!((h_js[0] - h1).abs() < 1e-12);
        assert!((h_js[1] - h2).abs() < 1e-12);
        assert!((h - (h1 + h2) / 4.0).abs() < 1e-12, "uniform lambda gives (H1+H2)/4");

        // one-hot lambda gives H_j / m
        let one_hot = project_simplex(&[10.0, 0.0]).unwrap();
        let (h, _) =
            upper_objective(&[a1.clone(), a1], &one_hot, &xs, &ys, TrainLoss::CrossEntropy)
                .unwrap();
        assert!((h - h1 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ascent_lambda_fixed_points() {
        let lambda = SimplexWeights::uniform(3).unwrap();
        // equal H_j: gradient is uniform, projection returns the same point
        let next = ascent_lambda(&lambda, &[0.7, 0.7, 0.7], 1.0).unwrap();
        for (a, b) in next.as_slice().iter().zip(lambda.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        // zero stepsize: unchanged
        let next = ascent_lambda(&lambda, &[0.9, 0.1, 0.4], 0.0).unwrap();
        for (a, b) in next.as_slice().iter().zip(lambda.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ascent_lambda_converges_to_dominant_one_hot() {
        let mut lambda = SimplexWeights::uniform(4).unwrap();
        let h_js = [2.0, 0.3, 0.3, 0.3];
        for _ in 0..500 {
            lambda = ascent_lambda(&lambda, &h_js, 1.0).unwrap();
        }
        assert!((lambda.as_slice()[0] - 1.0).abs() < 1e-9, "{:?}", lambda.as_slice());
    }

    /// Finite differences through the ridge closed-form solution map:
    /// phi(x) = H(beta*(x)) where beta* solves the squared-loss lower level
    /// with targets equal to the server's raw score at the queries.
    #[test]
    fn hypergrad_matches_fd_through_closed_form() {
        let server = ParametricModel::linear(&[1.0, -1.0], 1.0).unwrap();
        let mu = 0.3;
        let mut rng = rng_from_seed(5);
        let queries = init_queries(3, 2, QueryInit::Uniform { lo: -2.0, hi: 2.0 }, &mut rng).unwrap();
        let test = init_queries(20, 2, QueryInit::Uniform { lo: -3.0, hi: 3.0 }, &mut rng).unwrap();
        let test_y: Vec<f64> = (0..20).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();

        let upper = |beta: &[f64]| -> f64 {
            let model = ParametricModel::new(ModelKind::Linear, 2, beta.to_vec()).unwrap();
            (0..test.rows())
                .map(|t| {
                    let u = model.raw(test.row(t));
                    (u - test_y[t]) * (u - test_y[t])
                })
                .sum::<f64>()
                / test.rows() as f64
        };
        let phi = |x: &Mat| -> f64 {
            let targets: Vec<f64> = (0..x.rows()).map(|i| server.raw(x.row(i))).collect();
            upper(&ridge_closed_form(x, &targets, mu).unwrap())
        };

        // analytic hypergradient at the closed-form solution
        let targets: Vec<f64> = (0..queries.rows()).map(|i| server.raw(queries.row(i))).collect();
        let beta_star = ridge_closed_form(&queries, &targets, mu).unwrap();
        let model = ParametricModel::new(ModelKind::Linear, 2, beta_star).unwrap();
        let q_grads: Vec<Vec<f64>> =
            (0..queries.rows()).map(|i| server.raw_grad_input(queries.row(i))).collect();
        let test_q: Vec<f64> = test_y.clone();
        let (_, mut gb) = model
            .batch_loss_grad(&test, TrainLoss::Squared, &test_q, 0.0)
            .unwrap();
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
        let mut max_rel: f64 = 0.0;
        for e in 0..queries.rows() * queries.cols() {
            let mut hi = queries.clone();
            let mut lo = queries.clone();
            hi.as_mut_slice()[e] += h;
            lo.as_mut_slice()[e] -= h;
            let fd = (phi(&hi) - phi(&lo)) / (2.0 * h);
            let an = hg.as_slice()[e];
            let rel = (fd - an).abs() / fd.abs().max(1e-8);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel <= 1e-3, "max rel err {max_rel}");
    }

    #[test]
    fn hypergrad_zero_when_upper_grad_zero() {
        let model = ParametricModel::linear(&[0.5, 0.5], 0.0).unwrap();
        let queries = Mat::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let targets = vec![0.6, 0.4];
        let hg = hypergrad_x(
            &model,
            &queries,
            &targets,
            None,
            TrainLoss::CrossEntropy,
            0.1,
            &[0.0, 0.0, 0.0],
            50,
            None,
        )
        .unwrap();
        assert!(hg.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hypergrad_shrinks_with_stronger_ridge() {
        let server = ParametricModel::linear(&[1.0, -1.0], 1.0).unwrap();
        let mut rng = rng_from_seed(6);
        let queries = init_queries(5, 2, QueryInit::Uniform { lo: -2.0, hi: 2.0 }, &mut rng).unwrap();
        let targets: Vec<f64> = (0..5).map(|i| server.raw(queries.row(i))).collect();
        let grad_beta = vec![0.3, -0.2, 0.1];
        let norm_at = |mu: f64| {
            let beta = ridge_closed_form(&queries, &targets, mu).unwrap();
            let model = ParametricModel::new(ModelKind::Linear, 2, beta).unwrap();
            let hg = hypergrad_x(
                &model,
                &queries,
                &targets,
                None,
                TrainLoss::Squared,
                mu,
                &grad_beta,
                2000,
                None,
            )
            .unwrap();
            norm2(hg.as_slice())
        };
        assert!(norm_at(10.0) < norm_at(0.1));
    }

    fn small_config(m_strategies: Vec<DefenseStrategy>, outer: usize, seed: u64) -> BilevelConfig {
        BilevelConfig {
            strategies: m_strategies,
            inner: LowerLevelProblem::new(
                ModelKind::LogisticLinear,
                TrainLoss::CrossEntropy,
                1e-2,
            )
            .unwrap()
            .with_tol(1e-5),
            n_queries: 30,
            box_lo: -10.0,
            box_hi: 10.0,
            r0: 0.05,
            s0: 0.5,
            diminishing: true,
            neumann_steps: 30,
            neumann_scale: None,
            minibatch: 128,
            eval_size: 500,
            outer_iters: outer,
            inner_iters_per_outer: 5,
            stop_window: 10,
            stop_rel_tol: 1e-3,
            seed,
        }
    }

    fn small_test_set(seed: u64) -> (ParametricModel, TestSet) {
        let server = ParametricModel::linear(&[1.0, -1.0], 1.0).unwrap();
        let mut rng = rng_from_seed(seed);
        let xs =
            init_queries(2000, 2, QueryInit::Uniform { lo: -10.0, hi: 10.0 }, &mut rng).unwrap();
        let ys: Vec<f64> = (0..xs.rows())
            .map(|i| server.forward(xs.row(i)).unwrap().hard)
            .collect();
        (server, TestSet::new(xs, ys).unwrap())
    }

    #[test]
    fn zero_outer_iterations_returns_initialization() {
        let (server, test) = small_test_set(7);
        let config = small_config(vec![DefenseStrategy::Identity], 0, 11);
        let out = run(&config, &server, &test).unwrap();
        assert!(out.trace.rows.is_empty());
        assert_eq!(out.x_bar.as_slice(), out.x_last.as_slice());
        assert_eq!(out.lambda.as_slice(), &[1.0]);
    }

    #[test]
    fn replay_is_bit_exact() {
        let (server, test) = small_test_set(8);
        let config = small_config(
            vec![
                DefenseStrategy::Identity,
                DefenseStrategy::SinePerturb { amp: 5.0, freq: 1.0 },
            ],
            5,
            12,
        );
        let a = run(&config, &server, &test).unwrap();
        let b = run(&config, &server, &test).unwrap();
        assert_eq!(a.x_bar.as_slice(), b.x_bar.as_slice());
        assert_eq!(a.lambda.as_slice(), b.lambda.as_slice());
        for (ra, rb) in a.trace.rows.iter().zip(&b.trace.rows) {
            assert_eq!(ra.h_upper, rb.h_upper);
            assert_eq!(ra.lambda, rb.lambda);
        }
    }

    #[test]
    fn realizable_single_strategy_reaches_server_loss() {
        let (server, test) = small_test_set(9);
        let mut config = small_config(vec![DefenseStrategy::Identity], 40, 13);
        config.n_queries = 300;
        let out = run(&config, &server, &test).unwrap();
        // cross-entropy of the true model on its own hard labels
        let server_ce: f64 = (0..test.len())
            .map(|t| {
                TrainLoss::CrossEntropy
                    .value(server.raw(test.xs.row(t)), (test.ys[t] + 1.0) / 2.0)
            })
            .sum::<f64>()
            / test.len() as f64;
        let adversary =
            ParametricModel::new(config.inner.kind, 2, out.betas[0].clone()).unwrap();
        let lambda = SimplexWeights::uniform(1).unwrap();
        let (h, _) =
            upper_objective(&[adversary], &lambda, &test.xs, &test.ys, TrainLoss::CrossEntropy)
                .unwrap();
        assert!(h <= server_ce + 0.01, "H={h} server CE={server_ce}");
    }

    #[test]
    fn trace_csv_and_stationarity() {
        let (server, test) = small_test_set(10);
        let config = small_config(
            vec![DefenseStrategy::Identity, DefenseStrategy::SinePerturb { amp: 2.0, freq: 3.0 }],
            12,
            14,
        );
        let out = run(&config, &server, &test).unwrap();
        assert!(!out.trace.rows.is_empty());
        for row in &out.trace.rows {
            let s: f64 = row.lambda.iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
            assert!(row.lambda.iter().all(|&l| l >= 0.0));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        out.trace.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("k,H,h_1,h_2,grad_proxy,lambda_1,lambda_2\n"));
        assert_eq!(text.lines().count(), out.trace.rows.len() + 1);

        let proxy = stationarity_proxy(&out.trace, 3).unwrap();
        assert!(proxy >= 0.0);
        assert!(stationarity_proxy(&out.trace, out.trace.rows.len() + 1).is_err());
        assert!(stationarity_proxy(&out.trace, 0).is_err());
    }
}
