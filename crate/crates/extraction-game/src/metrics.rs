//! Losses, server/adversary utilities, and AB-curve assembly.

use crate::error::{Error, Result};
use crate::models::ParametricModel;
use crate::numeric::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Bounded comparison losses for utility computation.
///
/// Every loss value lies in [0, bound()]. Cross-entropy and scaled L2 are
/// unbounded in principle and are clipped at their bound so utilities stay
/// in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loss", rename_all = "kebab-case")]
pub enum LossKind {
    /// disagreement indicator on hard +-1 labels
    ZeroOne,
    /// binary cross-entropy between probabilities, clipped at 10
    CrossEntropy,
    /// |y - z|^2 / (|y|^2 + 1e-12), clipped at 4
    ScaledL2,
    /// indicator 1{(y - z)^2 >= r}
    ThresholdedProbDist { r: f64 },
}

impl LossKind {
    /// The upper bound K on loss values.
    pub fn bound(&self) -> f64 {
        match self {
            LossKind::ZeroOne | LossKind::ThresholdedProbDist { .. } => 1.0,
            LossKind::CrossEntropy => 10.0,
            LossKind::ScaledL2 => 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossKind::ThresholdedProbDist { r } = self {
            if !(*r > 0.0) {
                return Err(Error::Parameter(format!("threshold r={r} must be > 0")));
            }
        }
        Ok(())
    }

    /// Loss between a reference value y and a compared value z. ZeroOne
    /// expects hard +-1 labels; the others expect probabilities in [0,1].
    pub fn value(&self, y: f64, z: f64) -> f64 {
        match self {
            LossKind::ZeroOne => {
                if (y >= 0.0) == (z >= 0.0) {
                    0.0
                } else {
                    1.0
                }
            }
            LossKind::CrossEntropy => {
                let z = z.clamp(1e-12, 1.0 - 1e-12);
                (-y * z.ln() - (1.0 - y) * (1.0 - z).ln()).clamp(0.0, self.bound())
            }
            LossKind::ScaledL2 => {
                ((y - z) * (y - z) / (y * y + 1e-12)).clamp(0.0, self.bound())
            }
            LossKind::ThresholdedProbDist { r } => {
                if (y - z) * (y - z) >= *r {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Server utility for benign users: 1 - K^{-1} n^{-1} sum loss(y_i, y~_i),
/// comparing authentic responses with defended responses.
pub fn server_utility(y_true: &[f64], y_defended: &[f64], loss: LossKind) -> Result<f64> {
    loss.validate()?;
    if y_true.len() != y_defended.len() {
        return Err(Error::Dimension(format!(
            "{} authentic vs {} defended labels",
            y_true.len(),
            y_defended.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Dimension("empty label vectors".into()));
    }
    let mean: f64 = y_true
        .iter()
        .zip(y_defended)
        .map(|(&y, &z)| loss.value(y, z))
        .sum::<f64>()
        / y_true.len() as f64;
    Ok(1.0 - mean / loss.bound())
}

fn pred_value(model: &ParametricModel, x: &[f64], loss: LossKind) -> Result<f64> {
    let p = model.forward(x)?;
    Ok(match loss {
        LossKind::ZeroOne => p.hard,
        _ => p.soft,
    })
}

/// Adversary utility: 1 - K^{-1} R_n, the normalized out-of-sample risk of
/// the extracted model against the server's authentic responses on a test
/// batch drawn from the evaluation distribution.
pub fn adversary_utility(
    f_a: &ParametricModel,
    f_s: &ParametricModel,
    test: &Mat,
    loss: LossKind,
) -> Result<f64> {
    loss.validate()?;
    if test.rows() == 0 {
        return Err(Error::Dimension("empty test batch".into()));
    }
    let mut total = 0.0;
    for i in 0..test.rows() {
        let x = test.row(i);
        total += loss.value(pred_value(f_s, x, loss)?, pred_value(f_a, x, loss)?);
    }
    Ok(1.0 - total / (test.rows() as f64 * loss.bound()))
}

/// One point of the AB curve: server utility b and adversary utility a for
/// a fixed attack-defense pair, averaged over seeded replications.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ABPoint {
    pub pair_id: String,
    pub strategy_params: String,
    pub b_mean: f64,
    pub b_stderr: f64,
    pub a_mean: f64,
    pub a_stderr: f64,
    pub reps: usize,
    pub test_size: usize,
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

/// Averages seeded replications of one strategy pair into an ABPoint.
/// The closure maps a replication index to an (b, a) utility pair.
pub fn ab_point<F>(
    pair_id: &str,
    strategy_params: &str,
    reps: usize,
    test_size: usize,
    rep_fn: F,
) -> Result<ABPoint>
where
    F: Fn(usize) -> Result<(f64, f64)> + Sync,
{
    if reps == 0 {
        return Err(Error::Parameter("reps must be >= 1".into()));
    }
    let pairs: Result<Vec<(f64, f64)>> = (0..reps).into_par_iter().map(&rep_fn).collect();
    let pairs = pairs?;
    let bs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let as_: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (b_mean, b_stderr) = mean_stderr(&bs);
    let (a_mean, a_stderr) = mean_stderr(&as_);
    for v in [b_mean, a_mean] {
        if !(0.0..=1.0 + 1e-12).contains(&v) {
            return Err(Error::NonFinite(format!("utility {v} outside [0,1]")));
        }
    }
    Ok(ABPoint {
        pair_id: pair_id.to_string(),
        strategy_params: strategy_params.to_string(),
        b_mean,
        b_stderr,
        a_mean,
        a_stderr,
        reps,
        test_size,
    })
}

/// Builds the AB curve: one point per strategy pair.
pub fn ab_curve<F>(
    pairs: &[(String, String)],
    reps: usize,
    test_size: usize,
    rep_fn: F,
) -> Result<Vec<ABPoint>>
where
    F: Fn(usize, usize) -> Result<(f64, f64)> + Sync,
{
    pairs
        .iter()
        .enumerate()
        .map(|(idx, (id, params))| {
            ab_point(id, params, reps, test_size, |rep| rep_fn(idx, rep))
        })
        .collect()
}

/// Writes AB points as CSV via a temp file + rename so readers never see a
/// partial row.
pub fn write_ab_csv(points: &[ABPoint], path: &std::path::Path) -> Result<()> {
    let mut text =
        String::from("pair_id,strategy_params,b_mean,b_stderr,a_mean,a_stderr,reps,test_size\n");
    for p in points {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.pair_id, p.strategy_params, p.b_mean, p.b_stderr, p.a_mean, p.a_stderr, p.reps,
            p.test_size
        ));
    }
    atomic_write(path, text.as_bytes())
}

/// JSON mirror of the AB curve with an arbitrary config blob for provenance.
pub fn write_ab_json(
    points: &[ABPoint],
    config: &serde_json::Value,
    path: &std::path::Path,
) -> Result<()> {
    let doc = serde_json::json!({ "config": config, "points": points });
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Data(format!("ab json encode: {e}")))?;
    atomic_write(path, text.as_bytes())
}

/// Write-then-rename so a crash never leaves a truncated artifact.
pub fn atomic_write(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
