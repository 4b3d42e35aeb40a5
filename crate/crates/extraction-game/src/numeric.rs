//! Dense vector/matrix kernels, seeded randomness, and the projection
//! operators used by the outer optimizer.

use crate::error::{Error, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix. Construction rejects non-finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix storage {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Simplex weights: nonnegative, summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    /// Uniform weights 1/m.
    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Dimension("empty simplex".into()));
        }
        Ok(Self(vec![1.0 / m as f64; m]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks the simplex invariants at tolerance 1e-12.
    pub fn check(&self) -> bool {
        self.0.iter().all(|&v| v >= 0.0) && (self.0.iter().sum::<f64>() - 1.0).abs() <= 1e-12
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// y += alpha * x
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Euclidean projection onto the probability simplex.
///
/// Sort-and-threshold construction; O(m log m), which is plenty for the
/// strategy-set sizes this library deals with (m <= 48).
pub fn project_simplex(v: &[f64]) -> Result<SimplexWeights> {
    if v.is_empty() {
        return Err(Error::Dimension("project_simplex on empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("project_simplex input".into()));
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cssv = 0.0;
    let mut rho = 0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cssv += ui;
        let t = (cssv - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            rho = i + 1;
            theta = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // renormalize away the last-digit drift so the invariant holds exactly
    let s: f64 = w.iter().sum();
    for x in &mut w {
        *x /= s;
    }
    debug_assert!(rho >= 1);
    Ok(SimplexWeights(w))
}

/// Elementwise clamp of a matrix onto the box [lo, hi]^{n x d}.
pub fn project_box(x: &Mat, lo: f64, hi: f64) -> Result<Mat> {
    if lo >= hi {
        return Err(Error::Parameter(format!("box bounds lo={lo} >= hi={hi}")));
    }
    let data = x.as_slice().iter().map(|&v| v.clamp(lo, hi)).collect();
    Mat::new(x.rows(), x.cols(), data)
}

/// Approximates H^{-1} v with the truncated Neumann series
/// alpha * sum_{i=0}^{e-1} (I - alpha H)^i v, using only H-vector products.
pub fn neumann_inverse_apply<F>(hvp: F, v: &[f64], steps: usize, scale: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if steps == 0 {
        return Err(Error::Parameter("neumann steps must be >= 1".into()));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Parameter(format!("neumann scale {scale}")));
    }
    let mut term = v.to_vec(); // (I - alpha H)^i v
    let mut acc = v.to_vec();
    for _ in 1..steps {
        let hv = hvp(&term);
        if hv.len() != term.len() {
            return Err(Error::Dimension("hvp output length".into()));
        }
        for (t, h) in term.iter_mut().zip(&hv) {
            *t -= scale * h;
        }
        if term.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence("Neumann series".into()));
        }
        axpy(1.0, &term, &mut acc);
    }
    for a in &mut acc {
        *a *= scale;
    }
    if acc.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence("Neumann series".into()));
    }
    Ok(acc)
}

/// Solves A x = b for symmetric positive-definite A (row-major, n x n)
/// by Cholesky factorization. Dense and small-scale by design.
pub fn solve_spd(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n * n {
        return Err(Error::Dimension("solve_spd shape".into()));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Parameter("matrix not positive definite".into()));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    // forward then backward substitution
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a (stream, substream) pair.
///
/// All randomness in a run flows from one root seed through this split so
/// replications are bit-reproducible regardless of scheduling.
pub fn child_seed(root: u64, stream: u64, substream: u64) -> u64 {
    splitmix64(splitmix64(root ^ splitmix64(stream)) ^ splitmix64(substream.wrapping_add(0xa5a5a5a5)))
}

/// Seeded RNG stream; identical seed gives an identical draw sequence.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
