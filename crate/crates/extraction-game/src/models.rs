//! Parametric scalar-output classifiers with exact first- and second-order
//! derivative access in both the parameters and the inputs.
//!
//! Second-order quantities (Hessian-vector and mixed products) are computed
//! forward-over-reverse: the hand-written analytic gradients are generic over
//! a scalar type, and running them on dual numbers yields exact directional
//! derivatives without finite differencing.

use crate::error::{Error, Result};
use crate::numeric::{solve_spd, Mat, Rng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar abstraction shared by the f64 and dual-number evaluation paths.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn lift(v: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
}

impl Real for f64 {
    fn lift(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// First-order dual number: value plus one directional derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Self { v, d: 0.0 }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { v: self.v + o.v, d: self.d + o.d }
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self { v: self.v - o.v, d: self.d - o.d }
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        Self {
            v: self.v / o.v,
            d: (self.d * o.v - self.v * o.d) / (o.v * o.v),
        }
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        Self { v: -self.v, d: -self.d }
    }
}

impl Real for Dual {
    fn lift(v: f64) -> Self {
        Self::constant(v)
    }
    fn val(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Self { v: e, d: self.d * e }
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Self { v: t, d: self.d * (1.0 - t * t) }
    }
}

/// Logistic sigmoid, stable for both signs of the argument.
pub fn sigmoid<S: Real>(u: S) -> S {
    let one = S::lift(1.0);
    if u.val() >= 0.0 {
        one / (one + (-u).exp())
    } else {
        let e = u.exp();
        e / (one + e)
    }
}

/// Model architectures. The bias is an appended constant-1 feature, so the
/// parameter vector stays flat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    Linear,
    LogisticLinear,
    Mlp2 { hidden: usize },
}

impl ModelKind {
    pub fn param_len(&self, dim: usize) -> usize {
        match *self {
            ModelKind::Linear | ModelKind::LogisticLinear => dim + 1,
            ModelKind::Mlp2 { hidden } => hidden * (dim + 1) + hidden + 1,
        }
    }
}

/// Differentiable training losses for the adversary's lower-level fit.
///
/// `CrossEntropy` compares `sigmoid(raw)` against a soft target in [0, 1];
/// `Squared` compares the raw score against a raw-valued target. `ZeroOne`
/// exists for completeness but has no gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainLoss {
    CrossEntropy,
    Squared,
    ZeroOne,
}

impl TrainLoss {
    /// Pointwise loss value at raw score `u` versus the target.
    pub fn value(&self, u: f64, target: f64) -> f64 {
        match self {
            TrainLoss::CrossEntropy => {
                // ln(1 + e^{-u}) + (1 - q) u, stabilized
                let soft_plus = if u >= 0.0 {
                    (-u).exp().ln_1p()
                } else {
                    -u + u.exp().ln_1p()
                };
                soft_plus + (1.0 - target) * u
            }
            TrainLoss::Squared => (u - target).powi(2),
            TrainLoss::ZeroOne => {
                let pred = if u >= 0.0 { 1.0 } else { -1.0 };
                if pred == target {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    fn dl_du<S: Real>(&self, u: S, target: f64) -> Result<S> {
        match self {
            TrainLoss::CrossEntropy => Ok(sigmoid(u) - S::lift(target)),
            TrainLoss::Squared => Ok(S::lift(2.0) * (u - S::lift(target))),
            TrainLoss::ZeroOne => Err(Error::UnsupportedLoss(
                "0-1 loss is not differentiable".into(),
            )),
        }
    }

    /// Mixed second derivative of the pointwise loss in (raw score, target):
    /// constant for both supported losses.
    pub fn d2l_du_dtarget(&self) -> Result<f64> {
        match self {
            TrainLoss::CrossEntropy => Ok(-1.0),
            TrainLoss::Squared => Ok(-2.0),
            TrainLoss::ZeroOne => Err(Error::UnsupportedLoss(
                "0-1 loss is not differentiable".into(),
            )),
        }
    }

    /// Second derivative of the pointwise loss in the raw score.
    fn d2l_du2(&self, u: f64) -> Result<f64> {
        match self {
            TrainLoss::CrossEntropy => {
                let p = sigmoid(u);
                Ok(p * (1.0 - p))
            }
            TrainLoss::Squared => Ok(2.0),
            TrainLoss::ZeroOne => Err(Error::UnsupportedLoss(
                "0-1 loss is not differentiable".into(),
            )),
        }
    }
}

/// Raw score, soft label, and hard label for a single point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub raw: f64,
    pub soft: f64,
    pub hard: f64,
}

fn raw_score<S: Real>(kind: ModelKind, dim: usize, params: &[S], x: &[S]) -> S {
    match kind {
        ModelKind::Linear | ModelKind::LogisticLinear => {
            let mut u = params[dim]; // bias
            for i in 0..dim {
                u = u + params[i] * x[i];
            }
            u
        }
        ModelKind::Mlp2 { hidden } => {
            let w2_off = hidden * (dim + 1);
            let mut u = params[w2_off + hidden]; // output bias
            for k in 0..hidden {
                let row = &params[k * (dim + 1)..(k + 1) * (dim + 1)];
                let mut z = row[dim];
                for i in 0..dim {
                    z = z + row[i] * x[i];
                }
                u = u + params[w2_off + k] * z.tanh();
            }
            u
        }
    }
}

fn raw_grad_beta<S: Real>(kind: ModelKind, dim: usize, params: &[S], x: &[S]) -> Vec<S> {
    match kind {
        ModelKind::Linear | ModelKind::LogisticLinear => {
            let mut g = Vec::with_capacity(dim + 1);
            g.extend_from_slice(&x[..dim]);
            g.push(S::lift(1.0));
            g
        }
        ModelKind::Mlp2 { hidden } => {
            let w2_off = hidden * (dim + 1);
            let mut g = vec![S::lift(0.0); params.len()];
            for k in 0..hidden {
                let row = &params[k * (dim + 1)..(k + 1) * (dim + 1)];
                let mut z = row[dim];
                for i in 0..dim {
                    z = z + row[i] * x[i];
                }
                let a = z.tanh();
                let sech2 = S::lift(1.0) - a * a;
                let scale = params[w2_off + k] * sech2;
                for i in 0..dim {
                    g[k * (dim + 1) + i] = scale * x[i];
                }
                g[k * (dim + 1) + dim] = scale;
                g[w2_off + k] = a;
            }
            g[w2_off + hidden] = S::lift(1.0);
            g
        }
    }
}

fn raw_grad_x<S: Real>(kind: ModelKind, dim: usize, params: &[S], x: &[S]) -> Vec<S> {
    match kind {
        ModelKind::Linear | ModelKind::LogisticLinear => params[..dim].to_vec(),
        ModelKind::Mlp2 { hidden } => {
            let w2_off = hidden * (dim + 1);
            let mut g = vec![S::lift(0.0); dim];
            for k in 0..hidden {
                let row = &params[k * (dim + 1)..(k + 1) * (dim + 1)];
                let mut z = row[dim];
                for i in 0..dim {
                    z = z + row[i] * x[i];
                }
                let a = z.tanh();
                let sech2 = S::lift(1.0) - a * a;
                let scale = params[w2_off + k] * sech2;
                for i in 0..dim {
                    g[i] = g[i] + scale * row[i];
                }
            }
            g
        }
    }
}

/// A differentiable scalar-output model f(x; beta).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametricModel {
    pub kind: ModelKind,
    pub dim: usize,
    pub params: Vec<f64>,
}

impl ParametricModel {
    pub fn new(kind: ModelKind, dim: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != kind.param_len(dim) {
            return Err(Error::Dimension(format!(
                "parameter length {} != expected {}",
                params.len(),
                kind.param_len(dim)
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameter".into()));
        }
        Ok(Self { kind, dim, params })
    }

    /// Linear model with explicit weights and bias.
    pub fn linear(weights: &[f64], bias: f64) -> Result<Self> {
        let mut p = weights.to_vec();
        p.push(bias);
        Self::new(ModelKind::Linear, weights.len(), p)
    }

    /// Parameters drawn from N(0, I).
    pub fn random_init(kind: ModelKind, dim: usize, rng: &mut Rng) -> Self {
        let params = (0..kind.param_len(dim))
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self { kind, dim, params }
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::new(self.kind, self.dim, params)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "point dim {} != model dim {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn raw(&self, x: &[f64]) -> f64 {
        raw_score(self.kind, self.dim, &self.params, x)
    }

    /// Gradient of the raw score with respect to the input point.
    pub fn raw_grad_input(&self, x: &[f64]) -> Vec<f64> {
        raw_grad_x(self.kind, self.dim, &self.params, x)
    }

    /// Gradient of the raw score with respect to the parameters.
    pub fn raw_grad_params(&self, x: &[f64]) -> Vec<f64> {
        raw_grad_beta(self.kind, self.dim, &self.params, x)
    }

    /// Deterministic forward pass. Hard-label tie at raw = 0 resolves to +1.
    pub fn forward(&self, x: &[f64]) -> Result<Prediction> {
        self.check_point(x)?;
        let raw = self.raw(x);
        Ok(Prediction {
            raw,
            soft: sigmoid(raw),
            hard: if raw >= 0.0 { 1.0 } else { -1.0 },
        })
    }

    /// Gradient of loss(raw(x; beta), target) with respect to beta.
    pub fn grad_beta(&self, x: &[f64], loss: TrainLoss, target: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let u = self.raw(x);
        let g = loss.dl_du(u, target)?;
        let mut out = raw_grad_beta(self.kind, self.dim, &self.params, x);
        for o in &mut out {
            *o *= g;
        }
        Ok(out)
    }

    /// Gradient of loss(raw(x; beta), target) with respect to x.
    pub fn grad_x(&self, x: &[f64], loss: TrainLoss, target: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let u = self.raw(x);
        let g = loss.dl_du(u, target)?;
        let mut out = raw_grad_x(self.kind, self.dim, &self.params, x);
        for o in &mut out {
            *o *= g;
        }
        Ok(out)
    }

    /// Hessian-vector product of the batch objective
    /// h(beta) = sum_i loss(raw(x_i), t_i) + mu ||beta||^2 with respect to beta.
    pub fn hvp_beta(
        &self,
        xs: &Mat,
        loss: TrainLoss,
        targets: &[f64],
        mu: f64,
        v: &[f64],
    ) -> Result<Vec<f64>> {
        if xs.rows() == 0 {
            return Err(Error::Dimension("empty batch".into()));
        }
        if xs.rows() != targets.len() || xs.cols() != self.dim || v.len() != self.params.len() {
            return Err(Error::Dimension("hvp_beta shapes".into()));
        }
        loss.d2l_du2(0.0)?; // reject non-differentiable losses up front
        let dual_params: Vec<Dual> = self
            .params
            .iter()
            .zip(v)
            .map(|(&p, &d)| Dual { v: p, d })
            .collect();
        let mut out = vec![0.0; v.len()];
        for i in 0..xs.rows() {
            let x: Vec<Dual> = xs.row(i).iter().map(|&c| Dual::constant(c)).collect();
            let u = raw_score(self.kind, self.dim, &dual_params, &x);
            let g = loss.dl_du(u, targets[i])?;
            let gb = raw_grad_beta(self.kind, self.dim, &dual_params, &x);
            for (o, gk) in out.iter_mut().zip(gb) {
                *o += (g * gk).d;
            }
        }
        for (o, vi) in out.iter_mut().zip(v) {
            *o += 2.0 * mu * vi;
        }
        Ok(out)
    }

    /// Mixed second derivative of the batch loss applied to a parameter-space
    /// direction: returns d/d eps grad_x h(x, beta + eps v), flattened n x d.
    /// The ridge term has no x dependence and drops out.
    pub fn cross_hvp_xbeta(
        &self,
        xs: &Mat,
        loss: TrainLoss,
        targets: &[f64],
        v: &[f64],
    ) -> Result<Vec<f64>> {
        if xs.rows() != targets.len() || xs.cols() != self.dim || v.len() != self.params.len() {
            return Err(Error::Dimension("cross_hvp_xbeta shapes".into()));
        }
        let dual_params: Vec<Dual> = self
            .params
            .iter()
            .zip(v)
            .map(|(&p, &d)| Dual { v: p, d })
            .collect();
        let mut out = vec![0.0; xs.rows() * self.dim];
        for i in 0..xs.rows() {
            let x: Vec<Dual> = xs.row(i).iter().map(|&c| Dual::constant(c)).collect();
            let u = raw_score(self.kind, self.dim, &dual_params, &x);
            let g = loss.dl_du(u, targets[i])?;
            let gx = raw_grad_x(self.kind, self.dim, &dual_params, &x);
            for (j, gj) in gx.into_iter().enumerate() {
                out[i * self.dim + j] = (g * gj).d;
            }
        }
        Ok(out)
    }

    /// Batch objective value and beta-gradient of
    /// h(beta) = sum_i loss(raw(x_i), t_i) + mu ||beta||^2.
    pub fn batch_loss_grad(
        &self,
        xs: &Mat,
        loss: TrainLoss,
        targets: &[f64],
        mu: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if xs.rows() != targets.len() || xs.cols() != self.dim {
            return Err(Error::Dimension("batch shapes".into()));
        }
        let mut value = mu * self.params.iter().map(|p| p * p).sum::<f64>();
        let mut grad: Vec<f64> = self.params.iter().map(|p| 2.0 * mu * p).collect();
        for i in 0..xs.rows() {
            let x = xs.row(i);
            let u = self.raw(x);
            value += loss.value(u, targets[i]);
            let g = loss.dl_du(u, targets[i])?;
            let gb = raw_grad_beta(self.kind, self.dim, &self.params, x);
            for (gr, gk) in grad.iter_mut().zip(gb) {
                *gr += g * gk;
            }
        }
        Ok((value, grad))
    }
}

/// Closed-form ridge solution beta = (X~'X~ + mu I)^{-1} X~' y for the
/// squared loss on a linear model (X~ is X with the bias column appended).
pub fn ridge_closed_form(xs: &Mat, targets: &[f64], mu: f64) -> Result<Vec<f64>> {
    if mu <= 0.0 {
        return Err(Error::Parameter(format!(
            "ridge requires mu > 0 for strong convexity, got {mu}"
        )));
    }
    if xs.rows() != targets.len() {
        return Err(Error::Dimension("ridge batch shapes".into()));
    }
    let d = xs.cols() + 1;
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for i in 0..xs.rows() {
        let mut row = xs.row(i).to_vec();
        row.push(1.0);
        for a in 0..d {
            rhs[a] += row[a] * targets[i];
            for b in 0..d {
                gram[a * d + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        gram[a * d + a] += mu;
    }
    solve_spd(&gram, &rhs)
}

/// Versioned model checkpoint (JSON).
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: ParametricModel,
}

pub fn save_checkpoint(model: &ParametricModel, path: &std::path::Path) -> Result<()> {
    let cp = Checkpoint { version: 1, model: model.clone() };
    let text = serde_json::to_string_pretty(&cp)
        .map_err(|e| Error::Data(format!("checkpoint encode: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ParametricModel> {
    let text = std::fs::read_to_string(path)?;
    let cp: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("checkpoint decode: {e}")))?;
    if cp.version != 1 {
        return Err(Error::Data(format!("unknown checkpoint version {}", cp.version)));
    }
    ParametricModel::new(cp.model.kind, cp.model.dim, cp.model.params)
}
