//! The server's strategy set and the defense oracle the adversary queries.

use crate::attack::{LabelMode, LabeledBatch};
use crate::error::{Error, Result};
use crate::models::{sigmoid, ParametricModel};
use crate::numeric::{norm2, rng_from_seed, Mat, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Region of the input space where a defense acts.
///
/// `Band` is the normalized boundary neighborhood |f_S(x)| / ||grad f_S(x)||
/// <= width, which reduces to Euclidean point-to-hyperplane distance for
/// linear models. `Predicate` is an arbitrary membership test and is not
/// representable in catalog files.
#[derive(Clone, Serialize, Deserialize)]
pub enum RegionSpec {
    Band { width: f64 },
    #[serde(skip)]
    Predicate(Arc<dyn Fn(&[f64]) -> bool + Send + Sync>),
}

impl std::fmt::Debug for RegionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegionSpec::Band { width } => write!(f, "Band {{ width: {width} }}"),
            RegionSpec::Predicate(_) => write!(f, "Predicate(..)"),
        }
    }
}

impl RegionSpec {
    pub fn contains(&self, model: &ParametricModel, x: &[f64]) -> bool {
        match self {
            RegionSpec::Band { width } => boundary_distance(model, x) <= *width,
            RegionSpec::Predicate(p) => p(x),
        }
    }
}

/// Normalized distance |f(x)| / ||grad_x f(x)|| from x to the decision
/// boundary of the model.
pub fn boundary_distance(model: &ParametricModel, x: &[f64]) -> f64 {
    let g = norm2(&model.raw_grad_input(x));
    if g <= 1e-12 {
        return f64::INFINITY;
    }
    model.raw(x).abs() / g
}

/// A transformation of the server model's responses.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DefenseStrategy {
    Identity,
    /// Adds amp * sin(freq * x_2) to the raw score (a univariate sine
    /// perturbation read off the second input coordinate, falling back to
    /// the first in one dimension).
    SinePerturb { amp: f64, freq: f64 },
    /// Flips the sign of the raw score with the given probability for
    /// points inside the region.
    BoundaryFlip { region: RegionSpec, flip_prob: f64 },
    /// Flips the sign of the raw score with probability c everywhere.
    UniformFlip { c: f64 },
    /// Boundary differentially-private layer: flip inside the delta-band
    /// with probability 1/2 - sqrt(e^{2t} - 1) / (2 + 2 e^t).
    Bdpl { delta: f64, t: f64 },
    /// Returns sigmoid(f(x) / temp); sign-preserving.
    Temperature { temp: f64 },
}

/// The input coordinate the sine perturbation reads.
fn sine_coord(dim: usize) -> usize {
    if dim >= 2 {
        1
    } else {
        0
    }
}

impl DefenseStrategy {
    pub fn validate(&self) -> Result<()> {
        match self {
            DefenseStrategy::Identity => Ok(()),
            DefenseStrategy::SinePerturb { amp, freq } => {
                if amp.is_finite() && freq.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Parameter("sine amplitude/frequency must be finite".into()))
                }
            }
            DefenseStrategy::BoundaryFlip { flip_prob, .. } => {
                if (0.0..=1.0).contains(flip_prob) {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!("flip_prob {flip_prob} outside [0,1]")))
                }
            }
            DefenseStrategy::UniformFlip { c } => {
                if (0.0..=1.0).contains(c) {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!("flip probability {c} outside [0,1]")))
                }
            }
            DefenseStrategy::Bdpl { delta, t } => {
                if *delta < 0.0 {
                    Err(Error::Parameter(format!("bdpl delta {delta} < 0")))
                } else if *t < 0.0 {
                    Err(Error::Parameter(format!("bdpl t {t} < 0")))
                } else {
                    Ok(())
                }
            }
            DefenseStrategy::Temperature { temp } => {
                if *temp > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!("temperature {temp} must be > 0")))
                }
            }
        }
    }

    /// True when the strategy's responses involve no randomness.
    pub fn is_deterministic(&self) -> bool {
        !matches!(
            self,
            DefenseStrategy::BoundaryFlip { .. }
                | DefenseStrategy::UniformFlip { .. }
                | DefenseStrategy::Bdpl { .. }
        )
    }

    /// Defended raw score for deterministic strategies; None otherwise.
    pub fn defended_raw(&self, model: &ParametricModel, x: &[f64]) -> Option<f64> {
        match self {
            DefenseStrategy::Identity => Some(model.raw(x)),
            DefenseStrategy::SinePerturb { amp, freq } => {
                let c = x[sine_coord(x.len())];
                Some(model.raw(x) + amp * (freq * c).sin())
            }
            DefenseStrategy::Temperature { temp } => Some(model.raw(x) / temp),
            _ => None,
        }
    }

    /// Input gradient of the defended raw score for deterministic strategies.
    pub fn defended_raw_grad_x(&self, model: &ParametricModel, x: &[f64]) -> Option<Vec<f64>> {
        match self {
            DefenseStrategy::Identity => Some(model.raw_grad_input(x)),
            DefenseStrategy::SinePerturb { amp, freq } => {
                let mut g = model.raw_grad_input(x);
                let i = sine_coord(x.len());
                g[i] += amp * freq * (freq * x[i]).cos();
                Some(g)
            }
            DefenseStrategy::Temperature { temp } => {
                let mut g = model.raw_grad_input(x);
                for v in &mut g {
                    *v /= temp;
                }
                Some(g)
            }
            _ => None,
        }
    }
}

/// BDPL flip probability 1/2 - sqrt(e^{2t} - 1) / (2 + 2 e^t) for t >= 0.
pub fn bdpl_flip_prob(t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::Parameter(format!("bdpl privacy parameter t={t} < 0")));
    }
    // clamp: for large t the two terms agree to the last ulp and the
    // difference can round to -1e-17
    Ok((0.5 - ((2.0 * t).exp() - 1.0).sqrt() / (2.0 + 2.0 * t.exp())).max(0.0))
}

/// Oracle response mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseMode {
    Hard,
    Soft,
}

/// The defense oracle f_S^g: the only channel the adversary sees.
///
/// Flip randomness consumes exactly one draw per queried point in batch
/// order, so identical seeds give bit-identical response sequences.
pub struct DefenseOracle {
    pub model: ParametricModel,
    pub strategy: DefenseStrategy,
    pub mode: ResponseMode,
    rng: Rng,
}

impl DefenseOracle {
    pub fn new(
        model: ParametricModel,
        strategy: DefenseStrategy,
        mode: ResponseMode,
        seed: u64,
    ) -> Result<Self> {
        strategy.validate()?;
        Ok(Self { model, strategy, mode, rng: rng_from_seed(seed) })
    }

    /// Responds to a batch of queries.
    pub fn respond(&mut self, xs: &Mat) -> Result<LabeledBatch> {
        if xs.cols() != self.model.dim {
            return Err(Error::Dimension(format!(
                "query dim {} != model dim {}",
                xs.cols(),
                self.model.dim
            )));
        }
        let mut y = Vec::with_capacity(xs.rows());
        for i in 0..xs.rows() {
            let x = xs.row(i);
            let raw = self.defended_raw_one(x);
            y.push(match self.mode {
                ResponseMode::Hard => {
                    if raw >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
                ResponseMode::Soft => sigmoid(raw),
            });
        }
        let mode = match self.mode {
            ResponseMode::Hard => LabelMode::Hard,
            ResponseMode::Soft => LabelMode::Soft,
        };
        LabeledBatch::new(xs.clone(), y, mode)
    }

    fn defended_raw_one(&mut self, x: &[f64]) -> f64 {
        if let Some(raw) = self.strategy.defended_raw(&self.model, x) {
            return raw;
        }
        let raw = self.model.raw(x);
        let draw: f64 = self.rng.gen_range(0.0..1.0);
        let flip = match &self.strategy {
            DefenseStrategy::BoundaryFlip { region, flip_prob } => {
                region.contains(&self.model, x) && draw < *flip_prob
            }
            DefenseStrategy::UniformFlip { c } => draw < *c,
            DefenseStrategy::Bdpl { delta, t } => {
                boundary_distance(&self.model, x) <= *delta
                    && draw < bdpl_flip_prob(*t).expect("validated at construction")
            }
            _ => unreachable!("deterministic strategies handled above"),
        };
        if flip {
            -raw
        } else {
            raw
        }
    }
}

/// The piecewise classifier that disagrees with the server model exactly on
/// the boundary band and agrees elsewhere.
#[derive(Clone, Debug)]
pub struct BandFlipClassifier {
    pub server: ParametricModel,
    pub region: RegionSpec,
}

impl BandFlipClassifier {
    pub fn raw(&self, x: &[f64]) -> f64 {
        let raw = self.server.raw(x);
        if self.region.contains(&self.server, x) {
            -raw
        } else {
            raw
        }
    }

    pub fn hard(&self, x: &[f64]) -> f64 {
        if self.raw(x) >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Builds the mirrored classifier f_B that disagrees with a linear server
/// model exactly on the given band.
pub fn construct_fb(server: &ParametricModel, region: RegionSpec) -> Result<BandFlipClassifier> {
    if let RegionSpec::Band { width } = &region {
        if *width < 0.0 {
            return Err(Error::DegenerateRegion(format!("negative band width {width}")));
        }
    }
    Ok(BandFlipClassifier { server: server.clone(), region })
}

/// Structured-text list of strategies, loadable by the harness.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrategyCatalog {
    pub strategies: Vec<DefenseStrategy>,
}

impl StrategyCatalog {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cat: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("catalog parse: {e}")))?;
        for s in &cat.strategies {
            s.validate()?;
        }
        Ok(cat)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("catalog encode: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
