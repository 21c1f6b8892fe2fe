//! Adversarial, contextual and latent losses, their weighted total, and the
//! blended anomaly score with min-max scaling.

use anomgan_tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[LOG_EPS, 1 - LOG_EPS]` before any log.
pub const LOG_EPS: f64 = 1e-7;

/// Default blend between the contextual and latent anomaly terms.
pub const DEFAULT_ETA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub adversarial: f64,
    pub contextual: f64,
    pub latent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adversarial: 1.0,
            contextual: 40.0,
            latent: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(adversarial: f64, contextual: f64, latent: f64) -> Self {
        Self {
            adversarial,
            contextual,
            latent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.adversarial, self.contextual, self.latent];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {w:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

/// Generator adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialForm {
    /// Minimize `-log D(G(x))`.
    #[default]
    NonSaturating,
    /// Minimize `log(1 - D(G(x)))`, the literal minimax objective.
    Minimax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_adv: f64,
    pub l_con: f64,
    pub l_lat: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_adv, self.l_con, self.l_lat, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_adv", self.l_adv),
            ("l_con", self.l_con),
            ("l_lat", self.l_lat),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

fn clog(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS).ln()
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    values.sum::<f64>() / n as f64
}

/// `(d_loss, g_loss)` for per-sample discriminator outputs on real and
/// reconstructed images.
pub fn adversarial_loss(p_real: &[f64], p_fake: &[f64], form: AdversarialForm) -> (f64, f64) {
    let d = -(mean(p_real.iter().map(|&p| clog(p))) + mean(p_fake.iter().map(|&p| clog(1.0 - p))));
    let g = match form {
        AdversarialForm::NonSaturating => -mean(p_fake.iter().map(|&p| clog(p))),
        AdversarialForm::Minimax => mean(p_fake.iter().map(|&p| clog(1.0 - p))),
    };
    (d, g)
}

pub fn discriminator_loss_var<'g>(p_real: Var<'g>, p_fake: Var<'g>) -> Var<'g> {
    let real = p_real.clamped_log(LOG_EPS).mean();
    let fake = p_fake.affine(-1.0, 1.0).clamped_log(LOG_EPS).mean();
    real.add(fake).scale(-1.0)
}

pub fn generator_adversarial_var<'g>(p_fake: Var<'g>, form: AdversarialForm) -> Var<'g> {
    match form {
        AdversarialForm::NonSaturating => p_fake.clamped_log(LOG_EPS).mean().scale(-1.0),
        AdversarialForm::Minimax => p_fake.affine(-1.0, 1.0).clamped_log(LOG_EPS).mean(),
    }
}

fn mean_abs_diff(a: &Tensor, b: &Tensor, what: &str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(Error::Shape(format!("{what}: empty input")));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64)
}

/// Mean `|x - x_hat|` over every element.
pub fn contextual_loss(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    mean_abs_diff(x, x_hat, "contextual loss")
}

/// Mean `|f(x) - f(x_hat)|` over every feature.
pub fn latent_loss(f_x: &Tensor, f_x_hat: &Tensor) -> Result<f64> {
    mean_abs_diff(f_x, f_x_hat, "latent loss")
}

/// Differentiable mean absolute difference.
pub fn l1_var<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    a.sub(b).abs().mean()
}

pub fn total_loss(l_adv: f64, l_con: f64, l_lat: f64, weights: &LossWeights) -> LossBundle {
    LossBundle {
        l_adv,
        l_con,
        l_lat,
        total: weights.adversarial * l_adv + weights.contextual * l_con + weights.latent * l_lat,
    }
}

/// Weighted total on the graph. Zero-weight terms are left out entirely so
/// nothing flows back through them.
pub fn total_loss_var<'g>(l_adv: Var<'g>, l_con: Var<'g>, l_lat: Var<'g>, weights: &LossWeights) -> Var<'g> {
    [
        (weights.adversarial, l_adv),
        (weights.contextual, l_con),
        (weights.latent, l_lat),
    ]
    .into_iter()
    .filter(|(w, _)| *w != 0.0)
    .map(|(w, v)| v.scale(w))
    .reduce(|acc, v| acc.add(v))
    .expect("validated weights have a non-zero term")
}

/// Per-sample contextual and latent anomaly terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub a_g: f64,
    pub a_d: f64,
}

impl ScorePair {
    pub fn blend(&self, eta: f64) -> f64 {
        anomaly_score(self.a_g, self.a_d, eta)
    }
}

/// `eta * a_g + (1 - eta) * a_d`; higher is more anomalous.
pub fn anomaly_score(a_g: f64, a_d: f64, eta: f64) -> f64 {
    eta * a_g + (1.0 - eta) * a_d
}

pub fn validate_eta(eta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")))
    }
}

/// Min-max statistics of a reference score vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min: f64,
    pub max: f64,
}

impl ScoreRange {
    pub fn fit(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::UndefinedMetric("cannot normalize an empty score vector".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                location: "anomaly scores".into(),
            });
        }
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { min, max })
    }

    pub fn is_degenerate(&self) -> bool {
        self.max == self.min
    }

    /// Scales into `[0, 1]` relative to the fitted range; values outside the
    /// range are clamped. A degenerate range maps everything to 0.
    pub fn apply(&self, score: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            ((score - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        }
    }
}

/// `(v - min) / (max - min)` over the whole vector.
pub fn normalize_scores(scores: &[f64]) -> Result<Vec<f64>> {
    let range = ScoreRange::fit(scores)?;
    if range.is_degenerate() {
        log::warn!(
            "all {} anomaly scores equal {}; normalized scores set to 0",
            scores.len(),
            range.min
        );
    }
    Ok(scores.iter().map(|&s| range.apply(s)).collect())
}
