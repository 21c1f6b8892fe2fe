//! Generator and discriminator built and used as a pair.

use anomgan_tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::objectives::ScorePair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    /// Validates both networks and that they agree on the input.
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        let (g, d) = (&self.generator, &self.discriminator);
        if g.input_size != d.input_size || g.input_channels != d.input_channels {
            return Err(Error::Config(format!(
                "generator input {}x{}x{} differs from discriminator input {}x{}x{}",
                g.input_channels, g.input_size, g.input_size, d.input_channels, d.input_size, d.input_size
            )));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.generator.input_size
    }

    pub fn input_channels(&self) -> usize {
        self.generator.input_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub generator: Generator,
    pub discriminator: Discriminator,
}

/// Decorrelates the discriminator's initialization stream from the generator's.
const DISCRIMINATOR_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            generator: Generator::build(config.generator.clone(), seed)?,
            discriminator: Discriminator::build(
                config.discriminator.clone(),
                seed ^ DISCRIMINATOR_SEED_OFFSET,
            )?,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            generator: self.generator.config().clone(),
            discriminator: self.discriminator.config().clone(),
        }
    }

    /// Per-sample `a_g = mean|x - x_hat|` and `a_d = mean|f(x) - f(x_hat)|`
    /// for an `(N, C, S, S)` batch, plus the reconstructions.
    pub fn score_batch(&self, x: &Tensor) -> Result<(Vec<ScorePair>, Tensor)> {
        let g = Graph::new();
        let gp = self.generator.params().bind(&g, false);
        let dp = self.discriminator.params().bind(&g, false);
        let real = g.constant(x.clone());
        let x_hat = self.generator.forward(&gp, real)?.reconstruction;
        let f_real = self.discriminator.forward(&dp, real)?.flat_features();
        let f_fake = self.discriminator.forward(&dp, x_hat)?.flat_features();
        let x_hat = (*x_hat.value()).clone();
        let n = x.dim(0);
        let (px, pf) = (x.per_sample(), f_real.per_sample());
        let mean_abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
        let pairs = (0..n)
            .map(|i| ScorePair {
                a_g: mean_abs(&x.data()[i * px..(i + 1) * px], &x_hat.data()[i * px..(i + 1) * px]),
                a_d: mean_abs(&f_real.data()[i * pf..(i + 1) * pf], &f_fake.data()[i * pf..(i + 1) * pf]),
            })
            .collect();
        Ok((pairs, x_hat))
    }
}
