//! Real/fake classifier exposing its penultimate feature map.
//!
//! `depth` stride-2 blocks, then an attention-augmented stage at the reduced
//! resolution whose activation is the feature map `f(x)`, then a 3x3 conv to
//! one channel whose spatial mean is the logit.

use anomgan_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::MAX_CHANNELS;
use crate::nn::{
    Activation, AttentionParams, Bound, Builder, ConvBlock, ConvSpec, HeadSpec, ParamStore, Resample,
    Upsampling,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    /// Attention-augmented penultimate stage; a plain conv when off.
    pub attention: bool,
    pub n_heads: usize,
    /// Per-head query/key depth; `C / 8` when unset.
    pub key_depth: Option<usize>,
    /// Per-head value depth; `C / 8` when unset.
    pub value_depth: Option<usize>,
    pub spectral_norm: bool,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            input_channels: 3,
            depth: 4,
            base_channels: 64,
            attention: true,
            n_heads: 4,
            key_depth: None,
            value_depth: None,
            spectral_norm: true,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.input_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "discriminator input_size {} is not a power of two",
                self.input_size
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("discriminator depth must be at least 1".into()));
        }
        if self.input_size >> self.depth < 4 {
            return Err(Error::Config(format!(
                "discriminator feature map {}px below 4px (input {}, depth {})",
                self.input_size >> self.depth,
                self.input_size,
                self.depth
            )));
        }
        if self.base_channels == 0 || self.base_channels > MAX_CHANNELS {
            return Err(Error::Config(format!(
                "discriminator base_channels must be in 1..={MAX_CHANNELS}"
            )));
        }
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            return Err(Error::Config(format!(
                "leaky_slope must be in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(MAX_CHANNELS)
    }

    /// Declared width of the penultimate stage.
    pub fn stage_channels(&self) -> usize {
        self.channels(self.depth - 1)
    }

    pub fn heads(&self) -> HeadSpec {
        let c = self.stage_channels();
        let default = (c / 8).max(1);
        HeadSpec {
            n_heads: self.n_heads,
            key_depth: self.key_depth.unwrap_or(default),
            value_depth: self.value_depth.unwrap_or(default),
        }
    }

    /// Channels of `f(x)`. The attention-off ablation keeps only the
    /// convolution branch's share.
    pub fn feature_channels(&self) -> usize {
        if self.attention {
            self.stage_channels()
        } else {
            self.stage_channels() - self.heads().attention_channels()
        }
    }

    pub fn feature_spatial(&self) -> usize {
        self.input_size >> self.depth
    }

    /// Flattened per-sample length of `f(x)`.
    pub fn feature_dim(&self) -> usize {
        self.feature_channels() * self.feature_spatial().pow(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    Attention(AttentionParams),
    Plain(ConvBlock),
}

pub struct DiscriminatorOutput<'g> {
    /// `(N,)` pooled logits.
    pub logit: Var<'g>,
    /// `(N,)` sigmoid of the logits.
    pub p_real: Var<'g>,
    /// `(N, C, h, w)` feature map `f(x)`.
    pub features: Var<'g>,
    /// Attention weights of the penultimate stage when it has attention.
    pub attention: Option<Var<'g>>,
}

impl DiscriminatorOutput<'_> {
    /// `f(x)` flattened to `(N, feature_dim)`.
    pub fn flat_features(&self) -> Tensor {
        let f = self.features.value();
        let n = f.dim(0);
        (*f).clone().reshape([n, f.numel() / n])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    blocks: Vec<ConvBlock>,
    stage: Stage,
    head: ConvBlock,
}

fn check_finite(v: Var<'_>, stage: impl FnOnce() -> String) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { location: stage() })
    }
}

impl Discriminator {
    pub fn build(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut builder = Builder::new(&mut params, seed, config.spectral_norm);
        let act = Activation::LeakyRelu(config.leaky_slope);
        let mut blocks = Vec::with_capacity(config.depth);
        let mut in_channels = config.input_channels;
        for level in 0..config.depth {
            let out = config.channels(level);
            blocks.push(ConvBlock::build(
                &mut builder,
                &format!("down{level}"),
                ConvSpec::new(in_channels, out, Resample::Down, act),
                Upsampling::Nearest,
            )?);
            in_channels = out;
        }
        let heads = config.heads();
        let stage = if config.attention {
            Stage::Attention(AttentionParams::build(
                &mut builder,
                "stage",
                in_channels,
                config.stage_channels(),
                heads,
            )?)
        } else {
            if heads.attention_channels() >= config.stage_channels() {
                return Err(Error::Config(format!(
                    "attention channels {} leave no room in a {}-channel stage",
                    heads.attention_channels(),
                    config.stage_channels()
                )));
            }
            Stage::Plain(ConvBlock::build(
                &mut builder,
                "stage.conv",
                ConvSpec::new(
                    in_channels,
                    config.feature_channels(),
                    Resample::Keep,
                    Activation::Identity,
                ),
                Upsampling::Nearest,
            )?)
        };
        let head = ConvBlock::build(
            &mut builder,
            "head",
            ConvSpec::new(config.feature_channels(), 1, Resample::Keep, Activation::Identity),
            Upsampling::Nearest,
        )?;
        Ok(Self {
            config,
            params,
            blocks,
            stage,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4
            || shape[1] != c.input_channels
            || shape[2] != c.input_size
            || shape[3] != c.input_size
        {
            return Err(Error::Shape(format!(
                "discriminator expects (N, {}, {}, {}), got {shape:?}",
                c.input_channels, c.input_size, c.input_size
            )));
        }
        Ok(())
    }

    pub fn forward<'g>(&self, params: &Bound<'g, '_>, x: Var<'g>) -> Result<DiscriminatorOutput<'g>> {
        self.check_input(&x.shape())?;
        let mut h = x;
        for (level, block) in self.blocks.iter().enumerate() {
            h = block.forward(params, h);
            check_finite(h, || format!("discriminator down block {level}"))?;
        }
        let (pre, attention) = match &self.stage {
            Stage::Attention(p) => {
                let out = p.forward(params, h);
                (out.output, Some(out.weights))
            }
            Stage::Plain(block) => (block.forward(params, h), None),
        };
        let features = pre.leaky_relu(self.config.leaky_slope);
        check_finite(features, || "discriminator attention stage".into())?;
        let map = self.head.forward(params, features);
        let n = map.dim(0);
        let logit = map.reshape([n, map.value().numel() / n]).mean_from_axis(1);
        check_finite(logit, || "discriminator head".into())?;
        Ok(DiscriminatorOutput {
            logit,
            p_real: logit.sigmoid(),
            features,
            attention,
        })
    }

    /// Inference-mode `(p_real, flattened features)`.
    pub fn evaluate(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        let bound = self.params.bind(&g, false);
        let out = self.forward(&bound, g.constant(x.clone()))?;
        Ok(((*out.p_real.value()).clone(), out.flat_features()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(attention: bool) -> DiscriminatorConfig {
        DiscriminatorConfig {
            input_size: 16,
            depth: 2,
            base_channels: 8,
            attention,
            ..Default::default()
        }
    }

    #[test]
    fn default_feature_map_is_sixteen_square() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.feature_spatial(), 16);
        assert_eq!(cfg.stage_channels(), 512);
        assert_eq!(cfg.heads().attention_channels(), 4 * 64);
    }

    #[test]
    fn probabilities_and_features() {
        let d = Discriminator::build(small(true), 3).unwrap();
        let x = Tensor::from_vec([2, 3, 16, 16], (0..1536).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect());
        let (p, f) = d.evaluate(&x).unwrap();
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(f.shape(), &[2, d.feature_dim()]);
        let (p2, f2) = d.evaluate(&x).unwrap();
        assert_eq!(p, p2);
        assert_eq!(f, f2);
    }

    #[test]
    fn ablation_changes_only_stage_width() {
        let on = small(true);
        let off = small(false);
        assert_eq!(on.feature_channels(), 16);
        assert_eq!(off.feature_channels(), 16 - on.heads().attention_channels());
        let d = Discriminator::build(off, 0).unwrap();
        let (p, f) = d.evaluate(&Tensor::zeros([1, 3, 16, 16])).unwrap();
        assert_eq!(p.numel(), 1);
        assert_eq!(f.numel(), d.feature_dim());
    }

    #[test]
    fn deterministic_build() {
        let a = Discriminator::build(small(true), 5).unwrap();
        let b = Discriminator::build(small(true), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nan_names_stage() {
        let d = Discriminator::build(small(true), 0).unwrap();
        let mut x = Tensor::zeros([1, 3, 16, 16]);
        x.data_mut()[0] = f64::NAN;
        match d.evaluate(&x) {
            Err(Error::NonFinite { location }) => assert!(location.contains("down block 0")),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }
}
