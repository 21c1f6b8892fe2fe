//! Spectrally-normalized convolution block shared by both networks.

use anomgan_tensor::{UpsampleMode, Var};
use serde::{Deserialize, Serialize};

use super::params::{Bound, Builder, ParamId};
use crate::error::{Error, Result};

/// Spatial behaviour of a [`ConvBlock`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resample {
    /// Stride-2 convolution; halves height and width.
    Down,
    /// 2x upsampling then stride-1 convolution; doubles height and width.
    Up,
    /// Stride-1 same-padded convolution.
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Relu => x.relu(),
            Activation::LeakyRelu(slope) => x.leaky_relu(slope),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// Upsampling operator used by `Resample::Up` blocks and the skip grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsampling {
    #[default]
    Nearest,
    Bilinear,
}

impl From<Upsampling> for UpsampleMode {
    fn from(u: Upsampling) -> Self {
        match u {
            Upsampling::Nearest => UpsampleMode::Nearest,
            Upsampling::Bilinear => UpsampleMode::Bilinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub resample: Resample,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, resample: Resample, activation: Activation) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            resample,
            activation,
        }
    }

    pub fn kernel(mut self, kernel: usize) -> Self {
        self.kernel = kernel;
        self
    }
}

/// Convolution kernel, bias, and activation. The kernel is spectrally
/// normalized whenever its parameter carries spectral state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
    pub upsampling: Upsampling,
}

impl ConvBlock {
    pub fn build(builder: &mut Builder<'_>, name: &str, spec: ConvSpec, upsampling: Upsampling) -> Result<Self> {
        if spec.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{name}: kernel {} must be odd for same padding",
                spec.kernel
            )));
        }
        if spec.in_channels == 0 || spec.out_channels == 0 {
            return Err(Error::Config(format!("{name}: zero channels")));
        }
        let weight = builder.weight(
            &format!("{name}.weight"),
            &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
        )?;
        let bias = builder.bias(&format!("{name}.bias"), spec.out_channels);
        Ok(Self {
            spec,
            weight,
            bias,
            upsampling,
        })
    }

    /// Spatial size produced from a square input of side `size`.
    pub fn output_size(&self, size: usize) -> usize {
        match self.spec.resample {
            Resample::Down => size / 2,
            Resample::Up => size * 2,
            Resample::Keep => size,
        }
    }

    /// Convolution and bias without the activation.
    pub fn pre_activation<'g>(&self, params: &Bound<'g, '_>, x: Var<'g>) -> Var<'g> {
        let pad = self.spec.kernel / 2;
        let (input, stride) = match self.spec.resample {
            Resample::Down => (x, 2),
            Resample::Up => (x.upsample2x(self.upsampling.into()), 1),
            Resample::Keep => (x, 1),
        };
        input.conv2d(params.weight(self.weight), Some(params.raw(self.bias)), stride, pad)
    }

    pub fn forward<'g>(&self, params: &Bound<'g, '_>, x: Var<'g>) -> Var<'g> {
        self.spec.activation.apply(self.pre_activation(params, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use anomgan_tensor::{Graph, Tensor};

    fn block(in_c: usize, out_c: usize, resample: Resample) -> (ParamStore, ConvBlock) {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 5, true);
        let blk = ConvBlock::build(
            &mut b,
            "blk",
            ConvSpec::new(in_c, out_c, resample, Activation::Relu),
            Upsampling::Nearest,
        )
        .unwrap();
        (store, blk)
    }

    #[test]
    fn down_block_halves() {
        let (store, blk) = block(64, 128, Resample::Down);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::full([1, 64, 32, 32], 0.1));
        assert_eq!(blk.forward(&p, x).shape(), vec![1, 128, 16, 16]);
    }

    #[test]
    fn up_block_doubles() {
        let (store, blk) = block(128, 64, Resample::Up);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::full([1, 128, 16, 16], 0.1));
        assert_eq!(blk.forward(&p, x).shape(), vec![1, 64, 32, 32]);
    }

    #[test]
    fn negative_preactivation_gives_zero() {
        let (mut store, blk) = block(2, 3, Resample::Keep);
        store.get_mut(blk.bias).data_mut().fill(-100.0);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::full([1, 2, 4, 4], 0.5));
        let y = blk.forward(&p, x).value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn even_kernel_rejected() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 5, true);
        let r = ConvBlock::build(
            &mut b,
            "x",
            ConvSpec::new(1, 1, Resample::Keep, Activation::Relu).kernel(4),
            Upsampling::Nearest,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
