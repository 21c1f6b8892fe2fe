//! Gradient checks shared by the test suite and the acceptance harness.
//! Each returns the relative error of every checked tensor.

use anomgan::discriminator::{Discriminator, DiscriminatorConfig};
use anomgan::generator::{Generator, GeneratorConfig};
use anomgan::nn::{
    Activation, AttentionParams, Builder, ConvBlock, ConvSpec, HeadSpec, ParamStore, Resample, Upsampling,
};
use anomgan_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gradient_errors, gradient_errors_with, project, uniform, STEP};

/// Relative-error bound of the gradient suite.
pub const GRAD_TOL: f64 = 1e-4;

fn with_params(x: Tensor, store: &ParamStore) -> Vec<Tensor> {
    std::iter::once(x).chain(store.values()).collect()
}

pub fn conv_block(resample: Resample) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let block = ConvBlock::build(
        &mut Builder::new(&mut store, 2, true),
        "b",
        ConvSpec::new(3, 4, resample, Activation::Relu),
        Upsampling::Nearest,
    )
    .unwrap();
    let x = uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut rng);
    gradient_errors(&with_params(x, &store), |_, v| {
        let bound = store.bind_vars(v[1..].to_vec());
        project(block.forward(&bound, v[0]), 7)
    })
}

pub fn attention_augmented_conv() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let heads = HeadSpec {
        n_heads: 2,
        key_depth: 2,
        value_depth: 2,
    };
    let layer = AttentionParams::build(&mut Builder::new(&mut store, 4, true), "aa", 5, 8, heads).unwrap();
    let x = uniform(&[2, 5, 4, 4], -1.0, 1.0, &mut rng);
    gradient_errors(&with_params(x, &store), |_, v| {
        let bound = store.bind_vars(v[1..].to_vec());
        project(layer.forward(&bound, v[0]).output, 8)
    })
}

fn toy_generator() -> Generator {
    let config = GeneratorConfig {
        input_size: 16,
        depth: 2,
        base_channels: 4,
        latent_dim: 8,
        ..Default::default()
    };
    Generator::build(config, 5).unwrap()
}

/// Input and every parameter of a 16-pixel, two-level generator.
pub fn generator_forward() -> Vec<f64> {
    let gen = toy_generator();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = uniform(&[1, 3, 16, 16], -0.9, 0.9, &mut rng);
    let inputs = with_params(x, gen.params());
    // Weights start at std 0.02; a unit-scale step would cross ReLU kinks.
    let steps: Vec<f64> = (0..inputs.len()).map(|k| if k == 0 { STEP } else { STEP * 0.02 }).collect();
    gradient_errors_with(&inputs, &steps, |_, v| {
        let bound = gen.params().bind_vars(v[1..].to_vec());
        project(gen.forward(&bound, v[0]).unwrap().reconstruction, 9)
    })
}

/// Input with the parameters bound as frozen constants.
pub fn generator_input() -> Vec<f64> {
    let gen = toy_generator();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = uniform(&[1, 3, 16, 16], -0.9, 0.9, &mut rng);
    gradient_errors(&[x], |g, v| {
        let bound = gen.params().bind(g, false);
        project(gen.forward(&bound, v[0]).unwrap().reconstruction, 9)
    })
}

pub fn discriminator_forward() -> Vec<f64> {
    let config = DiscriminatorConfig {
        input_size: 16,
        depth: 2,
        base_channels: 8,
        ..Default::default()
    };
    let disc = Discriminator::build(config, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng);
    gradient_errors(&with_params(x, disc.params()), |_, v| {
        let bound = disc.params().bind_vars(v[1..].to_vec());
        let out = disc.forward(&bound, v[0]).unwrap();
        project(out.p_real, 10).add(project(out.features, 11))
    })
}
