//! Small model configs and synthetic datasets for training tests.

use std::path::Path;

use anomgan::data::synth::{generate, SynthConfig};
use anomgan::data::{Dataset, Manifest, PatchSpec};
use anomgan::discriminator::DiscriminatorConfig;
use anomgan::generator::GeneratorConfig;
use anomgan::model::ModelConfig;

/// Model for `size`-pixel RGB inputs with a `depth`-level generator.
pub fn small_model(size: usize, depth: usize, base: usize) -> ModelConfig {
    ModelConfig {
        generator: GeneratorConfig {
            input_size: size,
            depth,
            base_channels: base,
            latent_dim: base * 8,
            ..Default::default()
        },
        discriminator: DiscriminatorConfig {
            input_size: size,
            depth: depth.min(3),
            base_channels: base,
            ..Default::default()
        },
    }
}

pub fn synth(root: &Path, size: u32, train: usize, test_normal: usize, test_defect: usize, seed: u64) -> (Manifest, Manifest) {
    let cfg = SynthConfig {
        size,
        train_normal: train,
        test_normal,
        test_defect,
        seed,
    };
    generate(root, &cfg).unwrap()
}

/// One whole-image sample per record.
pub fn whole_images(manifest: Manifest, size: usize) -> Dataset {
    Dataset::new(manifest, PatchSpec::new(size), 3, false).unwrap()
}
