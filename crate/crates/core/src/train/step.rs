use anomgan_tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, Adam};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::objectives::{
    discriminator_loss_var, generator_adversarial_var, l1_var, total_loss, total_loss_var, AdversarialForm,
    LossBundle, LossWeights,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub loss_weights: LossWeights,
    pub adversarial_form: AdversarialForm,
    /// Global gradient-norm ceiling per network; off when unset.
    pub grad_clip: Option<f64>,
    /// Random horizontal flips of training samples.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 8e-3,
            batch_size: 64,
            max_epochs: 20,
            beta1: 0.5,
            beta2: 0.999,
            loss_weights: LossWeights::default(),
            adversarial_form: AdversarialForm::NonSaturating,
            grad_clip: None,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.loss_weights.validate()
    }
}

/// Optimizer state of both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub generator: Adam,
    pub discriminator: Adam,
}

impl Optimizers {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        let adam = |p: &ParamStore| Adam::new(p, config.learning_rate, config.beta1, config.beta2);
        Self {
            generator: adam(model.generator.params()),
            discriminator: adam(model.discriminator.params()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub generator: LossBundle,
    pub d_loss: f64,
}

fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            location: format!("training loss {name}"),
        })
    }
}

fn collect_grads(vars: &[anomgan_tensor::Var<'_>], grads: &anomgan_tensor::Gradients, clip: Option<f64>) -> Result<Vec<Tensor>> {
    let mut out: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
    if out.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            location: "parameter gradients".into(),
        });
    }
    if let Some(max) = clip {
        clip_global_norm(&mut out, max);
    }
    Ok(out)
}

/// One discriminator update followed by one generator update on `batch`.
///
/// Spectral states of both networks advance one power iteration first. The
/// reconstruction is computed once: the discriminator update does not touch
/// generator weights, so recomputing it for the generator update would give
/// the same values. Nothing is modified when a loss is non-finite.
pub fn train_step(model: &mut Model, optim: &mut Optimizers, batch: &Tensor, config: &TrainConfig) -> Result<StepLosses> {
    let mut g_store = model.generator.params().clone();
    let mut d_store = model.discriminator.params().clone();
    g_store.advance_spectral()?;
    d_store.advance_spectral()?;

    let g_graph = Graph::new();
    let gp = g_store.bind(&g_graph, true);
    let real = g_graph.constant(batch.clone());
    let x_hat = model.generator.forward(&gp, real)?.reconstruction;

    // Discriminator update on a detached reconstruction.
    let (d_loss, d_grads) = {
        let g = Graph::new();
        let dp = d_store.bind(&g, true);
        let p_real = model.discriminator.forward(&dp, g.constant(batch.clone()))?.p_real;
        let p_fake = model
            .discriminator
            .forward(&dp, g.constant((*x_hat.value()).clone()))?
            .p_real;
        let loss = discriminator_loss_var(p_real, p_fake);
        let value = loss.value().item();
        ensure_finite("d_loss", value)?;
        let grads = g.backward(loss);
        (value, collect_grads(dp.vars(), &grads, config.grad_clip)?)
    };
    let mut next_d = d_store;
    let mut next_d_optim = optim.discriminator.clone();
    next_d_optim.step(&mut next_d, &d_grads);

    // Generator update against the updated discriminator, held fixed.
    let dp = next_d.bind(&g_graph, false);
    let real_out = model.discriminator.forward(&dp, real)?;
    let fake_out = model.discriminator.forward(&dp, x_hat)?;
    let l_adv = generator_adversarial_var(fake_out.p_real, config.adversarial_form);
    let l_con = l1_var(real, x_hat);
    let l_lat = l1_var(real_out.features, fake_out.features);
    let weights = &config.loss_weights;
    let bundle = total_loss(l_adv.value().item(), l_con.value().item(), l_lat.value().item(), weights);
    if let Some(term) = bundle.non_finite_term() {
        return Err(Error::NonFinite {
            location: format!("training loss {term}"),
        });
    }
    let total = total_loss_var(l_adv, l_con, l_lat, weights);
    let grads = g_graph.backward(total);
    let g_grads = collect_grads(gp.vars(), &grads, config.grad_clip)?;

    drop(gp);
    *model.discriminator.params_mut() = next_d;
    optim.discriminator = next_d_optim;
    optim.generator.step(&mut g_store, &g_grads);
    *model.generator.params_mut() = g_store;
    Ok(StepLosses {
        generator: bundle,
        d_loss,
    })
}
