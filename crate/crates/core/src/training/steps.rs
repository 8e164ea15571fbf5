//! Single parameter updates. Each step borrows the model it must not touch
//! immutably, so step isolation is enforced by the type system.

use rand::Rng;

use crate::energy::{
    batch_entropy, batch_entropy_grad, gan_energy_from_logits, poe_energy_from_logits, poe_energy_grad, softplus,
    Critic, EnergyModel, GanEnergyHead,
};
use crate::error::{Error, Result};
use crate::generator::{sample_mask, sample_noise, vcd_generator_grads, DirectGenerator, TransitionGenerator, VcdObjective, VcdTerms};
use crate::ndiff::{sigmoid, Adadelta, Gradients, Mode, Tensor};

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

fn step_critic<C: Critic>(critic: &mut C, opt: &mut Adadelta, grads: &Gradients) -> Result<()> {
    opt.step(critic.phi_mut(), grads)?;
    opt.step(critic.head_mut(), grads)
}

/// Generator objective of one direct-generator step (minimized form).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GenStepStats {
    pub loss: f64,
    pub energy: f64,
    pub entropy: f64,
}

/// One descent step of `G` on `mean E(G(z)) - H̃(p_g)` with fresh noise.
pub fn vgan_generator_step(
    energy: &EnergyModel,
    gen: &mut DirectGenerator,
    opt: &mut Adadelta,
    n: usize,
    rng: &mut impl Rng,
) -> Result<GenStepStats> {
    let z = sample_noise(n, gen.noise_dim(), rng);
    let (x, trace) = gen.net.trace(&z, Mode::Train)?;
    let (logits, critic_trace) = energy.traced_logits(&x)?;
    let energy_mean = poe_energy_from_logits(&logits).mean();
    let entropy = batch_entropy(&logits);
    let stats = GenStepStats {
        loss: finite(energy_mean - entropy, "generator loss")?,
        energy: energy_mean,
        entropy,
    };
    let mut dlogits = poe_energy_grad(&logits).scaled(1.0 / n as f64);
    dlogits.add_assign(&batch_entropy_grad(&logits).scaled(-1.0))?;
    let dx = energy.backprop(&critic_trace, &dlogits, true)?.input.expect("critic input gradient");
    let grads = gen.net.backprop_with(&trace, &dx, false)?;
    opt.step(&mut gen.net, &grads)?;
    Ok(stats)
}

/// Energy-side statistics, all evaluated before the update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyStepStats {
    pub data_energy: f64,
    pub gen_energy: f64,
    pub entropy_data: f64,
    pub entropy_gen: f64,
    /// `data_energy - gen_energy - entropy_data` (or the discriminator loss).
    pub loss: f64,
}

fn energy_terms(data_logits: &Tensor, neg_logits: &Tensor) -> EnergyStepStats {
    let data_energy = poe_energy_from_logits(data_logits).mean();
    let gen_energy = poe_energy_from_logits(neg_logits).mean();
    let entropy_data = batch_entropy(data_logits);
    EnergyStepStats {
        data_energy,
        gen_energy,
        entropy_data,
        entropy_gen: batch_entropy(neg_logits),
        loss: data_energy - gen_energy - entropy_data,
    }
}

/// Energy objective of a data batch against a batch of negatives; a pure function.
pub fn vgan_energy_objective(energy: &EnergyModel, data: &Tensor, negatives: &Tensor) -> Result<EnergyStepStats> {
    Ok(energy_terms(&energy.logits(data)?, &energy.logits(negatives)?))
}

/// Descent on `mean E(data) - mean E(negatives) - H̃(p_data)`.
pub fn energy_descent(
    energy: &mut EnergyModel,
    opt: &mut Adadelta,
    data: &Tensor,
    negatives: &Tensor,
) -> Result<EnergyStepStats> {
    let n = data.batch();
    let both = Tensor::concat(&[data, negatives])?;
    let (logits, trace) = energy.traced_logits(&both)?;
    let data_logits = logits.slice_batch(0, n)?;
    let neg_logits = logits.slice_batch(n, both.batch())?;
    let stats = energy_terms(&data_logits, &neg_logits);
    finite(stats.loss, "energy loss")?;

    let mut d_data = poe_energy_grad(&data_logits).scaled(1.0 / n as f64);
    d_data.add_assign(&batch_entropy_grad(&data_logits).scaled(-1.0))?;
    let d_neg = poe_energy_grad(&neg_logits).scaled(-1.0 / negatives.batch() as f64);
    let grads = energy.backprop(&trace, &Tensor::concat(&[&d_data, &d_neg])?, false)?;
    step_critic(energy, opt, &grads)?;
    Ok(stats)
}

/// Negatives from a direct generator: batch statistics, generator untouched.
pub fn generate_negatives(gen: &DirectGenerator, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let z = sample_noise(n, gen.noise_dim(), rng);
    Ok(gen.net.trace_frozen(&z, Mode::Train)?.0)
}

/// One energy update against fresh generator samples.
pub fn vgan_energy_step(
    energy: &mut EnergyModel,
    gen: &DirectGenerator,
    opt: &mut Adadelta,
    data: &Tensor,
    rng: &mut impl Rng,
) -> Result<EnergyStepStats> {
    let negatives = generate_negatives(gen, data.batch(), rng)?;
    energy_descent(energy, opt, data, &negatives)
}

/// One transition-generator update on a data batch with fresh noise and masks.
pub fn vcd_generator_step(
    energy: &EnergyModel,
    g: &mut TransitionGenerator,
    opt: &mut Adadelta,
    x: &Tensor,
    terms: VcdTerms,
    rng: &mut impl Rng,
) -> Result<VcdObjective> {
    let (n, d) = (x.batch(), g.code_dim());
    // at rho = 0 the perturbed path carries no weight, so nothing is drawn
    let (z, m) = if terms.rho == 0.0 {
        (Tensor::zeros(&[n, d]), Tensor::zeros(&[n, d]))
    } else {
        (sample_noise(n, d, rng), sample_mask(n, d, rng))
    };
    let (obj, grads) = vcd_generator_grads(energy, g, x, &z, &m, terms)?;
    finite(obj.loss, "transition generator loss")?;
    opt.step(&mut g.encoder, &grads)?;
    opt.step(&mut g.decoder, &grads)?;
    Ok(obj)
}

/// Negatives for the energy step: perturbed transitions, or plain
/// reconstructions when `rho = 0` (the generator is then an autoencoder).
/// Returns the negatives and the number of masks drawn.
pub fn transition_negatives(g: &TransitionGenerator, x: &Tensor, rho: f64, rng: &mut impl Rng) -> Result<(Tensor, usize)> {
    if rho == 0.0 {
        Ok((g.decode(&g.encode(x)?)?, 0))
    } else {
        let t = g.transition_sample(x, rng)?;
        Ok((t.x_tilde, t.m.batch()))
    }
}

pub fn vcd_energy_step(
    energy: &mut EnergyModel,
    g: &TransitionGenerator,
    opt: &mut Adadelta,
    x: &Tensor,
    rho: f64,
    rng: &mut impl Rng,
) -> Result<(EnergyStepStats, usize)> {
    let (negatives, masks) = transition_negatives(g, x, rho, rng)?;
    Ok((energy_descent(energy, opt, x, &negatives)?, masks))
}

/// Discriminator descent on `mean softplus(-a_data) + mean softplus(a_gen)`.
pub fn gan_discriminator_step(
    disc: &mut GanEnergyHead,
    gen: &DirectGenerator,
    opt: &mut Adadelta,
    data: &Tensor,
    rng: &mut impl Rng,
) -> Result<EnergyStepStats> {
    let n = data.batch();
    let negatives = generate_negatives(gen, n, rng)?;
    let both = Tensor::concat(&[data, &negatives])?;
    let (logits, trace) = disc.traced_logits(&both)?;
    let (a_data, a_gen) = (logits.slice_batch(0, n)?, logits.slice_batch(n, 2 * n)?);
    let data_energy = gan_energy_from_logits(&a_data).mean();
    let stats = EnergyStepStats {
        data_energy,
        gen_energy: gan_energy_from_logits(&a_gen).mean(),
        loss: finite(data_energy + a_gen.map(softplus).mean(), "discriminator loss")?,
        ..Default::default()
    };
    let d_data = a_data.map(|a| -sigmoid(-a) / n as f64);
    let d_gen = a_gen.map(|a| sigmoid(a) / n as f64);
    let grads = disc.backprop(&trace, &Tensor::concat(&[&d_data, &d_gen])?, false)?;
    step_critic(disc, opt, &grads)?;
    Ok(stats)
}

/// Generator descent on `mean -ln D(G(z))`.
pub fn gan_generator_step(
    disc: &GanEnergyHead,
    gen: &mut DirectGenerator,
    opt: &mut Adadelta,
    n: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let z = sample_noise(n, gen.noise_dim(), rng);
    let (x, trace) = gen.net.trace(&z, Mode::Train)?;
    let (logits, critic_trace) = disc.traced_logits(&x)?;
    let loss = finite(gan_energy_from_logits(&logits).mean(), "generator loss")?;
    let dlogits = logits.map(|a| -sigmoid(-a) / n as f64);
    let dx = disc.backprop(&critic_trace, &dlogits, true)?.input.expect("critic input gradient");
    let grads = gen.net.backprop_with(&trace, &dx, false)?;
    opt.step(&mut gen.net, &grads)?;
    Ok(loss)
}
