//! Sample generators: a direct noise-to-sample network and a stochastic
//! transition operator built from an encoder/decoder pair.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::{Config, ReconNorm};
use crate::energy::{batch_entropy, batch_entropy_grad, poe_energy_from_logits, poe_energy_grad, Critic, EnergyModel};
use crate::error::{Error, Result};
use crate::ndiff::{Gradients, Graph, Mode, Tensor};

/// `n x d` noise, uniform on `[-1, 1]`.
pub fn sample_noise(n: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..=1.0))
}

/// `n x d` mask of independent fair coin flips in `{0, 1}`.
pub fn sample_mask(n: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[n, d], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
}

/// `m ⊙ z + (1 - m) ⊙ h`.
pub fn mix_codes(h: &Tensor, z: &Tensor, m: &Tensor) -> Result<Tensor> {
    z.expect_shape(h.shape(), "transition noise")?;
    m.expect_shape(h.shape(), "transition mask")?;
    let mut out = h.clone();
    for ((o, &zi), &mi) in out.data_mut().iter_mut().zip(z.data()).zip(m.data()) {
        *o = mi * zi + (1.0 - mi) * *o;
    }
    Ok(out)
}

fn state_map(graphs: &[&Graph]) -> Vec<(String, Tensor)> {
    graphs
        .iter()
        .flat_map(|g| g.state().into_iter().map(|(n, t)| (n, t.clone())))
        .collect()
}

/// `G(z)` mapping flat noise to samples.
#[derive(Clone, Debug)]
pub struct DirectGenerator {
    pub net: Graph,
}

impl DirectGenerator {
    pub fn new(net: Graph) -> Result<Self> {
        if net.input_shape().len() != 1 {
            return Err(Error::invalid(format!("generator input must be flat, got {:?}", net.input_shape())));
        }
        Ok(Self { net })
    }

    pub fn noise_dim(&self) -> usize {
        self.net.input_shape()[0]
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.net.output_shape()
    }

    /// Eval-mode `G(z)`.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        self.net.infer(z)
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
        self.generate(&sample_noise(n, self.noise_dim(), rng))
    }

    pub fn state(&self) -> Vec<(String, Tensor)> {
        state_map(&[&self.net])
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.net.load_state(tensors)
    }

    pub fn checksum(&self) -> u64 {
        self.net.checksum()
    }
}

/// Everything drawn and computed by one transition.
#[derive(Clone, Debug)]
pub struct TransitionSample {
    /// Plain reconstruction `Decode(Encode(x))`.
    pub x_bar: Tensor,
    /// Sample after the masked code perturbation.
    pub x_tilde: Tensor,
    pub h: Tensor,
    pub h_tilde: Tensor,
    pub z: Tensor,
    pub m: Tensor,
}

/// Stochastic transition `x -> x̃`: encode, replace a random half of the
/// code by fresh noise, decode.
#[derive(Clone, Debug)]
pub struct TransitionGenerator {
    /// Ends in `tanh`, so codes live in `[-1, 1]^d` like the noise.
    pub encoder: Graph,
    pub decoder: Graph,
}

impl TransitionGenerator {
    pub fn new(encoder: Graph, decoder: Graph) -> Result<Self> {
        if encoder.output_shape().len() != 1 {
            return Err(Error::invalid("encoder must output a flat code"));
        }
        if encoder.layers().last().map(|l| l.kind()) != Some("tanh") {
            return Err(Error::invalid("encoder must end in tanh"));
        }
        if decoder.input_shape() != encoder.output_shape() {
            return Err(Error::shape("decoder input", encoder.output_shape(), decoder.input_shape()));
        }
        if decoder.output_shape() != encoder.input_shape() {
            return Err(Error::shape("decoder output", encoder.input_shape(), decoder.output_shape()));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn code_dim(&self) -> usize {
        self.encoder.output_shape()[0]
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.infer(x)
    }

    pub fn decode(&self, h: &Tensor) -> Result<Tensor> {
        self.decoder.infer(h)
    }

    /// Deterministic transition given explicit noise and mask.
    pub fn transition_with(&self, x: &Tensor, z: &Tensor, m: &Tensor) -> Result<TransitionSample> {
        let h = self.encode(x)?;
        let h_tilde = mix_codes(&h, z, m)?;
        Ok(TransitionSample {
            x_bar: self.decode(&h)?,
            x_tilde: self.decode(&h_tilde)?,
            h,
            h_tilde,
            z: z.clone(),
            m: m.clone(),
        })
    }

    pub fn transition_sample(&self, x: &Tensor, rng: &mut impl Rng) -> Result<TransitionSample> {
        let (n, d) = (x.batch(), self.code_dim());
        let z = sample_noise(n, d, rng);
        let m = sample_mask(n, d, rng);
        self.transition_with(x, &z, &m)
    }

    pub fn state(&self) -> Vec<(String, Tensor)> {
        state_map(&[&self.encoder, &self.decoder])
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.encoder.load_state(tensors)?;
        self.decoder.load_state(tensors)
    }

    pub fn checksum(&self) -> u64 {
        self.encoder.checksum() ^ self.decoder.checksum().rotate_left(1)
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.zip_map(b, |p, q| (p - q) * (p - q))?.mean())
}

/// Weights of the transition generator objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VcdTerms {
    pub rho: f64,
    /// Subtract `ρ·H̃(x̃)` as for a direct generator.
    pub entropy_term: bool,
    pub recon: ReconNorm,
}

impl VcdTerms {
    pub fn new(rho: f64) -> Self {
        Self {
            rho,
            entropy_term: true,
            recon: ReconNorm::Sum,
        }
    }

    pub fn from_config(cfg: &Config) -> Self {
        Self {
            rho: cfg.vcd.rho,
            entropy_term: cfg.vcd.entropy_term,
            recon: cfg.vcd.recon,
        }
    }

    fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }

    /// Multiplier turning the per-pixel MSE into the reconstruction term.
    fn recon_scale(&self, x: &Tensor) -> f64 {
        match self.recon {
            ReconNorm::Sum => x.row_len() as f64,
            ReconNorm::Mean => 1.0,
        }
    }
}

/// `ρ·(mean E(x̃) - H̃(x̃)) + (1-ρ)·recon(x̄, x)` for one random transition of `x`.
pub fn vcd_generator_loss(
    energy: &EnergyModel,
    g: &TransitionGenerator,
    x: &Tensor,
    terms: VcdTerms,
    rng: &mut impl Rng,
) -> Result<f64> {
    terms.check()?;
    let t = g.transition_sample(x, rng)?;
    let recon = terms.recon_scale(x) * mse(&t.x_bar, x)?;
    if terms.rho == 0.0 {
        return Ok(recon);
    }
    let mut gen_term = energy.poe_energy(&t.x_tilde)?.mean();
    if terms.entropy_term {
        gen_term -= energy.entropy_approx(&t.x_tilde)?;
    }
    Ok(terms.rho * gen_term + (1.0 - terms.rho) * recon)
}

/// Parts of the generator objective at the current parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VcdObjective {
    pub loss: f64,
    /// `mean E(x̃)`.
    pub energy: f64,
    /// Per-pixel squared error of the reconstruction, whatever the objective's normalization.
    pub recon_mse: f64,
    /// `H̃` of the perturbed batch (zero when the term is off or `ρ = 0`).
    pub entropy: f64,
}

/// Objective and parameter gradients for one transition generator update.
///
/// Minimizes `ρ·(mean E(x̃) - [entropy_term]·H̃(x̃)) + (1-ρ)·recon(x̄, x)`
/// with explicit noise `z` and mask `m`. Encoder and decoder run in train
/// mode; `energy` is only read.
pub fn vcd_generator_grads(
    energy: &EnergyModel,
    g: &mut TransitionGenerator,
    x: &Tensor,
    z: &Tensor,
    m: &Tensor,
    terms: VcdTerms,
) -> Result<(VcdObjective, Gradients)> {
    terms.check()?;
    let (rho, entropy_term) = (terms.rho, terms.entropy_term);
    let recon_scale = terms.recon_scale(x);
    let (h, enc_trace) = g.encoder.trace(x, Mode::Train)?;
    let (x_bar, bar_trace) = g.decoder.trace(&h, Mode::Train)?;
    let recon_mse = mse(&x_bar, x)?;
    let mut obj = VcdObjective {
        recon_mse,
        ..Default::default()
    };

    let scale = 2.0 * (1.0 - rho) * recon_scale / x.len() as f64;
    let d_bar = x_bar.zip_map(x, |p, q| scale * (p - q))?;
    let mut dec_grads = g.decoder.backprop(&bar_trace, &d_bar)?;
    let mut dh = dec_grads.input.take().expect("decoder input gradient");

    if rho > 0.0 {
        let h_tilde = mix_codes(&h, z, m)?;
        let (x_tilde, tilde_trace) = g.decoder.trace(&h_tilde, Mode::Train)?;
        let (logits, critic_trace) = energy.traced_logits(&x_tilde)?;
        let n = x.batch() as f64;
        obj.energy = poe_energy_from_logits(&logits).mean();
        let mut dlogits = poe_energy_grad(&logits).scaled(rho / n);
        if entropy_term {
            obj.entropy = batch_entropy(&logits);
            dlogits.add_assign(&batch_entropy_grad(&logits).scaled(-rho))?;
        }
        let dx_tilde = energy.backprop(&critic_trace, &dlogits, true)?.input.expect("critic input gradient");
        let mut tilde_grads = g.decoder.backprop(&tilde_trace, &dx_tilde)?;
        let dh_tilde = tilde_grads.input.take().expect("decoder input gradient");
        dec_grads.merge(tilde_grads)?;
        // only the unmasked code coordinates flow back into the encoder
        for ((acc, &dt), &mi) in dh.data_mut().iter_mut().zip(dh_tilde.data()).zip(m.data()) {
            *acc += (1.0 - mi) * dt;
        }
        obj.loss = rho * (obj.energy - obj.entropy) + (1.0 - rho) * recon_scale * recon_mse;
    } else {
        obj.loss = recon_scale * recon_mse;
    }

    let enc_grads = g.encoder.backprop_with(&enc_trace, &dh, false)?;
    dec_grads.merge(enc_grads)?;
    Ok((obj, dec_grads))
}

/// Runs `steps` transitions from `x0`; element `t` is the state after `t + 1` steps.
pub fn simulate_chain(g: &TransitionGenerator, x0: &Tensor, steps: usize, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for _ in 0..steps {
        x = g.transition_sample(&x, rng)?.x_tilde;
        out.push(x.clone());
    }
    Ok(out)
}
