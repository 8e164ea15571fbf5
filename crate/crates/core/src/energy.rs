//! Energy functions over a learned feature map `φ`.
//!
//! Two heads share the same feature-network plumbing:
//!
//! * [`EnergyModel`]: bounded multi-modal product of experts,
//!   `E(x) = Σ_j H(σ(W_jᵀφ(x) + b_j))`, with `0 ≤ E ≤ K·ln 2`.
//! * [`GanEnergyHead`]: the single-unit discriminator energy `E(x) = -ln σ(wᵀφ(x) + b)`.
//!
//! Entropies are in nats and are evaluated directly from logits, so
//! saturated experts reach energies far below any probability clamp.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndiff::gradcheck::{check_scalar_fn, GradCheckReport};
use crate::ndiff::{sigmoid, Gradients, Graph, Mode, Tensor, Trace};

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `x ln x` with the `0 ln 0 = 0` convention.
fn xlnx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Entropy in nats of a Bernoulli(p) variable.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    Ok(-xlnx(p) - xlnx(1.0 - p))
}

/// `H(σ(a))` computed from the logit; exact for saturated `a`.
pub fn logit_entropy(a: f64) -> f64 {
    sigmoid(a) * softplus(-a) + sigmoid(-a) * softplus(a)
}

/// Per-sample product-of-experts energies from an `N x K` logit matrix.
pub fn poe_energy_from_logits(logits: &Tensor) -> Tensor {
    let n = logits.batch();
    Tensor::from_fn(&[n], |i| logits.row(i).iter().map(|&a| logit_entropy(a)).sum())
}

/// `∂E_i/∂a_ij = -a·σ(a)·σ(-a)`.
pub fn poe_energy_grad(logits: &Tensor) -> Tensor {
    logits.map(|a| -a * sigmoid(a) * sigmoid(-a))
}

/// Per-expert batch means of `σ(a)` and `σ(-a)`; the second is `1 - p̄` without cancellation.
fn expert_means(logits: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, k) = (logits.batch(), logits.row_len());
    let mut on = vec![0.0; k];
    let mut off = vec![0.0; k];
    for i in 0..n {
        for (j, &a) in logits.row(i).iter().enumerate() {
            on[j] += sigmoid(a);
            off[j] += sigmoid(-a);
        }
    }
    on.iter_mut().chain(off.iter_mut()).for_each(|v| *v /= n as f64);
    (on, off)
}

/// Batch entropy surrogate `Σ_j H(mean_i σ(a_ij))`.
pub fn batch_entropy(logits: &Tensor) -> f64 {
    let (on, off) = expert_means(logits);
    on.iter().zip(&off).map(|(&p, &q)| -xlnx(p) - xlnx(q)).sum()
}

/// Gradient of [`batch_entropy`] w.r.t. the logits.
pub fn batch_entropy_grad(logits: &Tensor) -> Tensor {
    let (n, k) = (logits.batch(), logits.row_len());
    let (on, off) = expert_means(logits);
    // floor only guards underflow of a mean to exactly zero
    let slope: Vec<f64> = on
        .iter()
        .zip(&off)
        .map(|(&p, &q)| (q.max(f64::MIN_POSITIVE) / p.max(f64::MIN_POSITIVE)).ln())
        .collect();
    let mut g = logits.clone();
    for i in 0..n {
        for j in 0..k {
            let a = logits.row(i)[j];
            g.row_mut(i)[j] = slope[j] * sigmoid(a) * sigmoid(-a) / n as f64;
        }
    }
    g
}

/// Per-sample `-ln σ(a)` from an `N x 1` logit matrix.
pub fn gan_energy_from_logits(logits: &Tensor) -> Tensor {
    Tensor::from_fn(&[logits.batch()], |i| softplus(-logits.row(i)[0]))
}

/// Intermediates of a `φ` + head evaluation.
#[derive(Clone, Debug)]
pub struct CriticTrace {
    phi: Trace,
    head: Trace,
}

fn check_head(phi: &Graph, head: &Graph) -> Result<()> {
    if head.input_shape() != phi.output_shape() {
        return Err(Error::shape("energy head input", phi.output_shape(), head.input_shape()));
    }
    if phi.output_shape().len() != 1 || head.output_shape().len() != 1 {
        return Err(Error::invalid("feature map and head must produce flat vectors"));
    }
    if phi.is_stochastic() || head.is_stochastic() {
        return Err(Error::invalid("energy networks must be deterministic"));
    }
    if phi.layers().iter().chain(head.layers()).any(|l| l.kind() == "batchnorm") {
        // normalizing real and generated batches separately would give them different energy functions
        return Err(Error::invalid("energy networks must not contain batch normalization"));
    }
    Ok(())
}

/// Shared mechanics of a feature network followed by a linear head.
pub trait Critic {
    fn phi(&self) -> &Graph;
    fn head(&self) -> &Graph;
    fn phi_mut(&mut self) -> &mut Graph;
    fn head_mut(&mut self) -> &mut Graph;

    /// Pure evaluation of the head pre-activations, `N x width`.
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head().infer(&self.phi().infer(x)?)
    }

    /// Head pre-activations with the trace needed by [`Critic::backprop`].
    fn traced_logits(&self, x: &Tensor) -> Result<(Tensor, CriticTrace)> {
        let (feat, phi) = self.phi().trace_frozen(x, Mode::Eval)?;
        let (logits, head) = self.head().trace_frozen(&feat, Mode::Eval)?;
        Ok((logits, CriticTrace { phi, head }))
    }

    /// Gradients of `Σ dlogits ⊙ logits` w.r.t. every parameter and, when asked, the input.
    fn backprop(&self, trace: &CriticTrace, dlogits: &Tensor, want_input: bool) -> Result<Gradients> {
        let head = self.head().backprop(&trace.head, dlogits)?;
        let dfeat = head.input.clone().expect("head input gradient");
        let mut phi = self.phi().backprop_with(&trace.phi, &dfeat, want_input)?;
        phi.merge(Gradients {
            params: head.params,
            input: None,
        })?;
        Ok(phi)
    }

    fn state(&self) -> Vec<(String, &Tensor)> {
        let mut s = self.phi().state();
        s.extend(self.head().state());
        s
    }

    fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.phi_mut().load_state(tensors)?;
        self.head_mut().load_state(tensors)
    }

    fn checksum(&self) -> u64 {
        self.phi().checksum() ^ self.head().checksum().rotate_left(1)
    }
}

/// Product-of-experts energy with `K` experts on top of `φ`.
#[derive(Clone, Debug)]
pub struct EnergyModel {
    pub phi: Graph,
    /// Single dense layer `d_phi -> K` holding `W` and `b`.
    pub experts: Graph,
}

impl EnergyModel {
    pub fn new(phi: Graph, experts: Graph) -> Result<Self> {
        check_head(&phi, &experts)?;
        Ok(Self { phi, experts })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.output_shape()[0]
    }

    /// Upper bound `K·ln 2` of the energy.
    pub fn max_energy(&self) -> f64 {
        self.num_experts() as f64 * std::f64::consts::LN_2
    }

    /// Per-sample energies of a batch.
    pub fn poe_energy(&self, x: &Tensor) -> Result<Tensor> {
        Ok(poe_energy_from_logits(&self.logits(x)?))
    }

    /// `Σ_j H(mean_i σ_j(x^i))` over a batch (generated or data).
    pub fn entropy_approx(&self, batch: &Tensor) -> Result<f64> {
        if batch.rank() == 0 || batch.batch() == 0 {
            return Err(Error::invalid("entropy approximation needs a non-empty batch"));
        }
        Ok(batch_entropy(&self.logits(batch)?))
    }

    /// The same surrogate applied to a data batch, used as a regularizer of `E`.
    pub fn data_entropy_reg(&self, data: &Tensor) -> Result<f64> {
        self.entropy_approx(data)
    }
}

impl Critic for EnergyModel {
    fn phi(&self) -> &Graph {
        &self.phi
    }
    fn head(&self) -> &Graph {
        &self.experts
    }
    fn phi_mut(&mut self) -> &mut Graph {
        &mut self.phi
    }
    fn head_mut(&mut self) -> &mut Graph {
        &mut self.experts
    }
}

/// Discriminator `D(x) = σ(wᵀφ(x) + b)` read as the energy `-ln D(x)`.
#[derive(Clone, Debug)]
pub struct GanEnergyHead {
    pub phi: Graph,
    /// Single dense layer `d_phi -> 1`.
    pub unit: Graph,
}

impl GanEnergyHead {
    pub fn new(phi: Graph, unit: Graph) -> Result<Self> {
        check_head(&phi, &unit)?;
        if unit.output_shape() != [1] {
            return Err(Error::shape("discriminator output", &[1], unit.output_shape()));
        }
        Ok(Self { phi, unit })
    }

    /// Per-sample `-ln D(x)`.
    pub fn gan_energy(&self, x: &Tensor) -> Result<Tensor> {
        Ok(gan_energy_from_logits(&self.logits(x)?))
    }

    pub fn probability(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.logits(x)?.reshape(&[x.batch()])?.map(sigmoid))
    }
}

impl Critic for GanEnergyHead {
    fn phi(&self) -> &Graph {
        &self.phi
    }
    fn head(&self) -> &Graph {
        &self.unit
    }
    fn phi_mut(&mut self) -> &mut Graph {
        &mut self.phi
    }
    fn head_mut(&mut self) -> &mut Graph {
        &mut self.unit
    }
}

/// Logit-space objective and its gradient, as used by the head checks.
type HeadLoss = fn(&Tensor) -> (f64, Tensor);

fn poe_objective(logits: &Tensor) -> (f64, Tensor) {
    let n = logits.batch() as f64;
    let value = poe_energy_from_logits(logits).mean() - batch_entropy(logits);
    let mut g = poe_energy_grad(logits).scaled(1.0 / n);
    g.add_assign(&batch_entropy_grad(logits).scaled(-1.0)).expect("same shape");
    (value, g)
}

fn gan_objective(logits: &Tensor) -> (f64, Tensor) {
    let n = logits.batch() as f64;
    (gan_energy_from_logits(logits).mean(), logits.map(|a| -sigmoid(-a) / n))
}

fn check_critic<C: Critic + Clone>(label: &str, critic: &C, x: &Tensor, loss: HeadLoss) -> Result<GradCheckReport> {
    let (logits, trace) = critic.traced_logits(x)?;
    let grads = critic.backprop(&trace, &loss(&logits).1, true)?;
    let value = |c: &C, x: &Tensor| -> Result<f64> { Ok(loss(&c.logits(x)?).0) };

    let mut names = Vec::new();
    let mut analytic = Vec::new();
    let mut base = Vec::new();
    for (name, p) in critic.phi().params().into_iter().chain(critic.head().params()) {
        for (i, &v) in p.data().iter().enumerate() {
            names.push((name.clone(), i));
            analytic.push(grads.params[&name].data()[i]);
            base.push(v);
        }
    }
    let n_params = base.len();
    base.extend_from_slice(x.data());
    analytic.extend_from_slice(grads.input.as_ref().expect("input gradient").data());

    let eval = |theta: &[f64]| -> f64 {
        let mut c = critic.clone();
        let mut k = 0;
        for head in [false, true] {
            let g = if head { c.head_mut() } else { c.phi_mut() };
            for (_, p) in g.params_mut() {
                for v in p.data_mut() {
                    *v = theta[k];
                    k += 1;
                }
            }
        }
        let xs = Tensor::new(x.shape().to_vec(), theta[n_params..].to_vec()).expect("input shape");
        value(&c, &xs).expect("finite objective")
    };
    let mut report = check_scalar_fn(label, &base, eval, &analytic);
    report.name = label.to_string();
    if report.worst.contains('[') {
        let idx: usize = report.worst.rsplit('[').next().unwrap_or("0]").trim_end_matches(']').parse().unwrap_or(0);
        report.worst = match names.get(idx) {
            Some((n, i)) => format!("{n}[{i}]"),
            None => format!("input[{}]", idx - n_params),
        };
    }
    Ok(report)
}

/// Finite-difference checks of both heads over every parameter and input:
/// `mean E - H̃` for the product of experts and `mean -ln D` for the discriminator.
pub fn head_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = |rng: &mut ChaCha8Rng| Graph::builder("phi", &[3]).dense(5, rng).tanh().build(rng);
    let x = Tensor::from_fn(&[6, 3], |_| rng.random_range(-1.5..1.5));
    let p = phi(&mut rng)?;
    let experts = Graph::builder("experts", &[5]).dense(4, &mut rng).build(&mut rng)?;
    let poe = EnergyModel::new(p, experts)?;
    let p = phi(&mut rng)?;
    let unit = Graph::builder("disc", &[5]).dense(1, &mut rng).build(&mut rng)?;
    let gan = GanEnergyHead::new(p, unit)?;
    Ok(vec![
        check_critic("poe_head", &poe, &x, poe_objective)?,
        check_critic("gan_head", &gan, &x, gan_objective)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::gradcheck::check_scalar_fn;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn logits(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn both_heads_pass_finite_differences() {
        for seed in 1..=3 {
            for r in head_checks(seed).unwrap() {
                assert!(r.max_rel_error < 1e-4, "{} {} at {}", r.name, r.max_rel_error, r.worst);
                assert!(r.checked > 40);
            }
        }
    }

    #[test]
    fn binary_entropy_values() {
        assert!((binary_entropy(0.5).unwrap() - LN2).abs() < 1e-15);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        // -0.1 ln 0.1 - 0.9 ln 0.9
        assert!((binary_entropy(0.1).unwrap() - 0.325083).abs() < 1e-6);
        assert!(binary_entropy(-0.01).is_err());
        assert!(binary_entropy(1.5).is_err());
    }

    #[test]
    fn logit_entropy_agrees_with_probability_form() {
        for a in [-5.0, -1.0, 0.0, 0.3, 2.0, 9.0] {
            let p = sigmoid(a);
            assert!((logit_entropy(a) - binary_entropy(p).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn poe_energy_examples() {
        let e = poe_energy_from_logits(&logits(&[vec![0.0; 7]]));
        assert!((e.data()[0] - 7.0 * LN2).abs() < 1e-15);
        let e = poe_energy_from_logits(&logits(&[vec![60.0, -60.0, 60.0]]));
        assert!(e.data()[0] < 1e-20);
        // σ(ln 9) = 0.9
        let e = poe_energy_from_logits(&logits(&[vec![0.0, 9f64.ln()]]));
        assert!((e.data()[0] - 1.018230).abs() < 1e-6);
    }

    #[test]
    fn gan_energy_examples() {
        let e = gan_energy_from_logits(&logits(&[vec![0.0], vec![50.0], vec![-2.0]]));
        assert!((e.data()[0] - LN2).abs() < 1e-15);
        assert!(e.data()[1] < 1e-20);
        assert!((e.data()[2] - 2.126928).abs() < 1e-6);
    }

    #[test]
    fn batch_entropy_examples() {
        // one expert, activations {0.2, 0.6}: σ⁻¹(p) = ln(p / (1 - p))
        let a = |p: f64| (p / (1.0 - p)).ln();
        let h = batch_entropy(&logits(&[vec![a(0.2)], vec![a(0.6)]]));
        assert!((h - 0.673012).abs() < 1e-6, "{h}");
        let collapsed = batch_entropy(&logits(&[vec![40.0, 40.0], vec![40.0, 40.0]]));
        assert!(collapsed < 1e-14);
        let spread = batch_entropy(&logits(&[vec![3.0, -1.0, 0.0], vec![-3.0, 1.0, 0.0]]));
        assert!((spread - 3.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn batch_entropy_single_sample_equals_energy() {
        let row = vec![0.4, -2.0, 1.3, 7.0];
        let a = logits(&[row]);
        assert!((batch_entropy(&a) - poe_energy_from_logits(&a).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let rows = vec![vec![0.3, -1.2, 2.5], vec![-0.7, 0.1, 4.0], vec![1.9, -3.3, -0.4]];
        let a = logits(&rows);
        let flat = a.data().to_vec();
        let shape = a.shape().to_vec();
        let with = |x: &[f64]| Tensor::new(shape.clone(), x.to_vec()).unwrap();

        let rep = check_scalar_fn("poe", &flat, |x| poe_energy_from_logits(&with(x)).sum(), poe_energy_grad(&a).data());
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        let rep = check_scalar_fn("entropy", &flat, |x| batch_entropy(&with(x)), batch_entropy_grad(&a).data());
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn energy_gradient_vanishes_at_saturation() {
        let peak = (0..=2000)
            .map(|i| -2.0 + 4.0 * i as f64 / 2000.0)
            .map(|a| poe_energy_grad(&logits(&[vec![a]])).data()[0].abs())
            .fold(0.0, f64::max);
        for a in [20.0, -20.0] {
            let g = poe_energy_grad(&logits(&[vec![a]])).data()[0].abs();
            assert!(g < 1e-6 * peak, "{g} vs peak {peak}");
        }
    }

    #[test]
    fn rejects_batchnorm_in_energy() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let phi = Graph::builder("phi", &[2]).dense(4, &mut r).batch_norm().build(&mut r).unwrap();
        let head = Graph::builder("experts", &[4]).dense(3, &mut r).build(&mut r).unwrap();
        assert!(EnergyModel::new(phi, head).is_err());
    }

    #[test]
    fn entropy_approx_rejects_mismatched_batch() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let phi = Graph::builder("phi", &[2]).dense(4, &mut r).relu().build(&mut r).unwrap();
        let head = Graph::builder("experts", &[4]).dense(3, &mut r).build(&mut r).unwrap();
        let m = EnergyModel::new(phi, head).unwrap();
        assert!(m.entropy_approx(&Tensor::zeros(&[2, 3])).is_err());
    }

    proptest! {
        #[test]
        fn batch_entropy_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-8.0f64..8.0, 3), 2..6),
            rot in 0usize..6,
        ) {
            let a = logits(&rows);
            let mut shuffled = rows.clone();
            let r = rot % rows.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
            let b = logits(&shuffled);
            prop_assert!((batch_entropy(&a) - batch_entropy(&b)).abs() < 1e-12);
        }

        #[test]
        fn energy_is_bounded(row in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let k = row.len() as f64;
            let e = poe_energy_from_logits(&logits(&[row])).data()[0];
            prop_assert!(e >= 0.0 && e <= k * LN2 + 1e-12);
        }
    }
}
