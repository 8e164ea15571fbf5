//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::Graph;
use super::layers::Mode;
use super::tensor::Tensor;
use crate::error::Result;

pub const STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Entry with the largest error, e.g. `phi.0.w[3]`.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, entry: String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = err.max(self.max_rel_error);
            self.worst = entry;
        }
    }
}

/// Checks a scalar function's gradient at `x` by central differences.
pub fn check_scalar_fn(
    name: &str,
    x: &[f64],
    f: impl Fn(&[f64]) -> f64,
    analytic: &[f64],
) -> GradCheckReport {
    let mut report = GradCheckReport::new(name);
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe);
        probe[i] = x[i] - STEP;
        let down = f(&probe);
        probe[i] = x[i];
        report.record(format!("{name}[{i}]"), analytic[i], (up - down) / (2.0 * STEP));
    }
    report
}

fn projected_loss(graph: &Graph, x: &Tensor, mode: Mode, seed: u64, weights: &Tensor) -> Result<f64> {
    let mut g = graph.clone();
    g.reseed(seed);
    let (y, _) = g.trace(x, mode)?;
    Ok(y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
}

/// Checks every parameter (up to `max_entries` per tensor) and the input
/// gradient of `graph` under the loss `sum(c ⊙ graph(x))` with random `c`.
///
/// Stochastic layers are reseeded identically for every evaluation.
pub fn check_graph(graph: &Graph, x: &Tensor, mode: Mode, seed: u64, max_entries: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out_shape = vec![x.batch()];
    out_shape.extend_from_slice(graph.output_shape());
    let weights = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));

    let mut g = graph.clone();
    g.reseed(seed);
    let (_, trace) = g.trace(x, mode)?;
    let grads = g.backprop(&trace, &weights)?;

    let mut report = GradCheckReport::new(graph.name());
    for (name, param) in graph.params() {
        let analytic = &grads.params[&name];
        let picks = pick_entries(param.len(), max_entries, &mut rng);
        for i in picks {
            let mut shifted = graph.clone();
            let eval = |delta: f64, shifted: &mut Graph| -> Result<f64> {
                for (n, p) in shifted.params_mut() {
                    if n == name {
                        p.data_mut()[i] = param.data()[i] + delta;
                    }
                }
                projected_loss(shifted, x, mode, seed, &weights)
            };
            let up = eval(STEP, &mut shifted)?;
            let down = eval(-STEP, &mut shifted)?;
            report.record(format!("{name}[{i}]"), analytic.data()[i], (up - down) / (2.0 * STEP));
        }
    }
    let dx = grads.input.expect("input gradient requested");
    for i in pick_entries(x.len(), max_entries, &mut rng) {
        let mut probe = x.clone();
        probe.data_mut()[i] += STEP;
        let up = projected_loss(graph, &probe, mode, seed, &weights)?;
        probe.data_mut()[i] -= 2.0 * STEP;
        let down = projected_loss(graph, &probe, mode, seed, &weights)?;
        report.record(format!("input[{i}]"), dx.data()[i], (up - down) / (2.0 * STEP));
    }
    Ok(report)
}

fn pick_entries(len: usize, max_entries: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max_entries {
        (0..len).collect()
    } else {
        (0..max_entries).map(|_| rng.random_range(0..len)).collect()
    }
}

/// One small graph per layer type, each checked in train mode (and eval
/// mode where the layer behaves differently).
pub fn layer_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut reports = Vec::new();
    let mut check = |label: &str, graph: Graph, x: Tensor, mode: Mode, rng: &mut ChaCha8Rng| -> Result<()> {
        let s = rng.random();
        let mut rep = check_graph(&graph, &x, mode, s, 64)?;
        rep.name = label.to_string();
        reports.push(rep);
        Ok(())
    };

    let vec_in = |rng: &mut ChaCha8Rng, n: usize, d: usize| Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
    let img_in = |rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize| {
        Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0..1.0))
    };

    let g = Graph::builder("dense", &[5]).dense(4, r).build(r)?;
    let x = vec_in(r, 3, 5);
    check("dense", g, x, Mode::Train, r)?;

    for (label, g) in [
        ("relu", Graph::builder("relu", &[6]).dense(6, r).relu().dense(3, r).build(r)?),
        ("tanh", Graph::builder("tanh", &[6]).dense(6, r).tanh().build(r)?),
        ("sigmoid", Graph::builder("sigmoid", &[6]).dense(6, r).sigmoid().build(r)?),
    ] {
        let x = vec_in(r, 4, 6);
        check(label, g, x, Mode::Train, r)?;
    }

    let g = Graph::builder("conv2d", &[2, 8, 8]).conv(3, 5, 1, 0, r).build(r)?;
    let x = img_in(r, 2, 2, 8, 8);
    check("conv2d", g, x, Mode::Train, r)?;

    let g = Graph::builder("conv2d_pad", &[1, 6, 6]).conv(2, 3, 2, 1, r).build(r)?;
    let x = img_in(r, 2, 1, 6, 6);
    check("conv2d_strided_padded", g, x, Mode::Train, r)?;

    let g = Graph::builder("deconv", &[3, 4, 4]).conv_transpose(2, 5, 2, 2, 1, r).build(r)?;
    let x = img_in(r, 2, 3, 4, 4);
    check("conv_transpose2d", g, x, Mode::Train, r)?;

    let g = Graph::builder("pool", &[2, 6, 6]).max_pool().flatten().dense(3, r).build(r)?;
    let x = img_in(r, 2, 2, 6, 6);
    check("maxpool2", g, x, Mode::Train, r)?;

    let mut g = Graph::builder("bn1d", &[5]).dense(5, r).batch_norm().tanh().build(r)?;
    let x = vec_in(r, 4, 5);
    check("batchnorm_train", g.clone(), x.clone(), Mode::Train, r)?;
    // give the running statistics non-trivial values before checking eval mode
    g.forward(&x, Mode::Train)?;
    check("batchnorm_eval", g, x, Mode::Eval, r)?;

    let g = Graph::builder("bn2d", &[2, 4, 4]).batch_norm().flatten().dense(3, r).build(r)?;
    let x = img_in(r, 3, 2, 4, 4);
    check("batchnorm_spatial", g, x, Mode::Train, r)?;

    let g = Graph::builder("reshape", &[8]).reshape(&[2, 2, 2]).conv(2, 1, 1, 0, r).flatten().build(r)?;
    let x = vec_in(r, 2, 8);
    check("reshape", g, x, Mode::Train, r)?;

    let g = Graph::builder("dropout", &[6]).dense(6, r).dropout(0.5).dense(2, r).build(r)?;
    let x = vec_in(r, 4, 6);
    check("dropout", g, x, Mode::Train, r)?;

    let g = Graph::builder("noise", &[6]).gaussian_noise(0.3).dense(6, r).tanh().build(r)?;
    let x = vec_in(r, 4, 6);
    check("gaussian_noise", g, x, Mode::Train, r)?;

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_matches_finite_differences() {
        for seed in [1, 2, 3] {
            for rep in layer_suite(seed).unwrap() {
                assert!(rep.checked > 0, "{}", rep.name);
                assert!(
                    rep.max_rel_error < 1e-4,
                    "{} seed {seed}: {:.3e} at {}",
                    rep.name,
                    rep.max_rel_error,
                    rep.worst
                );
            }
        }
    }

    #[test]
    fn scalar_check_detects_a_wrong_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let good = check_scalar_fn("f", &[1.5, -2.0], f, &[3.0, 3.0]);
        assert!(good.max_rel_error < 1e-8);
        let bad = check_scalar_fn("f", &[1.5, -2.0], f, &[3.0, 2.0]);
        assert!(bad.max_rel_error > 0.1);
    }
}
