//! Exact negative log-likelihood of a small energy against the three-term
//! lower bound, for a loose sampler (uniform box) and an exact one.
//!
//!     cargo run --release --example toy_bound

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::{weighted::WeightedIndex, Distribution};
use vgf::toyeval::{bound_value, QuadratureGrid, Support};
use vgf::Tensor;

fn main() -> vgf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // a two-bump 1D energy on [-4, 4]
    let energy = |x: &[f64]| -((-(x[0] - 1.0).powi(2)).exp() + (-2.0 * (x[0] + 1.5).powi(2)).exp()).ln();
    let grid = QuadratureGrid::new(1, -4.0, 4.0, 512)?;
    let data = Tensor::from_fn(&[200, 1], |_| rng.random_range(-2.0..2.0));
    let q = Tensor::from_fn(&[20_000, 1], |_| rng.random_range(-4.0..4.0));
    let r = bound_value(&energy, &data, &q, grid.uniform_entropy(), &Support::Grid(grid))?;
    println!("continuous, uniform q: nll {:.4}  bound {:.4}  gap {:.4} (+/- {:.4})", r.exact_nll, r.bound, r.gap, 3.0 * r.q_std_error);

    // 8 discrete states; q samples the model distribution itself
    let states = Tensor::from_fn(&[8, 1], |i| i as f64);
    let table = [0.3, 1.2, 0.1, 2.0, 0.7, 0.0, 1.5, 0.9];
    let energy = move |x: &[f64]| table[x[0] as usize];
    let support = Support::Discrete(states);
    let p = support.probabilities(&energy)?;
    let entropy: f64 = -p.iter().map(|p| p * p.ln()).sum::<f64>();
    let pick = WeightedIndex::new(&p).expect("probabilities");
    let q = Tensor::from_fn(&[100_000, 1], |_| pick.sample(&mut rng) as f64);
    let data = Tensor::from_fn(&[50, 1], |i| (i % 8) as f64);
    let r = bound_value(&energy, &data, &q, entropy, &support)?;
    println!("discrete, exact q:     nll {:.4}  bound {:.4}  gap {:+.5}", r.exact_nll, r.bound, r.gap);
    Ok(())
}
