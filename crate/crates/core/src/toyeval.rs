//! Exact evaluation of low-dimensional energies by quadrature or enumeration.

use std::path::Path;

use serde::Serialize;

use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::ndiff::Tensor;

/// Anything that assigns an energy to each row of an `n x dims` point matrix.
pub trait PointEnergy {
    fn energies(&self, points: &Tensor) -> Result<Vec<f64>>;
}

impl<F: Fn(&[f64]) -> f64> PointEnergy for F {
    fn energies(&self, points: &Tensor) -> Result<Vec<f64>> {
        Ok((0..points.batch()).map(|i| self(points.row(i))).collect())
    }
}

impl PointEnergy for EnergyModel {
    fn energies(&self, points: &Tensor) -> Result<Vec<f64>> {
        let mut shape = vec![points.batch()];
        shape.extend_from_slice(self.phi.input_shape());
        Ok(self.poe_energy(&points.clone().reshape(&shape)?)?.into_data())
    }
}

/// Energies in chunks, to bound memory on fine grids.
fn energies_chunked(energy: &impl PointEnergy, points: &Tensor) -> Result<Vec<f64>> {
    const CHUNK: usize = 4096;
    let mut out = Vec::with_capacity(points.batch());
    for start in (0..points.batch()).step_by(CHUNK) {
        let end = (start + CHUNK).min(points.batch());
        out.extend(energy.energies(&points.slice_batch(start, end)?)?);
    }
    if out.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("energy on evaluation points".into()));
    }
    Ok(out)
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Tensor-product trapezoid grid over `[lo, hi]^dims`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureGrid {
    pub dims: usize,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl QuadratureGrid {
    pub fn new(dims: usize, lo: f64, hi: f64, points: usize) -> Result<Self> {
        if !(dims == 1 || dims == 2) {
            return Err(Error::invalid(format!("quadrature supports 1 or 2 dims, got {dims}")));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("grid range [{lo}, {hi}] is empty")));
        }
        if points < 16 {
            return Err(Error::invalid(format!("grid needs at least 16 points per dim, got {points}")));
        }
        Ok(Self { dims, lo, hi, points })
    }

    /// Same box at twice the resolution.
    pub fn refined(&self) -> Self {
        Self {
            points: 2 * self.points,
            ..self.clone()
        }
    }

    fn axis(&self) -> (Vec<f64>, Vec<f64>) {
        let h = (self.hi - self.lo) / (self.points - 1) as f64;
        let nodes = (0..self.points).map(|i| self.lo + h * i as f64).collect();
        let weights = (0..self.points)
            .map(|i| if i == 0 || i == self.points - 1 { h / 2.0 } else { h })
            .collect();
        (nodes, weights)
    }

    /// Grid nodes as an `n x dims` matrix with matching quadrature weights.
    pub fn nodes(&self) -> (Tensor, Vec<f64>) {
        let (x, w) = self.axis();
        if self.dims == 1 {
            return (Tensor::new(vec![x.len(), 1], x).expect("grid shape"), w);
        }
        let n = self.points;
        let mut pts = Vec::with_capacity(2 * n * n);
        let mut wts = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                pts.extend([x[i], x[j]]);
                wts.push(w[i] * w[j]);
            }
        }
        (Tensor::new(vec![n * n, 2], pts).expect("grid shape"), wts)
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dims && p.iter().all(|&v| v >= self.lo && v <= self.hi)
    }

    /// `ln(hi - lo)^dims`, the entropy of the uniform density on the box.
    pub fn uniform_entropy(&self) -> f64 {
        self.dims as f64 * (self.hi - self.lo).ln()
    }
}

/// `ln Σ w_i e^{-E(x_i)}` on the grid, without the refinement check.
pub fn log_partition_on(energy: &impl PointEnergy, grid: &QuadratureGrid) -> Result<f64> {
    let (pts, w) = grid.nodes();
    let e = energies_chunked(energy, &pts)?;
    Ok(log_sum_exp(e.iter().zip(&w).map(|(e, w)| w.ln() - e)))
}

/// Refinement tolerance of [`exact_log_partition`].
pub const REFINE_TOL: f64 = 1e-3;

/// Trapezoid `ln ∫ e^{-E}` with max-shift; fails if doubling the resolution
/// moves the value by more than [`REFINE_TOL`].
pub fn exact_log_partition(energy: &impl PointEnergy, grid: &QuadratureGrid) -> Result<f64> {
    let coarse = log_partition_on(energy, grid)?;
    let fine = log_partition_on(energy, &grid.refined())?;
    let delta = (fine - coarse).abs();
    if delta > REFINE_TOL {
        return Err(Error::GridTooCoarse { delta });
    }
    Ok(coarse)
}

/// Where a model's normalizer is computed: a continuous box or a finite state set.
#[derive(Clone, Debug)]
pub enum Support {
    Grid(QuadratureGrid),
    /// Every state of a discrete space, one per row.
    Discrete(Tensor),
}

impl Support {
    pub fn log_partition(&self, energy: &impl PointEnergy) -> Result<f64> {
        match self {
            Support::Grid(g) => exact_log_partition(energy, g),
            Support::Discrete(states) => {
                let e = energies_chunked(energy, states)?;
                Ok(log_sum_exp(e.iter().map(|e| -e)))
            }
        }
    }

    fn check_data(&self, data: &Tensor) -> Result<()> {
        if let Support::Grid(g) = self {
            if let Some(i) = (0..data.batch()).find(|&i| !g.contains(data.row(i))) {
                return Err(Error::invalid(format!("data point {i} {:?} lies outside the grid", data.row(i))));
            }
        }
        Ok(())
    }

    /// Exact probabilities of each discrete state under `e^{-E}/Z`.
    pub fn probabilities(&self, energy: &impl PointEnergy) -> Result<Vec<f64>> {
        match self {
            Support::Grid(_) => Err(Error::invalid("probabilities need a discrete support")),
            Support::Discrete(states) => {
                let e = energies_chunked(energy, states)?;
                let log_z = log_sum_exp(e.iter().map(|e| -e));
                Ok(e.iter().map(|e| (-e - log_z).exp()).collect())
            }
        }
    }
}

fn mean_energy(energy: &impl PointEnergy, x: &Tensor) -> Result<(f64, Vec<f64>)> {
    if x.batch() == 0 {
        return Err(Error::invalid("empty sample set"));
    }
    let e = energies_chunked(energy, x)?;
    Ok((e.iter().sum::<f64>() / e.len() as f64, e))
}

/// `mean E(data) + ln Z`.
pub fn exact_nll(energy: &impl PointEnergy, data: &Tensor, support: &Support) -> Result<f64> {
    support.check_data(data)?;
    Ok(mean_energy(energy, data)?.0 + support.log_partition(energy)?)
}

/// The three-term lower bound next to the exact value it bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub data_term: f64,
    pub q_term: f64,
    pub entropy: f64,
    pub bound: f64,
    pub exact_nll: f64,
    pub gap: f64,
    /// Monte-Carlo standard error of `q_term`.
    pub q_std_error: f64,
    pub q_samples: usize,
}

impl BoundReport {
    /// Jensen holds up to `sigmas` Monte-Carlo standard errors.
    pub fn holds(&self, sigmas: f64) -> bool {
        self.bound <= self.exact_nll + sigmas * self.q_std_error
    }
}

/// `mean E(data) - mean_q E + H(q)` with `q_entropy` the known entropy of
/// the distribution that produced `q_samples`.
pub fn bound_value(
    energy: &impl PointEnergy,
    data: &Tensor,
    q_samples: &Tensor,
    q_entropy: f64,
    support: &Support,
) -> Result<BoundReport> {
    let (data_term, _) = mean_energy(energy, data)?;
    let (q_term, qe) = mean_energy(energy, q_samples)?;
    let n = qe.len() as f64;
    let var = if qe.len() > 1 {
        qe.iter().map(|e| (e - q_term).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let exact = exact_nll(energy, data, support)?;
    let bound = data_term - q_term + q_entropy;
    Ok(BoundReport {
        data_term,
        q_term,
        entropy: q_entropy,
        bound,
        exact_nll: exact,
        gap: exact - bound,
        q_std_error: (var / n).sqrt(),
        q_samples: qe.len(),
    })
}

pub fn write_bound_csv(reports: &[BoundReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Fraction of samples within `radius` of each center (nearest center wins).
#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    pub fractions: Vec<f64>,
    pub unassigned: f64,
}

impl Coverage {
    /// Modes holding at least `min_fraction` of the samples.
    pub fn modes_covered(&self, min_fraction: f64) -> usize {
        self.fractions.iter().filter(|&&f| f >= min_fraction).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["mode", "fraction"])?;
        for (i, f) in self.fractions.iter().enumerate() {
            w.write_record([i.to_string(), f.to_string()])?;
        }
        w.write_record(["unassigned".to_string(), self.unassigned.to_string()])?;
        w.flush()?;
        Ok(())
    }
}

pub fn mode_coverage(samples: &Tensor, centers: &[[f64; 2]], radius: f64) -> Result<Coverage> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("coverage radius {radius} must be > 0")));
    }
    if samples.row_len() != 2 {
        return Err(Error::invalid(format!("coverage needs 2D samples, got {:?}", samples.shape())));
    }
    let n = samples.batch();
    let mut counts = vec![0usize; centers.len()];
    let mut unassigned = 0usize;
    for i in 0..n {
        let p = samples.row(i);
        let nearest = centers
            .iter()
            .enumerate()
            .map(|(j, c)| (j, (p[0] - c[0]).hypot(p[1] - c[1])))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match nearest {
            Some((j, d)) if d <= radius => counts[j] += 1,
            _ => unassigned += 1,
        }
    }
    Ok(Coverage {
        fractions: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        unassigned: unassigned as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth, SynthSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

    fn grid1(lo: f64, hi: f64, n: usize) -> QuadratureGrid {
        QuadratureGrid::new(1, lo, hi, n).unwrap()
    }

    #[test]
    fn constant_energies() {
        let g = grid1(0.0, 1.0, 64);
        assert!(exact_log_partition(&|_: &[f64]| 0.0, &g).unwrap().abs() < 1e-12);
        assert!((exact_log_partition(&|_: &[f64]| 2.5, &g).unwrap() + 2.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_partition() {
        let lz = exact_log_partition(&|x: &[f64]| x[0] * x[0] / 2.0, &grid1(-8.0, 8.0, 512)).unwrap();
        assert!((lz - HALF_LN_TAU).abs() < 1e-4, "{lz}");
        let g2 = QuadratureGrid::new(2, -8.0, 8.0, 256).unwrap();
        let lz2 = exact_log_partition(&|x: &[f64]| (x[0] * x[0] + x[1] * x[1]) / 2.0, &g2).unwrap();
        assert!((lz2 - 2.0 * HALF_LN_TAU).abs() < 1e-4, "{lz2}");
    }

    #[test]
    fn coarse_grid_is_flagged() {
        let sharp = |x: &[f64]| (x[0] - 0.013).powi(2) / (2.0 * 0.01f64.powi(2));
        let err = exact_log_partition(&sharp, &grid1(-3.0, 3.0, 16)).unwrap_err();
        assert!(matches!(err, Error::GridTooCoarse { .. }));
    }

    #[test]
    fn refinement_error_shrinks() {
        let e = |x: &[f64]| (x[0] - 0.3).powi(2) + 0.5 * x[0].sin();
        let lz = |n| log_partition_on(&e, &grid1(-1.5, 2.0, n)).unwrap();
        let d: Vec<f64> = [64, 128, 256].iter().map(|&n| (lz(n) - lz(2 * n)).abs()).collect();
        assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
    }

    #[test]
    fn nll_examples() {
        let g = Support::Grid(grid1(0.0, 1.0, 64));
        let data = Tensor::new(vec![3, 1], vec![0.1, 0.5, 0.9]).unwrap();
        assert!(exact_nll(&|_: &[f64]| 0.0, &data, &g).unwrap().abs() < 1e-12);

        let wide = Support::Grid(grid1(-8.0, 8.0, 512));
        let at_zero = Tensor::zeros(&[1, 1]);
        let nll = exact_nll(&|x: &[f64]| x[0] * x[0] / 2.0, &at_zero, &wide).unwrap();
        assert!((nll - HALF_LN_TAU).abs() < 1e-4);

        let outside = Tensor::full(&[1, 1], 9.0);
        assert!(exact_nll(&|x: &[f64]| x[0] * x[0] / 2.0, &outside, &wide).is_err());
    }

    #[test]
    fn nll_is_shift_invariant() {
        let s = Support::Grid(grid1(-4.0, 4.0, 256));
        let data = Tensor::new(vec![2, 1], vec![-0.5, 1.25]).unwrap();
        let e = |x: &[f64]| (x[0] * 1.3).cosh().ln();
        let a = exact_nll(&e, &data, &s).unwrap();
        let b = exact_nll(&|x: &[f64]| e(x) + 7.25, &data, &s).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} {b}");
    }

    #[test]
    fn flat_energy_uniform_q_has_zero_gap() {
        let g = grid1(0.0, 1.0, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = Tensor::from_fn(&[1000, 1], |_| rng.random_range(0.0..1.0));
        let data = Tensor::full(&[1, 1], 0.5);
        let r = bound_value(&|_: &[f64]| 0.0, &data, &q, g.uniform_entropy(), &Support::Grid(g)).unwrap();
        assert!(r.bound.abs() < 1e-12 && r.gap.abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn uniform_q_against_gaussian_energy_has_positive_gap() {
        let g = grid1(-5.0, 5.0, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::from_fn(&[20_000, 1], |_| rng.random_range(-5.0..5.0));
        let data = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let r = bound_value(&|x: &[f64]| x[0] * x[0] / 2.0, &data, &q, g.uniform_entropy(), &Support::Grid(g)).unwrap();
        // ln √(2π) + E_q[x²/2] - ln 10 = 0.918939 + 25/6 - 2.302585
        assert!((r.gap - 2.783021).abs() < 5.0 * r.q_std_error, "{r:?}");
        assert!(r.holds(3.0));
        assert!(bound_value(&|_: &[f64]| 0.0, &data, &Tensor::zeros(&[0, 1]), 0.0, &Support::Discrete(data.clone())).is_err());
    }

    #[test]
    fn coverage_examples() {
        let spec = SynthSpec::ring(8, 0.05, 10_000);
        let centers = spec.centers();
        let all_first = Tensor::from_fn(&[50, 2], |i| centers[0][i % 2]);
        let c = mode_coverage(&all_first, &centers, 0.15).unwrap();
        assert_eq!(c.fractions[0], 1.0);
        assert!(c.fractions[1..].iter().all(|&f| f == 0.0));

        let exact = Tensor::from_fn(&[80, 2], |i| centers[(i / 2) % 8][i % 2]);
        assert!(mode_coverage(&exact, &centers, 0.15).unwrap().fractions.iter().all(|&f| f == 0.125));

        let d = synth(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let pts = d.images.reshape(&[10_000, 2]).unwrap();
        let c = mode_coverage(&pts, &centers, 0.15).unwrap();
        assert!(c.fractions.iter().all(|f| (f - 0.125).abs() < 0.02), "{c:?}");
        assert!(mode_coverage(&pts, &centers, 0.0).is_err());
    }
}
