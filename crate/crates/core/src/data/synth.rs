use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::ndiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Modes equally spaced on a circle.
    Ring,
    /// Modes on a square lattice spanning `[-radius, radius]²`.
    Grid,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" | "ring-mixture" => Ok(SynthKind::Ring),
            "grid" | "grid-mixture" => Ok(SynthKind::Grid),
            other => Err(Error::Config(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

/// Isotropic 2D Gaussian mixture with equal weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub modes: usize,
    pub sigma: f64,
    pub n: usize,
    pub radius: f64,
}

impl SynthSpec {
    pub fn ring(modes: usize, sigma: f64, n: usize) -> Self {
        Self {
            kind: SynthKind::Ring,
            modes,
            sigma,
            n,
            radius: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 {
            return Err(Error::invalid("mixture needs at least one mode"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma {} must be > 0", self.sigma)));
        }
        if self.n == 0 {
            return Err(Error::invalid("mixture sample count must be > 0"));
        }
        if self.kind == SynthKind::Grid {
            let side = (self.modes as f64).sqrt().round() as usize;
            if side * side != self.modes {
                return Err(Error::invalid(format!("grid mixture needs a square mode count, got {}", self.modes)));
            }
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        match self.kind {
            SynthKind::Ring => (0..self.modes)
                .map(|i| {
                    let t = TAU * i as f64 / self.modes as f64;
                    [self.radius * t.cos(), self.radius * t.sin()]
                })
                .collect(),
            SynthKind::Grid => {
                let side = (self.modes as f64).sqrt().round() as usize;
                let coord = |i: usize| {
                    if side == 1 {
                        0.0
                    } else {
                        -self.radius + 2.0 * self.radius * i as f64 / (side - 1) as f64
                    }
                };
                (0..self.modes).map(|i| [coord(i % side), coord(i / side)]).collect()
            }
        }
    }
}

/// Draws `spec.n` points as `n x 1 x 1 x 2` "images", labelled by mode.
pub fn synth(spec: &SynthSpec, rng: &mut impl Rng) -> Result<Dataset> {
    spec.validate()?;
    let centers = spec.centers();
    let mut data = Vec::with_capacity(spec.n * 2);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let m = rng.random_range(0..spec.modes);
        let ex: f64 = StandardNormal.sample(rng);
        let ey: f64 = StandardNormal.sample(rng);
        data.push(centers[m][0] + spec.sigma * ex);
        data.push(centers[m][1] + spec.sigma * ey);
        labels.push(m);
    }
    Dataset::points(Tensor::new(vec![spec.n, 1, 1, 2], data)?, Some(labels), spec.modes)
}

/// Writes 2D points as `x,y[,label]` CSV with a header row.
pub fn write_points_csv(points: &Tensor, labels: Option<&[usize]>, path: &Path) -> Result<()> {
    if points.row_len() != 2 {
        return Err(Error::invalid(format!("points must be 2D, got {:?}", points.shape())));
    }
    let mut w = csv::Writer::from_path(path)?;
    if labels.is_some() {
        w.write_record(["x", "y", "label"])?;
    } else {
        w.write_record(["x", "y"])?;
    }
    for i in 0..points.batch() {
        let p = points.row(i);
        let mut rec = vec![p[0].to_string(), p[1].to_string()];
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_tight_mode_sits_at_one_zero() {
        let d = synth(&SynthSpec::ring(1, 1e-9, 50), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for i in 0..50 {
            let p = d.images.row(i);
            assert!((p[0] - 1.0).abs() < 1e-6 && p[1].abs() < 1e-6);
        }
    }

    #[test]
    fn eight_modes_are_balanced() {
        // multinomial(8000, 1/8): sd ≈ 29.6 per mode, so ±100 is > 3 sd
        let d = synth(&SynthSpec::ring(8, 0.05, 8000), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut counts = [0usize; 8];
        for &l in d.labels.as_ref().unwrap() {
            counts[l] += 1;
        }
        for c in counts {
            assert!((900..=1100).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn seeded_determinism_and_finiteness() {
        let spec = SynthSpec::ring(8, 0.05, 100);
        let a = synth(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = synth(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.images, b.images);
        assert!(a.images.is_finite());
    }

    #[test]
    fn grid_needs_square_mode_count() {
        let mut spec = SynthSpec::ring(9, 0.05, 10);
        spec.kind = SynthKind::Grid;
        assert_eq!(spec.centers()[0], [-1.0, -1.0]);
        assert_eq!(spec.centers()[8], [1.0, 1.0]);
        spec.modes = 8;
        assert!(spec.validate().is_err());
    }
}
