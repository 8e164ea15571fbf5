//! Mode coverage of the discriminator/generator baseline next to the
//! entropy-regularized energy model, same seed and networks.
//!
//!     cargo run --release --example gan_vs_vgan -- [iterations] [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vgf::config::{Config, LoopKind};
use vgf::toyeval::mode_coverage;
use vgf::training::{draw_samples, train};

fn main() -> vgf::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(3000, |s| s.parse().expect("iterations"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let mut cfg: Config = "train.lr = 0.3\ntrain.epochs = 1000\ngen.dz = 8".parse()?;
    cfg.train.max_iterations = iterations;
    cfg.train.seed = seed;
    let data = cfg.load_dataset()?;
    let centers = cfg.synth_spec()?.centers();

    for (kind, k) in [(LoopKind::Gan, 1), (LoopKind::Vgan, 1), (LoopKind::Vgan, 3)] {
        cfg.train.kind = kind;
        cfg.train.k = k;
        let (models, _) = train(&cfg, &data, None)?;
        let s = draw_samples(&models, &data, 5000, &mut ChaCha8Rng::seed_from_u64(7))?.reshape(&[5000, 2])?;
        let cov = mode_coverage(&s, &centers, 0.15)?;
        println!("{:<5} k={k}: {} of 8 modes covered, {:.0}% off-mode", format!("{kind:?}"), cov.modes_covered(0.02), 100.0 * cov.unassigned);
    }
    Ok(())
}
