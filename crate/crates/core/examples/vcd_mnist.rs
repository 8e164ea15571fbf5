//! Train a transition generator with its energy model on MNIST digits, then
//! run the learned chain from a few test digits and save it as a PNG grid
//! (first row: data, then one row per step).
//!
//!     cargo run --release --example vcd_mnist -- [epochs] [rho] [lr]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vgf::config::{Config, Span};
use vgf::generator::simulate_chain;
use vgf::image::write_png_grid;
use vgf::training::train_vcd;
use vgf::Tensor;

fn main() -> vgf::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(3, |s| s.parse().expect("epochs"));
    let rho: f64 = args.next().map_or(0.01, |s| s.parse().expect("rho"));
    let lr: f64 = args.next().map_or(0.1, |s| s.parse().expect("lr"));

    let mut cfg: Config = "data.source = idx\ntrain.loop = vcd\nvcd.d = 256".parse()?;
    cfg.train.epochs = epochs;
    cfg.vcd.rho = rho;
    cfg.train.lr = lr;
    cfg.data.range = Span::of(0..3000);
    let data = cfg.load_dataset()?;
    let (_, gen, log) = train_vcd(&cfg, &data, None)?;
    for e in 0..epochs {
        let mse = log.epoch_mean(e, |r| r.recon_mse).unwrap_or(f64::NAN);
        let ed = log.epoch_mean(e, |r| r.data_energy).unwrap_or(f64::NAN);
        println!("epoch {e}: reconstruction mse {mse:.5}  E(data) {ed:.3}");
    }

    let held_out = cfg.load_full_dataset()?.subset(4000..4010)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let steps = cfg.sample.steps;
    let chain = simulate_chain(&gen, &held_out.images, steps, &mut rng)?;
    let mut frames = vec![&held_out.images];
    frames.extend(chain.iter());
    let out = std::env::temp_dir().join("vcd_chain.png");
    let (w, h) = write_png_grid(&out, &Tensor::concat(&frames)?, steps + 1, 10)?;
    println!("chain written to {} ({w}x{h})", out.display());
    Ok(())
}

