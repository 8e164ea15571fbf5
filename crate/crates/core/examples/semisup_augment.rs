//! Classifier on the first labeled digits, with and without augmentation by
//! a freshly trained transition generator.
//!
//!     cargo run --release --example semisup_augment -- [classifier epochs] [rho]

use vgf::config::{Config, Span};
use vgf::semisup::{train_classifier, Augmenter, Splits};
use vgf::training::train_vcd;

fn main() -> vgf::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(10, |s| s.parse().expect("epochs"));
    let rho: f64 = args.next().map_or(0.01, |s| s.parse().expect("rho"));

    let mut cfg: Config = "data.source = idx\nvcd.d = 256".parse()?;
    cfg.semisup.epochs = epochs;
    cfg.vcd.rho = rho;
    cfg.train.epochs = 3;
    cfg.data.range = Span::of(0..3000);
    let (_, gen, _) = train_vcd(&cfg, &cfg.load_dataset()?, None)?;

    let splits = Splits::from_config(&cfg)?;
    let plain = train_classifier(&cfg, &splits, None, 0)?;
    let aug = train_classifier(&cfg, &splits, Some(&gen as &dyn Augmenter), 0)?;
    println!("labeled examples: {}", splits.labeled.len());
    println!("no augmentation: test error {:.2}% (epoch {})", 100.0 * plain.test_error, plain.best_epoch);
    println!("rho = {rho}: test error {:.2}% (epoch {})", 100.0 * aug.test_error, aug.best_epoch);
    Ok(())
}
