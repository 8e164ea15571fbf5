//! Finite-difference check of every layer kind and both energy heads.
//!
//!     cargo run --release --example grad_check -- [seed]

use vgf::energy::head_checks;
use vgf::ndiff::gradcheck::layer_suite;

fn main() -> vgf::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(1, |s| s.parse().expect("seed"));
    let mut reports = layer_suite(seed)?;
    reports.extend(head_checks(seed)?);
    for r in &reports {
        println!("{:<24} checked {:>5}  max rel err {:.2e}", r.name, r.checked, r.max_rel_error);
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("worst: {worst:.2e}");
    Ok(())
}
