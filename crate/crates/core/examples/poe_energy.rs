//! The product-of-experts energy: its range, and the 2^K minima reached when
//! every expert saturates.

use vgf::energy::poe_energy_from_logits;
use vgf::Tensor;

fn main() {
    let k = 3;
    // every sign pattern of large logits
    let corners = Tensor::from_fn(&[1 << k, k], |i| {
        let (row, j) = (i / k, i % k);
        if row >> j & 1 == 1 { 40.0 } else { -40.0 }
    });
    let e = poe_energy_from_logits(&corners);
    for (i, v) in e.data().iter().enumerate() {
        println!("pattern {i:03b}: energy {v:.3e}");
    }
    let center = poe_energy_from_logits(&Tensor::zeros(&[1, k]));
    println!("all logits 0: energy {:.6} = K ln 2 = {:.6}", center.data()[0], k as f64 * std::f64::consts::LN_2);
}
