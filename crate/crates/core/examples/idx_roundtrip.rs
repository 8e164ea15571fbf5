//! Load the bundled MNIST subset, write a slice back out as IDX and read it again.
//!
//!     cargo run --release --example idx_roundtrip -- [images.idx.gz labels.idx.gz]

use std::path::PathBuf;

use vgf::data::{load_idx, write_idx};
use vgf::image::write_png_grid;

fn main() -> vgf::Result<()> {
    let mut args = std::env::args().skip(1);
    let images = args.next().map_or_else(|| PathBuf::from("data/mnist5k/images-idx3-ubyte.gz"), PathBuf::from);
    let labels = args.next().map_or_else(|| PathBuf::from("data/mnist5k/labels-idx1-ubyte.gz"), PathBuf::from);

    let data = load_idx(&images, Some(&labels))?;
    let counts = data.labels.as_ref().map(|l| {
        let mut c = vec![0usize; data.num_classes];
        l.iter().for_each(|&y| c[y] += 1);
        c
    });
    println!("{} images of shape {:?}, label counts {:?}", data.len(), data.sample_shape(), counts.unwrap_or_default());

    let dir = std::env::temp_dir();
    let head = data.subset(0..100)?;
    let (ip, lp) = (dir.join("head-images.idx"), dir.join("head-labels.idx"));
    write_idx(&head, &ip, Some(&lp))?;
    let back = load_idx(&ip, Some(&lp))?;
    println!("round trip identical: {}", back.images == head.images && back.labels == head.labels);

    let png = dir.join("head.png");
    let (w, h) = write_png_grid(&png, &head.images, 10, 10)?;
    println!("first 100 digits: {} ({w}x{h})", png.display());
    Ok(())
}
