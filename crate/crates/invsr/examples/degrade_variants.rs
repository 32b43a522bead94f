//! The degradation network is noise-conditioned: one HR face maps to many
//! LR renderings. This example degrades one image under a sweep of noise
//! vectors and tiles the results into a strip.
//!
//! Run with `cargo run --release --example degrade_variants`.

use invsr::degrader::{init_degrader, NoiseVector};
use invsr::imagedata::{denormalize, synth_dataset, write_png};
use ndarray::Array3;
use std::path::PathBuf;

fn main() -> invsr::Result<()> {
    let out = PathBuf::from("target/example-out/degrade_variants");
    std::fs::create_dir_all(&out).expect("create output dir");

    let ckpt = init_degrader(8, 77, &out.join("ckpt"))?;
    let hr = synth_dataset(1, 64, 300)?.load_image(0)?;

    let n = 6;
    let mut strip = Array3::<u8>::zeros((3, 16, 16 * n));
    let mut previous: Option<invsr::imagedata::ImageTensor> = None;
    for k in 0..n {
        let lr = ckpt.degrade(&hr, &NoiseVector::from_seed(k as u64))?;
        if let Some(prev) = &previous {
            println!("L1(variant {k}, variant {}) = {:.5}", k - 1, lr.l1_to(prev));
        }
        let px = denormalize(&lr);
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    strip[(c, y, k * 16 + x)] = px[(c, y, x)];
                }
            }
        }
        previous = Some(lr);
    }
    write_png(&out.join("variants.png"), &strip)?;
    println!("strip of {n} noise variants: {}", out.join("variants.png").display());
    Ok(())
}
