//! Trains a small degradation pair on synthetic faces and shows the
//! one-to-many behavior: one HR image, several noise vectors, several LR
//! renderings.
//!
//! Run with `cargo run --release --example train_degrader`.

use invsr::degrader::{train_degrader, DegraderTrainConfig, NoiseVector};
use invsr::imagedata::{save_image_file, synth_dataset};
use invsr::percept::FeatureExtractor;
use std::path::PathBuf;

fn main() -> invsr::Result<()> {
    let out = PathBuf::from("target/example-out/train_degrader");
    let hr = synth_dataset(32, 64, 100)?;
    let lr = synth_dataset(32, 16, 101)?;
    let fx = FeatureExtractor::random(7);

    let cfg = DegraderTrainConfig {
        iterations: 12,
        batch_size: 4,
        channels: 6,
        seed: 3,
        ..Default::default()
    };
    println!("training {} iterations (5 discriminator steps per generator step)...", cfg.iterations);
    let ckpt = train_degrader(&cfg, &hr, &lr, &fx, &out)?;

    let rows = invsr::degrader::read_loss_csv(&out.join("loss.csv"))?;
    let first = rows.first().expect("loss rows");
    let last = rows.last().expect("loss rows");
    println!("iteration 0:   d={:.4} gp={:.4} g_l1={:.4} total={:.4}", first.d_loss, first.gp, first.g_l1, first.total);
    println!("iteration {}:  d={:.4} gp={:.4} g_l1={:.4} total={:.4}", last.iteration, last.d_loss, last.gp, last.g_l1, last.total);

    // one HR image, three noise draws
    let hr_img = hr.load_image(0)?;
    save_image_file(&out.join("input_hr.png"), &hr_img)?;
    let mut variants = Vec::new();
    for k in 0..3u64 {
        let lr_img = ckpt.degrade(&hr_img, &NoiseVector::from_seed(k))?;
        save_image_file(&out.join(format!("lr_variant{k}.png")), &lr_img)?;
        variants.push(lr_img);
    }
    println!(
        "L1 between noise variants: 0↔1 {:.5}, 0↔2 {:.5}, 1↔2 {:.5}",
        variants[0].l1_to(&variants[1]),
        variants[0].l1_to(&variants[2]),
        variants[1].l1_to(&variants[2]),
    );
    println!("artifacts in {}", out.display());
    Ok(())
}
