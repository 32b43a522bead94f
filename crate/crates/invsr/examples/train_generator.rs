//! Progressive generator training at desk scale: grows 4×4 → 8×8 → 16×16
//! with fade-in, writing a checkpoint directory and a fixed-latent sample
//! grid per stage.
//!
//! Run with `cargo run --release --example train_generator`.

use invsr::hrgen::{train_progressive, GeneratorCheckpoint, GrowthSchedule, HrGenConfig, LatentCode};
use invsr::imagedata::{save_image_file, synth_dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn main() -> invsr::Result<()> {
    let out = PathBuf::from("target/example-out/train_generator");
    let hr = synth_dataset(48, 64, 200)?;

    let cfg = HrGenConfig {
        schedule: GrowthSchedule {
            resolutions: vec![4, 8, 16],
            epochs: vec![2, 2, 2],
            batch_sizes: vec![8, 8, 8],
            fade_fraction: 0.5,
        },
        stage_channels: vec![12, 12, 12],
        sample_grid: 4,
        seed: 9,
        ..Default::default()
    };
    println!("training stages {:?}...", cfg.schedule.resolutions);
    let final_ckpt = train_progressive(&cfg, &hr, &out)?;
    for res in &cfg.schedule.resolutions {
        println!("stage checkpoint: {}", out.join(format!("stage_{res}")).display());
    }

    // reload the final stage and render one sample
    let ckpt = GeneratorCheckpoint::load(&final_ckpt.dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = LatentCode::standard(&mut rng);
    let img = ckpt.generate(&z)?;
    save_image_file(&out.join("sample.png"), &img)?;
    println!(
        "reloaded stage {} ({res}×{res}); sample written to {}",
        ckpt.manifest.stage,
        out.join("sample.png").display(),
        res = ckpt.manifest.resolution
    );
    Ok(())
}
