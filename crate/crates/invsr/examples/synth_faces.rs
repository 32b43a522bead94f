//! Procedural face datasets: generate, inspect, batch, and write a manifest.
//!
//! Run with `cargo run --example synth_faces`.

use invsr::imagedata::{batch_iter, denormalize, save_image_file, synth_dataset, write_png};
use ndarray::Array3;
use std::path::PathBuf;

fn main() -> invsr::Result<()> {
    let out = PathBuf::from("target/example-out/synth_faces");
    std::fs::create_dir_all(&out).expect("create output dir");

    // 16 HR faces, deterministic in (count, resolution, seed)
    let hr = synth_dataset(16, 64, 7)?;
    println!("dataset: {} items at {res}x{res}", hr.len(), res = hr.resolution());

    // contact sheet
    let mut sheet = Array3::<u8>::zeros((3, 4 * 64, 4 * 64));
    for i in 0..16 {
        let img = denormalize(&hr.load_image(i)?);
        let (gy, gx) = (i / 4, i % 4);
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    sheet[(c, gy * 64 + y, gx * 64 + x)] = img[(c, y, x)];
                }
            }
        }
    }
    write_png(&out.join("contact_sheet.png"), &sheet)?;
    println!("wrote {}", out.join("contact_sheet.png").display());

    // manifest + PNG files for the file-backed path
    let mut manifest = String::from("{\"role\": \"HR\", \"resolution\": 64}\n");
    for i in 0..4 {
        let name = format!("face{i}.png");
        save_image_file(&out.join(&name), &hr.load_image(i)?)?;
        manifest.push_str(&format!(
            "{{\"id\": \"face{i}\", \"path\": \"{name}\"}}\n"
        ));
    }
    std::fs::write(out.join("hr.jsonl"), manifest).expect("write manifest");
    let reloaded = invsr::imagedata::load_manifest(&out.join("hr.jsonl"))?;
    println!("manifest round-trip: {} items", reloaded.len());

    // deterministic batching with a short final batch
    let mut stream = batch_iter(&hr, 6, 42)?;
    for _ in 0..stream.batches_per_epoch() {
        let batch = stream.next_batch()?;
        println!("batch of {}: {:?}", batch.ids.len(), &batch.ids[..2.min(batch.ids.len())]);
    }
    Ok(())
}
