//! The landmark-heatmap metric and solution diversity, demonstrated on
//! synthetic heatmaps and images.
//!
//! Run with `cargo run --example evaluate_solutions`.

use invsr::imagedata::synth_dataset;
use invsr::metrics::{
    heatmap_metric, solution_diversity, synth_heatmaps, CentroidBackend, LandmarkBackend,
};

fn main() -> invsr::Result<()> {
    // hand-computable cases
    let a = synth_heatmaps(&[(4.0, 4.0), (10.0, 6.0)], 1.5, 16)?;
    let b = synth_heatmaps(&[(4.0, 4.0), (10.0, 6.0)], 1.5, 16)?;
    println!("identical landmark sets     → metric {}", heatmap_metric(&a, &b)?);
    let shifted = synth_heatmaps(&[(5.0, 4.0), (10.0, 7.0)], 1.5, 16)?;
    println!("landmarks shifted one pixel → metric {:.4}", heatmap_metric(&a, &shifted)?);

    // backend on real images: compare generated candidates to a reference
    let backend = CentroidBackend::default();
    let d = synth_dataset(4, 64, 42)?;
    let reference = d.load_image(0)?;
    let ref_maps = backend.heatmaps(&reference)?;
    println!("\nper-candidate heatmap metric against the reference:");
    let mut candidates = Vec::new();
    for i in 1..4 {
        let img = d.load_image(i)?;
        let m = heatmap_metric(&backend.heatmaps(&img)?, &ref_maps)?;
        println!("  candidate {i}: {m:.4}");
        candidates.push(img);
    }
    println!("self-comparison: {}", heatmap_metric(&ref_maps, &backend.heatmaps(&reference)?)?);

    println!("\nsolution-set diversity (mean pairwise L1): {:.4}", solution_diversity(&candidates)?);
    Ok(())
}
