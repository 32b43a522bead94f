//! Evaluation utilities: the landmark-heatmap metric, synthetic heatmap
//! generation, a pluggable landmark backend, and solution-set diversity.
//!
//! A real facial-landmark network is intentionally out of the box; the
//! backend trait is the integration point and the bundled synthetic backend
//! derives deterministic pseudo-landmarks from image brightness so the
//! metric pipeline can be exercised end to end.

use crate::error::{Error, Result};
use crate::imagedata::ImageTensor;
use ndarray::Array3;
use std::io::Write;
use std::path::Path;

/// `(N, H, W)` stack of non-negative landmark heatmaps.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSet {
    maps: Array3<f64>,
}

impl HeatmapSet {
    pub fn new(maps: Array3<f64>) -> Result<Self> {
        if maps.dim().0 == 0 {
            return Err(Error::InvalidInput("heatmap set needs at least one landmark".into()));
        }
        if let Some(v) = maps.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "heatmap values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &Array3<f64> {
        &self.maps
    }

    pub fn num_landmarks(&self) -> usize {
        self.maps.dim().0
    }
}

/// Mean over landmarks of the summed squared per-pixel heatmap difference:
/// `(1/N) Σ_n Σ_ij (M̂ − M)²`.
pub fn heatmap_metric(gen: &HeatmapSet, reference: &HeatmapSet) -> Result<f64> {
    if gen.maps.dim() != reference.maps.dim() {
        return Err(Error::Shape(format!(
            "heatmap dimensions differ: {:?} vs {:?}",
            gen.maps.dim(),
            reference.maps.dim()
        )));
    }
    let n = gen.num_landmarks() as f64;
    let sum: f64 = gen
        .maps
        .iter()
        .zip(reference.maps.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// One unnormalized Gaussian bump per landmark, peak value 1 at the landmark
/// pixel. Coordinates are `(x, y)` with the origin at the top-left pixel
/// center.
pub fn synth_heatmaps(landmarks: &[(f64, f64)], sigma: f64, size: usize) -> Result<HeatmapSet> {
    if landmarks.is_empty() {
        return Err(Error::InvalidInput("no landmarks given".into()));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    let max = (size - 1) as f64;
    for &(x, y) in landmarks {
        if !(0.0..=max).contains(&x) || !(0.0..=max).contains(&y) {
            return Err(Error::InvalidInput(format!(
                "landmark ({x}, {y}) outside a {size}×{size} image"
            )));
        }
    }
    let mut maps = Array3::<f64>::zeros((landmarks.len(), size, size));
    for (n, &(lx, ly)) in landmarks.iter().enumerate() {
        for i in 0..size {
            for j in 0..size {
                let d2 = (j as f64 - lx).powi(2) + (i as f64 - ly).powi(2);
                maps[(n, i, j)] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    HeatmapSet::new(maps)
}

/// Deterministic localizer: an image in, one heatmap per landmark out.
pub trait LandmarkBackend {
    fn id(&self) -> &str;
    fn heatmaps(&self, image: &ImageTensor) -> Result<HeatmapSet>;
}

/// Synthetic backend: five pseudo-landmarks placed at the brightness
/// centroids of the four image quadrants and of the full image, rendered as
/// Gaussian heatmaps. Deterministic and sensitive to image content.
pub struct CentroidBackend {
    pub sigma: f64,
}

impl Default for CentroidBackend {
    fn default() -> Self {
        Self { sigma: 2.0 }
    }
}

fn region_centroid(img: &ImageTensor, y0: usize, y1: usize, x0: usize, x1: usize) -> (f64, f64) {
    let data = img.data();
    let mut mass = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            let b = (data[(0, y, x)] + data[(1, y, x)] + data[(2, y, x)]) / 3.0 + 1.0;
            mass += b;
            cx += b * x as f64;
            cy += b * y as f64;
        }
    }
    if mass <= 0.0 {
        ((x0 + x1 - 1) as f64 / 2.0, (y0 + y1 - 1) as f64 / 2.0)
    } else {
        (cx / mass, cy / mass)
    }
}

impl LandmarkBackend for CentroidBackend {
    fn id(&self) -> &str {
        "centroid-synthetic"
    }

    fn heatmaps(&self, image: &ImageTensor) -> Result<HeatmapSet> {
        let s = image.side();
        let h = s / 2;
        let landmarks = vec![
            region_centroid(image, 0, h, 0, h),
            region_centroid(image, 0, h, h, s),
            region_centroid(image, h, s, 0, h),
            region_centroid(image, h, s, h, s),
            region_centroid(image, 0, s, 0, s),
        ];
        synth_heatmaps(&landmarks, self.sigma, s)
    }
}

/// Mean pairwise L1 distance over all unordered pairs; needs at least two
/// equally shaped images.
pub fn solution_diversity(solutions: &[ImageTensor]) -> Result<f64> {
    if solutions.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "diversity needs at least 2 solutions, got {}",
            solutions.len()
        )));
    }
    let dim = solutions[0].data().dim();
    if solutions.iter().any(|s| s.data().dim() != dim) {
        return Err(Error::Shape("diversity: mixed image shapes".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..solutions.len() {
        for j in (i + 1)..solutions.len() {
            total += solutions[i].l1_to(&solutions[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// One evaluation report row.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub id: String,
    pub k: usize,
    pub heatmap_metric: f64,
    pub objective: Option<f64>,
    pub diversity: Option<f64>,
}

/// CSV report: `id,k,heatmap_metric,objective,diversity`; optional fields
/// render empty.
pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut out = String::from("id,k,heatmap_metric,objective,diversity\n");
    for r in rows {
        let obj = r.objective.map(|v| v.to_string()).unwrap_or_default();
        let div = r.diversity.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.id, r.k, r.heatmap_metric, obj, div));
    }
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagedata::synth_dataset;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, size: usize, rng: &mut ChaCha8Rng) -> HeatmapSet {
        HeatmapSet::new(Array3::from_shape_simple_fn((n, size, size), || {
            rng.gen_range(0.0..2.0)
        }))
        .unwrap()
    }

    #[test]
    fn metric_hand_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_set(3, 8, &mut rng);
        assert_eq!(heatmap_metric(&a, &a).unwrap(), 0.0);

        // N=1, 2×2 maps, difference 1 everywhere → 4
        let m = HeatmapSet::new(Array3::zeros((1, 2, 2))).unwrap();
        let m1 = HeatmapSet::new(Array3::from_elem((1, 2, 2), 1.0)).unwrap();
        assert_eq!(heatmap_metric(&m1, &m).unwrap(), 4.0);

        // dimension mismatch
        let b = random_set(2, 8, &mut rng);
        assert!(heatmap_metric(&a, &b).is_err());
    }

    #[test]
    fn metric_matches_double_loop_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_set(4, 6, &mut rng);
        let b = random_set(4, 6, &mut rng);
        let got = heatmap_metric(&a, &b).unwrap();
        let mut want = 0.0;
        for n in 0..4 {
            for i in 0..6 {
                for j in 0..6 {
                    let d = a.maps()[(n, i, j)] - b.maps()[(n, i, j)];
                    want += d * d;
                }
            }
        }
        want /= 4.0;
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn metric_symmetry_and_quadratic_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_set(3, 5, &mut rng);
        let b = random_set(3, 5, &mut rng);
        let ab = heatmap_metric(&a, &b).unwrap();
        let ba = heatmap_metric(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);

        let c = 3.0;
        let ac = HeatmapSet::new(a.maps() * c).unwrap();
        let bc = HeatmapSet::new(b.maps() * c).unwrap();
        let scaled = heatmap_metric(&ac, &bc).unwrap();
        assert!((scaled - c * c * ab).abs() < 1e-9 * scaled.max(1.0));
    }

    #[test]
    fn synth_heatmaps_peak_and_count() {
        let set = synth_heatmaps(&[(8.0, 8.0)], 1.7, 16).unwrap();
        assert_eq!(set.num_landmarks(), 1);
        let map = set.maps().index_axis(ndarray::Axis(0), 0);
        let mut argmax = (0, 0);
        let mut best = f64::MIN;
        for i in 0..16 {
            for j in 0..16 {
                if map[(i, j)] > best {
                    best = map[(i, j)];
                    argmax = (i, j);
                }
            }
        }
        assert_eq!(argmax, (8, 8));
        assert_eq!(best, 1.0);

        let many = synth_heatmaps(&[(1.0, 1.0), (3.0, 2.0), (5.0, 5.0)], 1.0, 8).unwrap();
        assert_eq!(many.num_landmarks(), 3);

        // identical landmark lists → metric 0
        let again = synth_heatmaps(&[(1.0, 1.0), (3.0, 2.0), (5.0, 5.0)], 1.0, 8).unwrap();
        assert_eq!(heatmap_metric(&many, &again).unwrap(), 0.0);

        // out of bounds / bad sigma
        assert!(synth_heatmaps(&[(20.0, 1.0)], 1.0, 8).is_err());
        assert!(synth_heatmaps(&[(1.0, 1.0)], 0.0, 8).is_err());
    }

    #[test]
    fn centroid_backend_is_deterministic_and_content_sensitive() {
        let backend = CentroidBackend::default();
        let d = synth_dataset(2, 64, 80).unwrap();
        let a = d.load_image(0).unwrap();
        let b = d.load_image(1).unwrap();
        let ha = backend.heatmaps(&a).unwrap();
        let ha2 = backend.heatmaps(&a).unwrap();
        assert_eq!(ha.maps(), ha2.maps());
        assert_eq!(ha.num_landmarks(), 5);
        let hb = backend.heatmaps(&b).unwrap();
        assert!(heatmap_metric(&ha, &hb).unwrap() > 0.0);
        assert_eq!(heatmap_metric(&ha, &ha2).unwrap(), 0.0);
    }

    #[test]
    fn diversity_hand_cases() {
        let d = synth_dataset(1, 16, 81).unwrap();
        let img = d.load_image(0).unwrap();
        assert_eq!(solution_diversity(&[img.clone(), img.clone(), img.clone()]).unwrap(), 0.0);

        let low = ImageTensor::new(Array3::from_elem((3, 8, 8), -0.25)).unwrap();
        let high = ImageTensor::new(Array3::from_elem((3, 8, 8), 0.25)).unwrap();
        assert!((solution_diversity(&[low, high]).unwrap() - 0.5).abs() < 1e-12);

        assert!(solution_diversity(&[img]).is_err());
    }

    proptest! {
        #[test]
        fn diversity_is_permutation_invariant(seed in 0u64..50) {
            let d = synth_dataset(4, 16, seed).unwrap();
            let imgs: Vec<ImageTensor> = (0..4).map(|i| d.load_image(i).unwrap()).collect();
            let base = solution_diversity(&imgs).unwrap();
            let mut rev = imgs.clone();
            rev.reverse();
            let rotated: Vec<ImageTensor> = (0..4).map(|i| imgs[(i + 1) % 4].clone()).collect();
            prop_assert!((solution_diversity(&rev).unwrap() - base).abs() < 1e-12);
            prop_assert!((solution_diversity(&rotated).unwrap() - base).abs() < 1e-12);
            prop_assert!(base >= 0.0);
        }
    }

    #[test]
    fn eval_csv_renders_optionals_empty() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            EvalRow { id: "a".into(), k: 0, heatmap_metric: 1.5, objective: Some(0.25), diversity: Some(0.1) },
            EvalRow { id: "b".into(), k: 0, heatmap_metric: 0.0, objective: None, diversity: None },
        ];
        let path = dir.path().join("eval.csv");
        write_eval_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "id,k,heatmap_metric,objective,diversity\na,0,1.5,0.25,0.1\nb,0,0,,\n"
        );
    }
}
