//! Frozen feature extractors and the perceptual distance built on them.
//!
//! The default backend is a small stride-2 convolutional stack with
//! fixed-seed random weights: deterministic, download-free, and a serviceable
//! stand-in for a pretrained network in tests. A pretrained conv stack can be
//! plugged in from a checkpoint directory instead
//! (`percept.backend = "pretrained"`).

use crate::checkpoint::{load_weights, read_json, write_json};
use crate::error::{Error, Result};
use crate::imagedata::ImageTensor;
use crate::nn::{Conv2d, ParamStore, ParamTensors};
use crate::tensor::Tensor;
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One convolution in the stack; `tap` marks block ends whose activations are
/// returned as features.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool_after: bool,
    pub tap: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtractorManifest {
    pub backend_id: String,
    pub input_side: usize,
    pub layers: Vec<LayerSpec>,
}

/// Immutable conv stack with tapped feature maps. Parameters never change
/// after construction; all methods are pure.
pub struct FeatureExtractor {
    manifest: ExtractorManifest,
    convs: Vec<Conv2d>,
    store: ParamStore,
}

impl FeatureExtractor {
    /// Default random backend: four stride-2 blocks tapped at each end,
    /// for 64×64 inputs.
    pub fn random(seed: u64) -> Self {
        Self::random_with(seed, 64, &[8, 16, 32, 32])
    }

    /// Random backend with explicit input size and per-stage channels
    /// (one stride-2 tapped conv per stage). Used to build tiny extractors
    /// for gradient tests.
    pub fn random_with(seed: u64, input_side: usize, stage_channels: &[usize]) -> Self {
        assert!(!stage_channels.is_empty(), "need at least one stage");
        let mut layers = Vec::new();
        let mut cin = 3;
        for &cout in stage_channels {
            layers.push(LayerSpec {
                cin,
                cout,
                k: 3,
                stride: 2,
                pad: 1,
                pool_after: false,
                tap: true,
            });
            cin = cout;
        }
        let manifest = ExtractorManifest {
            backend_id: format!("random-{seed}"),
            input_side,
            layers,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = build_convs(&manifest, &mut store, &mut rng);
        Self { manifest, convs, store }
    }

    /// Loads a pretrained conv-stack backend from a directory holding
    /// `manifest.json` and `weights.bin`.
    pub fn pretrained_from(dir: &Path) -> Result<Self> {
        let manifest: ExtractorManifest = read_json(&dir.join("manifest.json"))?;
        let store = load_weights(&dir.join("weights.bin"))?;
        // rebuild with throwaway weights to learn the expected layout
        let mut expected = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let convs = build_convs(&manifest, &mut expected, &mut rng);
        expected.same_layout(&store)?;
        Ok(Self { manifest, convs, store })
    }

    /// Writes this extractor out in the pretrained-backend format.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        crate::checkpoint::save_weights(&dir.join("weights.bin"), &self.store)
    }

    pub fn backend_id(&self) -> &str {
        &self.manifest.backend_id
    }

    pub fn input_side(&self) -> usize {
        self.manifest.input_side
    }

    /// Number of tapped blocks.
    pub fn num_taps(&self) -> usize {
        self.manifest.layers.iter().filter(|l| l.tap).count()
    }

    /// Tapped feature maps for a batched input `(N, 3, S, S)`; differentiable.
    pub fn features_t(&self, x: &Tensor) -> Vec<Tensor> {
        let p = self.store.leaves(false);
        self.features_with(&p, x)
    }

    fn features_with(&self, p: &ParamTensors, x: &Tensor) -> Vec<Tensor> {
        let mut taps = Vec::new();
        let mut h = x.clone();
        for (conv, spec) in self.convs.iter().zip(&self.manifest.layers) {
            h = conv.forward(p, &h).relu();
            if spec.pool_after {
                h = h.max_pool2();
            }
            if spec.tap {
                taps.push(h.clone());
            }
        }
        taps
    }

    /// Tapped feature maps for a single image.
    pub fn features(&self, x: &ImageTensor) -> Result<Vec<ArrayD<f64>>> {
        self.check_side(x)?;
        let leaf = Tensor::leaf(x.to_batch().into_dyn());
        Ok(self
            .features_t(&leaf)
            .into_iter()
            .map(|t| t.data().clone())
            .collect())
    }

    /// Sum over tapped blocks of the per-element mean absolute feature
    /// difference; differentiable in both arguments.
    pub fn perceptual_distance_t(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let fa = self.features_t(a);
        let fb = self.features_t(b);
        let mut total = Tensor::scalar(0.0);
        for (pa, pb) in fa.iter().zip(fb.iter()) {
            total = total.add(&pa.sub(pb).abs().mean_all());
        }
        total
    }

    /// Perceptual distance between two images; symmetric and non-negative.
    pub fn perceptual_distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        self.check_side(a)?;
        self.check_side(b)?;
        let ta = Tensor::leaf(a.to_batch().into_dyn());
        let tb = Tensor::leaf(b.to_batch().into_dyn());
        Ok(self.perceptual_distance_t(&ta, &tb).scalar_value())
    }

    fn check_side(&self, x: &ImageTensor) -> Result<()> {
        if x.side() != self.manifest.input_side {
            return Err(Error::Shape(format!(
                "feature extractor expects {side}×{side} input, got {got}×{got}",
                side = self.manifest.input_side,
                got = x.side()
            )));
        }
        Ok(())
    }
}

fn build_convs(
    manifest: &ExtractorManifest,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Vec<Conv2d> {
    manifest
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            Conv2d::new(
                store,
                rng,
                &format!("fx.{i}"),
                l.cin,
                l.cout,
                l.k,
                l.stride,
                l.pad,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagedata::synth_dataset;
    use crate::tensor::grad;

    fn make_images(n: usize, seed: u64) -> Vec<ImageTensor> {
        let d = synth_dataset(n, 64, seed).unwrap();
        (0..n).map(|i| d.load_image(i).unwrap()).collect()
    }

    #[test]
    fn features_are_deterministic_and_counted() {
        let fx = FeatureExtractor::random(3);
        let imgs = make_images(1, 10);
        let f1 = fx.features(&imgs[0]).unwrap();
        let f2 = fx.features(&imgs[0]).unwrap();
        assert_eq!(f1.len(), 4);
        for (a, b) in f1.iter().zip(f2.iter()) {
            assert_eq!(a, b);
        }
        assert!(f1.iter().all(|m| m.iter().all(|v| v.is_finite())));
        assert!(f1.iter().all(|m| !m.is_empty()));

        // same seed across constructions == same backend
        let fx2 = FeatureExtractor::random(3);
        let g = fx2.features(&imgs[0]).unwrap();
        for (a, b) in f1.iter().zip(g.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn distance_is_zero_on_self_and_symmetric() {
        let fx = FeatureExtractor::random(3);
        let imgs = make_images(2, 11);
        assert_eq!(fx.perceptual_distance(&imgs[0], &imgs[0]).unwrap(), 0.0);
        let ab = fx.perceptual_distance(&imgs[0], &imgs[1]).unwrap();
        let ba = fx.perceptual_distance(&imgs[1], &imgs[0]).unwrap();
        assert!(ab >= 0.0);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn distance_matches_bruteforce_recomputation_from_raw_features() {
        let fx = FeatureExtractor::random(5);
        let imgs = make_images(2, 12);
        let got = fx.perceptual_distance(&imgs[0], &imgs[1]).unwrap();
        let fa = fx.features(&imgs[0]).unwrap();
        let fb = fx.features(&imgs[1]).unwrap();
        let mut want = 0.0;
        for (ma, mb) in fa.iter().zip(fb.iter()) {
            let mut acc = 0.0;
            for (x, y) in ma.iter().zip(mb.iter()) {
                acc += (x - y).abs();
            }
            want += acc / ma.len() as f64;
        }
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn triangle_inequality_on_random_triples() {
        let fx = FeatureExtractor::random(7);
        let imgs = make_images(3, 13);
        let d = |i: usize, j: usize| fx.perceptual_distance(&imgs[i], &imgs[j]).unwrap();
        assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
        assert!(d(1, 0) <= d(1, 2) + d(2, 0) + 1e-12);
        assert!(d(2, 1) <= d(2, 0) + d(0, 1) + 1e-12);
    }

    #[test]
    fn distance_gradient_matches_finite_differences() {
        // tiny 4-tap backend on 16×16 inputs keeps the check fast
        let fx = FeatureExtractor::random_with(9, 16, &[4, 4, 8, 8]);
        let d = synth_dataset(2, 16, 14).unwrap();
        let a = d.load_image(0).unwrap().to_batch().into_dyn();
        let b = d.load_image(1).unwrap().to_batch().into_dyn();

        let at = Tensor::var(a.clone());
        let bt = Tensor::leaf(b.clone());
        let dist = fx.perceptual_distance_t(&at, &bt);
        let analytic = grad(&dist, &[&at], false).remove(0);

        let f = |arr: &ArrayD<f64>| {
            fx.perceptual_distance_t(&Tensor::leaf(arr.clone()), &Tensor::leaf(b.clone()))
                .scalar_value()
        };
        let h = 1e-5;
        // spot-check a spread of coordinates
        for idx in (0..a.len()).step_by(97) {
            let mut plus = a.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = a.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&plus) - f(&minus)) / (2.0 * h);
            let ana = analytic.data().as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() / 1.0_f64.max(num.abs()) < 1e-3,
                "idx {idx}: analytic {ana}, numeric {num}"
            );
        }
    }

    #[test]
    fn pretrained_roundtrip_and_layout_check() {
        let dir = tempfile::tempdir().unwrap();
        let fx = FeatureExtractor::random(21);
        fx.save(dir.path()).unwrap();
        let loaded = FeatureExtractor::pretrained_from(dir.path()).unwrap();
        let imgs = make_images(1, 15);
        assert_eq!(
            fx.features(&imgs[0]).unwrap(),
            loaded.features(&imgs[0]).unwrap()
        );
        assert!(FeatureExtractor::pretrained_from(&dir.path().join("nope")).is_err());
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let fx = FeatureExtractor::random(3);
        let d = synth_dataset(1, 16, 16).unwrap();
        let small = d.load_image(0).unwrap();
        assert!(matches!(fx.features(&small), Err(Error::Shape(_))));
    }
}
