//! Latent inversion against frozen networks.
//!
//! Given a frozen generator G and a frozen degradation network D, the engine
//! recovers latent codes by gradient descent on the L1 objective
//! `mean |D(G(z)) − lr|` — no perceptual term, no adversarial training, no
//! weight updates. Because the objective is non-convex, running the search
//! from several seeded initializations yields multiple distinct HR
//! candidates for one LR input; results are returned sorted by how well they
//! re-degrade onto the input.

use crate::degrader::{DegraderCheckpoint, DegraderGenerator, NoiseVector};
use crate::error::{Error, Result};
use crate::hrgen::{GeneratorCheckpoint, LatentCode, ProgressiveGenerator, LATENT_DIM};
use crate::imagedata::ImageTensor;
use crate::nn::{standard_normal, upsample_bilinear_t, AdamParams, AdamState, ParamTensors};
use crate::tensor::{grad, Tensor};
use ndarray::{Array1, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Anything that maps a flat latent vector to an image tensor.
pub trait LatentGenerator {
    fn latent_len(&self) -> usize;
    fn generate_t(&self, z: &Tensor) -> Tensor;
}

/// Anything that maps a generated image tensor to its LR rendering.
pub trait DegradeFn {
    fn degrade_t(&self, hr: &Tensor) -> Tensor;
}

#[derive(Clone, Debug)]
pub struct InversionOptions {
    /// Fixed optimization budget; the useful window is roughly 250–500.
    pub iterations: usize,
    /// Number of independent seeded restarts.
    pub num_solutions: usize,
    pub seed: u64,
    pub adam: AdamParams,
    /// Initial latents are `init_scale · N(0, I)`.
    pub init_scale: f64,
    /// Project the latent back onto the √D sphere after each step.
    pub sphere_project: bool,
    /// When set, emitted reports include the full per-iteration trace files.
    /// The in-memory trace is always kept (it defines `best_objective`).
    pub record_trace: bool,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            iterations: 400,
            num_solutions: 3,
            seed: 0,
            adam: AdamParams::default(),
            init_scale: 1.0,
            sphere_project: false,
            record_trace: false,
        }
    }
}

impl InversionOptions {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidInput("iterations must be >= 1".into()));
        }
        if self.num_solutions == 0 {
            return Err(Error::InvalidInput("num_solutions must be >= 1".into()));
        }
        if !self.init_scale.is_finite() {
            return Err(Error::InvalidInput("init_scale must be finite".into()));
        }
        Ok(())
    }
}

/// Outcome of one inversion run.
#[derive(Clone, Debug)]
pub struct InversionResult {
    pub z_star: Array1<f64>,
    pub hr_image: ArrayD<f64>,
    pub lr_recon: ArrayD<f64>,
    pub objective_trace: Vec<f64>,
    pub best_objective: f64,
    pub seed: u64,
    pub solution_index: usize,
}

/// `mean |D(G(z)) − lr|`, differentiable in `z`.
pub fn objective_t<G: LatentGenerator, D: DegradeFn>(
    z: &Tensor,
    lr: &Tensor,
    g: &G,
    d: &D,
) -> Tensor {
    d.degrade_t(&g.generate_t(z)).sub(lr).abs().mean_all()
}

/// Objective value for a concrete latent.
pub fn objective<G: LatentGenerator, D: DegradeFn>(
    z: &Array1<f64>,
    lr: &ArrayD<f64>,
    g: &G,
    d: &D,
) -> Result<f64> {
    if z.len() != g.latent_len() {
        return Err(Error::Shape(format!(
            "latent has length {}, generator expects {}",
            z.len(),
            g.latent_len()
        )));
    }
    let zt = Tensor::leaf(z.clone().into_dyn());
    let out = d.degrade_t(&g.generate_t(&zt));
    if out.shape() != lr.shape() {
        return Err(Error::Shape(format!(
            "degraded output shape {:?} does not match target {:?}",
            out.shape(),
            lr.shape()
        )));
    }
    Ok(out.sub(&Tensor::leaf(lr.clone())).abs().mean_all().scalar_value())
}

fn derived_seed(base: u64, k: usize) -> u64 {
    base.wrapping_add(k as u64)
}

fn sphere_project_arr(z: &mut ArrayD<f64>) {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        let target = (z.len() as f64).sqrt();
        z.mapv_inplace(|v| v * target / norm);
    }
}

fn invert_seeded<G: LatentGenerator, D: DegradeFn>(
    lr: &ArrayD<f64>,
    g: &G,
    d: &D,
    opts: &InversionOptions,
    seed: u64,
    solution_index: usize,
) -> Result<InversionResult> {
    let latent_len = g.latent_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: ArrayD<f64> =
        standard_normal(&[latent_len], &mut rng).mapv(|v| v * opts.init_scale);
    if opts.sphere_project {
        sphere_project_arr(&mut z);
    }

    let lr_leaf = Tensor::leaf(lr.clone());
    let mut adam = AdamState::new(&[latent_len]);
    let mut trace = Vec::with_capacity(opts.iterations);
    let mut best_obj = f64::INFINITY;
    let mut best_z = z.clone();

    for it in 0..opts.iterations {
        let zt = Tensor::var(z.clone());
        let out = d.degrade_t(&g.generate_t(&zt));
        if out.shape() != lr.shape() {
            return Err(Error::Shape(format!(
                "degraded output shape {:?} does not match target {:?}",
                out.shape(),
                lr.shape()
            )));
        }
        let obj = out.sub(&lr_leaf).abs().mean_all();
        let val = obj.scalar_value();
        if !val.is_finite() {
            let tail: Vec<f64> = trace.iter().rev().take(5).cloned().collect();
            return Err(Error::Divergence(format!(
                "non-finite inversion objective at iteration {it} (seed {seed}); last values: {tail:?}"
            )));
        }
        trace.push(val);
        if val < best_obj {
            best_obj = val;
            best_z = z.clone();
        }
        let gz = grad(&obj, &[&zt], false).remove(0);
        adam.step(&opts.adam, &mut z, gz.data());
        if opts.sphere_project {
            sphere_project_arr(&mut z);
        }
    }

    let z_leaf = Tensor::leaf(best_z.clone());
    let hr_image = g.generate_t(&z_leaf).data().clone();
    let lr_recon = d.degrade_t(&Tensor::leaf(hr_image.clone())).data().clone();
    Ok(InversionResult {
        z_star: best_z.into_dimensionality::<ndarray::Ix1>().expect("latent rank"),
        hr_image,
        lr_recon,
        objective_trace: trace,
        best_objective: best_obj,
        seed,
        solution_index,
    })
}

/// Single inversion from the seeded initialization; returns the best iterate
/// (lowest objective seen), not the last one.
pub fn invert<G: LatentGenerator, D: DegradeFn>(
    lr: &ArrayD<f64>,
    g: &G,
    d: &D,
    opts: &InversionOptions,
) -> Result<InversionResult> {
    opts.validate()?;
    invert_seeded(lr, g, d, opts, derived_seed(opts.seed, 0), 0)
}

/// `num_solutions` independent inversions from distinct seeded
/// initializations, sorted ascending by best objective.
pub fn invert_multi<G: LatentGenerator, D: DegradeFn>(
    lr: &ArrayD<f64>,
    g: &G,
    d: &D,
    opts: &InversionOptions,
) -> Result<Vec<InversionResult>> {
    opts.validate()?;
    let mut results = Vec::with_capacity(opts.num_solutions);
    for k in 0..opts.num_solutions {
        results.push(invert_seeded(lr, g, d, opts, derived_seed(opts.seed, k), k)?);
    }
    results.sort_by(|a, b| {
        a.best_objective
            .total_cmp(&b.best_objective)
            .then(a.solution_index.cmp(&b.solution_index))
    });
    Ok(results)
}

/// Objective values of `n` random latents; the baseline distribution the
/// optimized solutions are judged against.
pub fn random_objective_samples<G: LatentGenerator, D: DegradeFn>(
    lr: &ArrayD<f64>,
    g: &G,
    d: &D,
    n: usize,
    init_scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z = standard_normal(&[g.latent_len()], &mut rng).mapv(|v| v * init_scale);
        let z1 = z.into_dimensionality::<ndarray::Ix1>().expect("latent rank");
        out.push(objective(&z1, lr, g, d)?);
    }
    Ok(out)
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

// ---- adapters binding the trained networks to the traits ----

/// Frozen progressive generator as an HR source. If the checkpoint's stage
/// resolution is below 64 the output is bilinearly upscaled so it can feed
/// the degradation network.
pub struct HrGeneratorAdapter<'a> {
    gen: &'a ProgressiveGenerator,
    params: ParamTensors,
    stage: usize,
    upscale_factor: usize,
}

impl<'a> HrGeneratorAdapter<'a> {
    pub fn new(ckpt: &'a GeneratorCheckpoint) -> Self {
        let res = ckpt.manifest.resolution;
        Self {
            gen: &ckpt.gen,
            params: ckpt.gen_store.leaves(false),
            stage: ckpt.manifest.stage,
            upscale_factor: 64 / res,
        }
    }
}

impl LatentGenerator for HrGeneratorAdapter<'_> {
    fn latent_len(&self) -> usize {
        LATENT_DIM
    }

    fn generate_t(&self, z: &Tensor) -> Tensor {
        let z2 = z.reshape(&[1, LATENT_DIM]);
        let img = self
            .gen
            .forward_t(&self.params, &z2, self.stage, 1.0)
            .expect("generator forward at a built stage");
        if self.upscale_factor > 1 {
            upsample_bilinear_t(&img, self.upscale_factor)
        } else {
            img
        }
    }
}

/// Frozen degradation generator with a pinned noise vector, so the HR→LR map
/// is deterministic during inversion.
pub struct DegraderAdapter<'a> {
    gen: &'a DegraderGenerator,
    params: ParamTensors,
    noise_row: ArrayD<f64>,
}

impl<'a> DegraderAdapter<'a> {
    pub fn new(ckpt: &'a DegraderCheckpoint, noise: &NoiseVector) -> Self {
        Self {
            gen: &ckpt.gen,
            params: ckpt.gen_store.leaves(false),
            noise_row: noise
                .values()
                .clone()
                .into_shape_with_order((1, NoiseVector::DIM))
                .unwrap()
                .into_dyn(),
        }
    }
}

impl DegradeFn for DegraderAdapter<'_> {
    fn degrade_t(&self, hr: &Tensor) -> Tensor {
        self.gen
            .forward_t(&self.params, hr, &Tensor::leaf(self.noise_row.clone()))
    }
}

/// One HR candidate for an LR input, with its re-degradation diagnostics.
#[derive(Clone, Debug)]
pub struct SolutionRecord {
    pub k: usize,
    pub seed: u64,
    pub iterations: usize,
    pub best_objective: f64,
    pub z_star: LatentCode,
    pub hr_image: ImageTensor,
    pub lr_recon: ImageTensor,
    pub objective_trace: Vec<f64>,
}

/// Runs the full pipeline on one LR image: loads nothing, mutates nothing,
/// returns `num_solutions` candidates sorted by objective. The degradation
/// noise channel is pinned to zero so the frozen HR→LR map is deterministic.
pub fn super_resolve(
    lr: &ImageTensor,
    gen_ckpt: &GeneratorCheckpoint,
    deg_ckpt: &DegraderCheckpoint,
    opts: &InversionOptions,
) -> Result<Vec<SolutionRecord>> {
    opts.validate()?;
    if lr.side() != 16 {
        return Err(Error::Shape(format!(
            "super_resolve expects a 16×16 LR input, got {side}×{side}",
            side = lr.side()
        )));
    }
    if 64 % gen_ckpt.manifest.resolution != 0 {
        return Err(Error::Checkpoint(format!(
            "generator resolution {} cannot feed the 64×64 degrader",
            gen_ckpt.manifest.resolution
        )));
    }

    let g = HrGeneratorAdapter::new(gen_ckpt);
    let d = DegraderAdapter::new(deg_ckpt, &NoiseVector::zeros());
    let lr_arr = lr.to_batch().into_dyn();

    let results = invert_multi(&lr_arr, &g, &d, opts)?;
    results
        .into_iter()
        .map(|r| {
            let hr4 = r
                .hr_image
                .into_dimensionality::<ndarray::Ix4>()
                .expect("hr rank");
            let lr4 = r
                .lr_recon
                .into_dimensionality::<ndarray::Ix4>()
                .expect("lr rank");
            Ok(SolutionRecord {
                k: r.solution_index,
                seed: r.seed,
                iterations: opts.iterations,
                best_objective: r.best_objective,
                z_star: LatentCode::new(r.z_star)?,
                hr_image: ImageTensor::from_batch(&hr4, 0)?,
                lr_recon: ImageTensor::from_batch(&lr4, 0)?,
                objective_trace: r.objective_trace,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct ReportLine<'a> {
    id: &'a str,
    k: usize,
    seed: u64,
    iterations: usize,
    best_objective: f64,
}

/// Writes per-solution PNG pairs plus a JSON-lines report (and per-solution
/// trace CSVs when `record_trace` is on). Returns the report path.
pub fn write_solutions(
    dir: &Path,
    id: &str,
    solutions: &[SolutionRecord],
    record_trace: bool,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let mut report = String::new();
    for s in solutions {
        crate::imagedata::save_image_file(
            &dir.join(format!("{id}_sol{}_hr.png", s.k)),
            &s.hr_image,
        )?;
        crate::imagedata::save_image_file(
            &dir.join(format!("{id}_sol{}_lr.png", s.k)),
            &s.lr_recon,
        )?;
        if record_trace {
            let mut csv = String::from("iteration,objective\n");
            for (i, v) in s.objective_trace.iter().enumerate() {
                csv.push_str(&format!("{i},{v}\n"));
            }
            let p = dir.join(format!("{id}_sol{}_trace.csv", s.k));
            std::fs::write(&p, csv).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
        }
        let line = ReportLine {
            id,
            k: s.k,
            seed: s.seed,
            iterations: s.iterations,
            best_objective: s.best_objective,
        };
        report.push_str(&serde_json::to_string(&line).expect("report line"));
        report.push('\n');
    }
    let path = dir.join(format!("{id}_report.jsonl"));
    std::fs::write(&path, report).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrader::init_degrader;
    use crate::hrgen::init_generator;
    use crate::imagedata::synth_dataset;
    use ndarray::IxDyn;

    /// G(z) = z² on a 1-dimensional latent.
    struct SquareGen;
    impl LatentGenerator for SquareGen {
        fn latent_len(&self) -> usize {
            1
        }
        fn generate_t(&self, z: &Tensor) -> Tensor {
            z.mul(z)
        }
    }

    /// D = identity.
    struct IdentityDeg;
    impl DegradeFn for IdentityDeg {
        fn degrade_t(&self, hr: &Tensor) -> Tensor {
            hr.add_scalar(0.0)
        }
    }

    fn target(v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(&[1]), v)
    }

    fn toy_opts(iterations: usize, seed: u64) -> InversionOptions {
        InversionOptions {
            iterations,
            seed,
            adam: AdamParams::with_lr(0.02),
            ..Default::default()
        }
    }

    #[test]
    fn objective_basics() {
        let g = SquareGen;
        let d = IdentityDeg;
        // exact preimage: z0 = 1.5 → lr = 2.25 → objective 0 at z0
        let z0 = Array1::from_elem(1, 1.5);
        let lr = target(2.25);
        assert_eq!(objective(&z0, &lr, &g, &d).unwrap(), 0.0);
        // non-negative for random z
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let z = standard_normal(&[1], &mut rng)
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            assert!(objective(&z, &lr, &g, &d).unwrap() >= 0.0);
        }
        // wrong latent length
        let z_bad = Array1::zeros(2);
        assert!(objective(&z_bad, &lr, &g, &d).is_err());
    }

    #[test]
    fn objective_self_consistency_is_exact() {
        // objective(z, D(G(z))) == 0 for any z
        let g = SquareGen;
        let d = IdentityDeg;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let z = standard_normal(&[1], &mut rng)
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            let zt = Tensor::leaf(z.clone().into_dyn());
            let lr = d.degrade_t(&g.generate_t(&zt)).data().clone();
            assert_eq!(objective(&z, &lr, &g, &d).unwrap(), 0.0);
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        // small random linear G and D on a 3-dim latent
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = standard_normal(&[6, 3], &mut rng);
        let b = standard_normal(&[4, 6], &mut rng);
        struct LinGen {
            a: ArrayD<f64>,
        }
        impl LatentGenerator for LinGen {
            fn latent_len(&self) -> usize {
                3
            }
            fn generate_t(&self, z: &Tensor) -> Tensor {
                Tensor::leaf(self.a.clone())
                    .matmul(&z.reshape(&[3, 1]))
                    .reshape(&[6])
            }
        }
        struct LinDeg {
            b: ArrayD<f64>,
        }
        impl DegradeFn for LinDeg {
            fn degrade_t(&self, hr: &Tensor) -> Tensor {
                Tensor::leaf(self.b.clone())
                    .matmul(&hr.reshape(&[6, 1]))
                    .reshape(&[4])
            }
        }
        let g = LinGen { a };
        let d = LinDeg { b };
        let lr = standard_normal(&[4], &mut rng);
        let z = standard_normal(&[3], &mut rng);

        let zt = Tensor::var(z.clone());
        let obj = objective_t(&zt, &Tensor::leaf(lr.clone()), &g, &d);
        let analytic = grad(&obj, &[&zt], false).remove(0);

        let f = |arr: &ArrayD<f64>| {
            let z1 = arr.clone().into_dimensionality::<ndarray::Ix1>().unwrap();
            objective(&z1, &lr, &g, &d).unwrap()
        };
        let h = 1e-6;
        for idx in 0..3 {
            let mut plus = z.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = z.clone();
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
    fn bimodal_toy_recovers_both_preimages() {
        let g = SquareGen;
        let d = IdentityDeg;
        let lr = target(4.0);
        let opts = InversionOptions {
            num_solutions: 10,
            ..toy_opts(3000, 7)
        };
        let results = invert_multi(&lr, &g, &d, &opts).unwrap();
        assert_eq!(results.len(), 10);

        // sorted by objective
        for w in results.windows(2) {
            assert!(w[0].best_objective <= w[1].best_objective);
        }
        // both preimages found and the best objective is tight
        let zs: Vec<f64> = results.iter().map(|r| r.z_star[0]).collect();
        assert!(
            zs.iter().any(|z| (z - 2.0).abs() < 1e-2),
            "missing +2 preimage in {zs:?}"
        );
        assert!(
            zs.iter().any(|z| (z + 2.0).abs() < 1e-2),
            "missing −2 preimage in {zs:?}"
        );
        assert!(results[0].best_objective <= 1e-3);
    }

    #[test]
    fn invert_is_deterministic_and_matches_k1_multi() {
        let g = SquareGen;
        let d = IdentityDeg;
        let lr = target(4.0);
        let opts = InversionOptions {
            num_solutions: 1,
            ..toy_opts(500, 11)
        };
        let a = invert(&lr, &g, &d, &opts).unwrap();
        let b = invert(&lr, &g, &d, &opts).unwrap();
        assert_eq!(a.z_star, b.z_star);
        assert_eq!(a.objective_trace, b.objective_trace);

        let multi = invert_multi(&lr, &g, &d, &opts).unwrap();
        assert_eq!(multi.len(), 1);
        assert_eq!(multi[0].z_star, a.z_star);
        assert_eq!(multi[0].best_objective, a.best_objective);
    }

    #[test]
    fn best_objective_is_min_of_trace_and_running_min_is_monotone() {
        let g = SquareGen;
        let d = IdentityDeg;
        let lr = target(3.0);
        let r = invert(&lr, &g, &d, &toy_opts(200, 5)).unwrap();
        let min = r
            .objective_trace
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_objective, min);
        let mut best = f64::INFINITY;
        let mut running = Vec::new();
        for v in &r.objective_trace {
            best = best.min(*v);
            running.push(best);
        }
        for w in running.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_initializations() {
        let mut inits = Vec::new();
        for k in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(123, k));
            inits.push(standard_normal(&[8], &mut rng));
        }
        for i in 0..inits.len() {
            for j in (i + 1)..inits.len() {
                let dist: f64 = inits[i]
                    .iter()
                    .zip(inits[j].iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(dist > 0.0, "seeds {i} and {j} collided");
            }
        }
    }

    #[test]
    fn linear_toy_matches_least_squares_oracle() {
        // G and D linear with full-column-rank composition; the target is in
        // the range, so the normal-equations solution is the exact optimum.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = standard_normal(&[6, 3], &mut rng); // composition matrix
        let c = standard_normal(&[6], &mut rng); // offset
        struct AffineGen {
            m: ArrayD<f64>,
            c: ArrayD<f64>,
        }
        impl LatentGenerator for AffineGen {
            fn latent_len(&self) -> usize {
                3
            }
            fn generate_t(&self, z: &Tensor) -> Tensor {
                Tensor::leaf(self.m.clone())
                    .matmul(&z.reshape(&[3, 1]))
                    .reshape(&[6])
                    .add(&Tensor::leaf(self.c.clone()))
            }
        }
        let g = AffineGen { m: m.clone(), c: c.clone() };
        let d = IdentityDeg;

        let z_true = standard_normal(&[3], &mut rng);
        let zt = Tensor::leaf(z_true.clone());
        let lr = g.generate_t(&zt).data().clone();

        // normal-equations oracle: z* = (MᵀM)⁻¹ Mᵀ (lr − c), image = M z* + c
        let m2 = m.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let rhs_vec = &lr - &c;
        let rhs1 = rhs_vec.into_dimensionality::<ndarray::Ix1>().unwrap();
        let mt = m2.t();
        let mtm = mt.dot(&m2); // 3×3
        let mtr = mt.dot(&rhs1); // 3
        let z_ls = solve3(&mtm, &mtr);
        let mut oracle_img = c.clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        for i in 0..6 {
            for j in 0..3 {
                oracle_img[i] += m2[(i, j)] * z_ls[j];
            }
        }

        let opts = InversionOptions {
            num_solutions: 1,
            ..toy_opts(4000, 3)
        };
        let r = invert(&lr, &g, &d, &opts).unwrap();
        let recovered = d
            .degrade_t(&Tensor::leaf(r.hr_image.clone()))
            .data()
            .clone();
        for (got, want) in recovered.iter().zip(oracle_img.iter()) {
            assert!(
                (got - want).abs() < 1e-3,
                "recovered {got}, oracle {want}"
            );
        }
    }

    /// Gaussian elimination for the 3×3 normal equations (test oracle only).
    fn solve3(a: &ndarray::Array2<f64>, b: &ndarray::Array1<f64>) -> [f64; 3] {
        let mut m = [[0.0f64; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = a[(i, j)];
            }
            m[i][3] = b[i];
        }
        for col in 0..3 {
            let pivot = (col..3)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                .unwrap();
            m.swap(col, pivot);
            for row in 0..3 {
                if row != col {
                    let f = m[row][col] / m[col][col];
                    for k in col..4 {
                        m[row][k] -= f * m[col][k];
                    }
                }
            }
        }
        [m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]]
    }

    #[test]
    fn frozen_networks_are_untouched_and_recon_is_selfconsistent() {
        let gen_dir = tempfile::tempdir().unwrap();
        let deg_dir = tempfile::tempdir().unwrap();
        let gen_ckpt = init_generator(&[8, 8, 8], 2, true, 31, gen_dir.path()).unwrap();
        let deg_ckpt = init_degrader(6, 32, deg_dir.path()).unwrap();

        let g_hash = gen_ckpt.gen_store.digest();
        let d_hash = deg_ckpt.gen_store.digest();

        let lr = synth_dataset(1, 16, 70).unwrap().load_image(0).unwrap();
        let opts = InversionOptions {
            iterations: 5,
            num_solutions: 2,
            seed: 9,
            ..Default::default()
        };
        let solutions = super_resolve(&lr, &gen_ckpt, &deg_ckpt, &opts).unwrap();
        assert_eq!(solutions.len(), 2);

        // re-degrading a returned HR candidate reproduces its lr_recon
        let d = DegraderAdapter::new(&deg_ckpt, &NoiseVector::zeros());
        for s in &solutions {
            let re = d.degrade_t(&Tensor::leaf(s.hr_image.to_batch().into_dyn()));
            let re4 = re
                .data()
                .clone()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let re_img = ImageTensor::from_batch(&re4, 0).unwrap();
            assert!(re_img.l1_to(&s.lr_recon) < 1e-12);
        }

        assert_eq!(gen_ckpt.gen_store.digest(), g_hash);
        assert_eq!(deg_ckpt.gen_store.digest(), d_hash);
    }

    #[test]
    fn optimized_solution_beats_random_baseline_percentile() {
        let gen_dir = tempfile::tempdir().unwrap();
        let deg_dir = tempfile::tempdir().unwrap();
        let gen_ckpt = init_generator(&[8, 8, 8], 2, true, 41, gen_dir.path()).unwrap();
        let deg_ckpt = init_degrader(6, 42, deg_dir.path()).unwrap();

        // LR input produced by degrading an HR image through the pipeline
        let hr = synth_dataset(1, 64, 71).unwrap().load_image(0).unwrap();
        let lr = deg_ckpt.degrade(&hr, &NoiseVector::zeros()).unwrap();

        let opts = InversionOptions {
            iterations: 60,
            num_solutions: 2,
            seed: 17,
            adam: AdamParams::with_lr(0.05),
            ..Default::default()
        };
        let solutions = super_resolve(&lr, &gen_ckpt, &deg_ckpt, &opts).unwrap();

        let g = HrGeneratorAdapter::new(&gen_ckpt);
        let d = DegraderAdapter::new(&deg_ckpt, &NoiseVector::zeros());
        let baseline =
            random_objective_samples(&lr.to_batch().into_dyn(), &g, &d, 50, 1.0, 99).unwrap();
        let p90 = percentile(&baseline, 0.9);
        assert!(
            solutions[0].best_objective <= p90,
            "best objective {} above 90th percentile {p90}",
            solutions[0].best_objective
        );
    }

    #[test]
    fn write_solutions_emits_pngs_and_report() {
        let gen_dir = tempfile::tempdir().unwrap();
        let deg_dir = tempfile::tempdir().unwrap();
        let gen_ckpt = init_generator(&[8, 8], 1, true, 51, gen_dir.path()).unwrap();
        let deg_ckpt = init_degrader(6, 52, deg_dir.path()).unwrap();
        let lr = synth_dataset(1, 16, 72).unwrap().load_image(0).unwrap();
        let opts = InversionOptions {
            iterations: 3,
            num_solutions: 3,
            seed: 1,
            record_trace: true,
            ..Default::default()
        };
        let solutions = super_resolve(&lr, &gen_ckpt, &deg_ckpt, &opts).unwrap();
        let out = tempfile::tempdir().unwrap();
        let report = write_solutions(out.path(), "img0", &solutions, true).unwrap();
        let text = std::fs::read_to_string(&report).unwrap();
        assert_eq!(text.lines().count(), 3);
        for k in 0..3 {
            assert!(out.path().join(format!("img0_sol{k}_hr.png")).exists());
            assert!(out.path().join(format!("img0_sol{k}_lr.png")).exists());
            assert!(out.path().join(format!("img0_sol{k}_trace.csv")).exists());
        }
    }
}
