//! The HR→LR degradation pair: a noise-conditioned encoder-decoder generator
//! (64×64 → 16×16), a plain residual discriminator on 16×16 images, the
//! hinge + gradient-penalty training loop, and checkpointing.
//!
//! Training is unpaired: real LR images push degraded HR outputs toward
//! realistic low-resolution statistics while the pixel loss ties each output
//! to its own source image.

pub mod loss;

pub use loss::{
    gan_loss_d, gan_loss_d_t, gan_loss_g, gan_loss_g_t, gradient_penalty, gradient_penalty_t,
    l1_loss, l1_loss_t, pixel_loss, pixel_loss_t, total_loss, total_loss_t, upscale_f,
    LossWeights,
};

use crate::checkpoint::{load_weights, read_json, save_weights, write_json};
use crate::error::{Error, Result};
use crate::imagedata::{batch_iter, Dataset, ImageTensor, Role};
use crate::nn::{
    pixel_shuffle_t, pixel_unshuffle_t, standard_normal, upsample_bilinear_t, Adam, AdamParams,
    Conv2d, Linear, ParamStore, ParamTensors, ResBlock, LEAKY_SLOPE,
};
use crate::percept::FeatureExtractor;
use crate::tensor::{concat, Tensor};
use ndarray::{Array1, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// The 100-dimensional degradation-conditioning noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector(Array1<f64>);

impl NoiseVector {
    pub const DIM: usize = 100;

    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.len() != Self::DIM {
            return Err(Error::Shape(format!(
                "noise vector must have dimension {}, got {}",
                Self::DIM,
                values.len()
            )));
        }
        Ok(Self(values))
    }

    /// i.i.d. standard normal draw.
    pub fn standard(rng: &mut ChaCha8Rng) -> Self {
        let arr = standard_normal(&[Self::DIM], rng);
        Self(arr.into_dimensionality::<ndarray::Ix1>().unwrap())
    }

    pub fn zeros() -> Self {
        Self(Array1::zeros(Self::DIM))
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::standard(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }
}

// ---- depth-to-space as a public image op ----

/// Depth-to-space on a single `(C·r², H, W)` array:
/// `out(c, r·h+dy, r·w+dx) = in(c·r² + dy·r + dx, h, w)`.
pub fn pixel_shuffle(x: &Array3<f64>, r: usize) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Shape(format!(
            "pixel_shuffle: {c} channels not divisible by r²={}",
            r * r
        )));
    }
    let leaf = Tensor::leaf(
        x.clone()
            .into_shape_with_order((1, c, h, w))
            .unwrap()
            .into_dyn(),
    );
    let out = pixel_shuffle_t(&leaf, r);
    let s = out.shape().to_vec();
    Ok(out
        .data()
        .clone()
        .into_shape_with_order((s[1], s[2], s[3]))
        .unwrap())
}

/// Space-to-depth; exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Array3<f64>, r: usize) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!(
            "pixel_unshuffle: {h}×{w} not divisible by r={r}"
        )));
    }
    let leaf = Tensor::leaf(
        x.clone()
            .into_shape_with_order((1, c, h, w))
            .unwrap()
            .into_dyn(),
    );
    let out = pixel_unshuffle_t(&leaf, r);
    let s = out.shape().to_vec();
    Ok(out
        .data()
        .clone()
        .into_shape_with_order((s[1], s[2], s[3]))
        .unwrap())
}

// ---- networks ----

pub const HR_SIDE: usize = 64;
pub const LR_SIDE: usize = 16;

/// Degradation generator: noise projection to a fourth input channel, an
/// encoder pooling 64→4, and a pixel-shuffle decoder back up to 16. Twelve
/// residual blocks in six groups of two.
#[derive(Clone, Debug)]
pub struct DegraderGenerator {
    channels: usize,
    noise_proj: Linear,
    stem: Conv2d,
    groups: Vec<[ResBlock; 2]>,
    up1: Conv2d,
    up2: Conv2d,
    head: Conv2d,
}

impl DegraderGenerator {
    pub fn build(channels: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let c = channels;
        let noise_proj = Linear::new(store, rng, "dg.noise", NoiseVector::DIM, HR_SIDE * HR_SIDE);
        let stem = Conv2d::new(store, rng, "dg.stem", 4, c, 3, 1, 1);
        let groups = (0..6)
            .map(|g| {
                [
                    ResBlock::new(store, rng, &format!("dg.g{g}.b0"), c),
                    ResBlock::new(store, rng, &format!("dg.g{g}.b1"), c),
                ]
            })
            .collect();
        let up1 = Conv2d::new(store, rng, "dg.up1", c, 4 * c, 3, 1, 1);
        let up2 = Conv2d::new(store, rng, "dg.up2", c, 4 * c, 3, 1, 1);
        let head = Conv2d::new(store, rng, "dg.head", c, 3, 3, 1, 1);
        Self { channels, noise_proj, stem, groups, up1, up2, head }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Noise projection stage: affine map to 64·64 values reshaped row-major
    /// into a single 64×64 channel.
    pub fn project_noise(&self, store: &ParamStore, z: &NoiseVector) -> Array3<f64> {
        let p = store.leaves(false);
        let zt = Tensor::leaf(
            z.values()
                .clone()
                .into_shape_with_order((1, NoiseVector::DIM))
                .unwrap()
                .into_dyn(),
        );
        let out = self.noise_proj.forward(&p, &zt);
        out.data()
            .clone()
            .into_shape_with_order((1, HR_SIDE, HR_SIDE))
            .unwrap()
    }

    /// Batched forward: `(N,3,64,64) × (N,100) -> (N,3,16,16)`, output in
    /// [-1, 1] via tanh.
    pub fn forward_t(&self, p: &ParamTensors, hr: &Tensor, z: &Tensor) -> Tensor {
        let n = hr.shape()[0];
        assert_eq!(hr.shape(), &[n, 3, HR_SIDE, HR_SIDE], "degrader: bad hr shape");
        assert_eq!(z.shape(), &[n, NoiseVector::DIM], "degrader: bad noise shape");

        let noise_map = self
            .noise_proj
            .forward(p, z)
            .reshape(&[n, 1, HR_SIDE, HR_SIDE]);
        let x = concat(1, &[hr, &noise_map]);
        let mut h = self.stem.forward(p, &x).leaky_relu(LEAKY_SLOPE);
        // encoder: 64 → 32 → 16 → 8 → 4
        for g in 0..4 {
            h = self.groups[g][0].forward(p, &h);
            h = self.groups[g][1].forward(p, &h);
            h = h.avg_pool2();
        }
        h = self.groups[4][0].forward(p, &h);
        h = self.groups[4][1].forward(p, &h);
        // decoder: 4 → 8 → 16
        h = pixel_shuffle_t(&self.up1.forward(p, &h).leaky_relu(LEAKY_SLOPE), 2);
        h = self.groups[5][0].forward(p, &h);
        h = self.groups[5][1].forward(p, &h);
        h = pixel_shuffle_t(&self.up2.forward(p, &h).leaky_relu(LEAKY_SLOPE), 2);
        self.head.forward(p, &h).tanh()
    }
}

/// LR discriminator: six residual blocks, no normalization anywhere,
/// max-pooling on the last two blocks (16→8→4), linear score head.
#[derive(Clone, Debug)]
pub struct DegraderDiscriminator {
    channels: usize,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    head: Linear,
}

impl DegraderDiscriminator {
    pub fn build(channels: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let c = channels;
        let stem = Conv2d::new(store, rng, "dd.stem", 3, c, 3, 1, 1);
        let blocks = (0..6)
            .map(|b| ResBlock::new(store, rng, &format!("dd.b{b}"), c))
            .collect();
        let head = Linear::new(store, rng, "dd.head", c * 4 * 4, 1);
        Self { channels: c, stem, blocks, head }
    }

    /// Batched scores `(N,3,16,16) -> (N,)`.
    pub fn score_t(&self, p: &ParamTensors, lr: &Tensor) -> Tensor {
        let n = lr.shape()[0];
        assert_eq!(lr.shape(), &[n, 3, LR_SIDE, LR_SIDE], "discriminator: bad input shape");
        let mut h = self.stem.forward(p, lr).leaky_relu(LEAKY_SLOPE);
        for b in 0..4 {
            h = self.blocks[b].forward(p, &h);
        }
        h = self.blocks[4].forward(p, &h).max_pool2();
        h = self.blocks[5].forward(p, &h).max_pool2();
        let flat = h.reshape(&[n, self.channels * 4 * 4]);
        self.head.forward(p, &flat).reshape(&[n])
    }
}

// ---- training ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DegraderTrainConfig {
    pub iterations: usize,
    pub d_steps_per_g_step: usize,
    pub gp_lambda: f64,
    pub batch_size: usize,
    pub channels: usize,
    pub weights: LossWeights,
    pub adam: AdamParams,
    pub upscale_factor: usize,
    pub seed: u64,
}

impl Default for DegraderTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            d_steps_per_g_step: 5,
            gp_lambda: 10.0,
            batch_size: 64,
            channels: 64,
            weights: LossWeights::default(),
            adam: AdamParams::default(),
            upscale_factor: 4,
            seed: 0,
        }
    }
}

impl DegraderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidInput("iterations must be >= 1".into()));
        }
        if self.d_steps_per_g_step == 0 {
            return Err(Error::InvalidInput("d_steps_per_g_step must be >= 1".into()));
        }
        if self.gp_lambda < 0.0 {
            return Err(Error::InvalidInput("gp_lambda must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        if self.upscale_factor != 4 {
            return Err(Error::InvalidInput("upscale factor must be 4".into()));
        }
        self.weights.validate()
    }
}

/// One row of the loss history CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iteration: usize,
    pub d_loss: f64,
    pub gp: f64,
    pub g_gan: f64,
    pub g_l1: f64,
    pub g_vgg: f64,
    pub total: f64,
}

impl LossRow {
    pub fn is_finite(&self) -> bool {
        [self.d_loss, self.gp, self.g_gan, self.g_l1, self.g_vgg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = String::from("iteration,d_loss,gp,g_gan,g_l1,g_vgg,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration, r.d_loss, r.gp, r.g_gan, r.g_l1, r.g_vgg, r.total
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::Io(format!("{}: bad CSV row {i}", path.display())));
        }
        let field = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Io(format!("{}: row {i}: {e}", path.display())))
        };
        rows.push(LossRow {
            iteration: parts[0]
                .parse()
                .map_err(|e| Error::Io(format!("{}: row {i}: {e}", path.display())))?,
            d_loss: field(parts[1])?,
            gp: field(parts[2])?,
            g_gan: field(parts[3])?,
            g_l1: field(parts[4])?,
            g_vgg: field(parts[5])?,
            total: field(parts[6])?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DegraderManifest {
    pub format_version: u32,
    pub kind: String,
    pub channels: usize,
    pub noise_dim: usize,
    pub hr_side: usize,
    pub lr_side: usize,
    pub seed: u64,
    pub iterations: usize,
    pub loss_history: String,
}

/// A trained (or freshly initialized) degradation pair bound to a directory.
pub struct DegraderCheckpoint {
    pub dir: PathBuf,
    pub manifest: DegraderManifest,
    pub gen: DegraderGenerator,
    pub disc: DegraderDiscriminator,
    pub gen_store: ParamStore,
    pub disc_store: ParamStore,
}

impl DegraderCheckpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DegraderManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.kind != "degrader" {
            return Err(Error::Checkpoint(format!(
                "{}: expected a degrader checkpoint, found kind {:?}",
                dir.display(),
                manifest.kind
            )));
        }
        if manifest.noise_dim != NoiseVector::DIM
            || manifest.hr_side != HR_SIDE
            || manifest.lr_side != LR_SIDE
        {
            return Err(Error::Checkpoint(format!(
                "{}: incompatible architecture in manifest",
                dir.display()
            )));
        }
        let gen_store = load_weights(&dir.join("weights_gen.bin"))?;
        let disc_store = load_weights(&dir.join("weights_disc.bin"))?;

        let mut scratch_g = ParamStore::new();
        let mut scratch_d = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen = DegraderGenerator::build(manifest.channels, &mut scratch_g, &mut rng);
        let disc = DegraderDiscriminator::build(manifest.channels, &mut scratch_d, &mut rng);
        scratch_g.same_layout(&gen_store)?;
        scratch_d.same_layout(&disc_store)?;

        Ok(Self { dir: dir.to_path_buf(), manifest, gen, disc, gen_store, disc_store })
    }

    /// Degrades one HR image under one noise vector. Pure in
    /// (weights, hr, z).
    pub fn degrade(&self, hr: &ImageTensor, z: &NoiseVector) -> Result<ImageTensor> {
        if hr.side() != HR_SIDE {
            return Err(Error::Shape(format!(
                "degrade expects {HR_SIDE}×{HR_SIDE} input, got {side}×{side}",
                side = hr.side()
            )));
        }
        let p = self.gen_store.leaves(false);
        let hr_t = Tensor::leaf(hr.to_batch().into_dyn());
        let z_t = Tensor::leaf(
            z.values()
                .clone()
                .into_shape_with_order((1, NoiseVector::DIM))
                .unwrap()
                .into_dyn(),
        );
        let out = self.gen.forward_t(&p, &hr_t, &z_t);
        let arr = out
            .data()
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("degrade: rank");
        ImageTensor::from_batch(&arr, 0)
    }

    /// Discriminator score of one LR image.
    pub fn disc_score(&self, lr: &ImageTensor) -> Result<f64> {
        if lr.side() != LR_SIDE {
            return Err(Error::Shape(format!(
                "disc_score expects {LR_SIDE}×{LR_SIDE} input, got {side}×{side}",
                side = lr.side()
            )));
        }
        let p = self.disc_store.leaves(false);
        let t = Tensor::leaf(lr.to_batch().into_dyn());
        Ok(self.disc.score_t(&p, &t).data()[[0]])
    }

    /// Batched discriminator scores.
    pub fn disc_score_batch(&self, lr: &ndarray::Array4<f64>) -> Vec<f64> {
        let p = self.disc_store.leaves(false);
        let t = Tensor::leaf(lr.clone().into_dyn());
        self.disc.score_t(&p, &t).data().iter().cloned().collect()
    }
}

/// Runs the alternating hinge + gradient-penalty loop:
/// `d_steps_per_g_step` discriminator updates per generator update. Writes
/// `manifest.json`, both weight blobs and `loss.csv` into `out_dir`.
pub fn train_degrader(
    cfg: &DegraderTrainConfig,
    hr: &Dataset,
    lr: &Dataset,
    fx: &FeatureExtractor,
    out_dir: &Path,
) -> Result<DegraderCheckpoint> {
    cfg.validate()?;
    if hr.role() != Role::Hr {
        return Err(Error::InvalidInput("train_degrader: first dataset must have role HR".into()));
    }
    if lr.role() != Role::Lr {
        return Err(Error::InvalidInput("train_degrader: second dataset must have role LR".into()));
    }
    if hr.is_empty() || lr.is_empty() {
        return Err(Error::InvalidInput("train_degrader: empty dataset".into()));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen_store = ParamStore::new();
    let gen = DegraderGenerator::build(cfg.channels, &mut gen_store, &mut init_rng);
    let mut disc_store = ParamStore::new();
    let disc = DegraderDiscriminator::build(cfg.channels, &mut disc_store, &mut init_rng);

    let mut hr_stream = batch_iter(hr, cfg.batch_size, cfg.seed.wrapping_add(1))?;
    let mut lr_stream = batch_iter(lr, cfg.batch_size, cfg.seed.wrapping_add(2))?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut gp_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));

    let mut adam_g = Adam::new(cfg.adam);
    let mut adam_d = Adam::new(cfg.adam);
    let mut rows: Vec<LossRow> = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        // -- discriminator updates (gradient penalty included in each) --
        let mut d_loss_acc = 0.0;
        let mut gp_acc = 0.0;
        for _ in 0..cfg.d_steps_per_g_step {
            let hr_batch = hr_stream.next_batch()?;
            let lr_batch = lr_stream.next_batch()?;
            // short tail batches of the two streams need not line up; the
            // penalty interpolates pairs, so truncate to the common size
            let n = hr_batch.data.dim().0.min(lr_batch.data.dim().0);
            let hr_data = hr_batch.data.slice_axis(Axis(0), (0..n).into()).to_owned();
            let lr_data = lr_batch.data.slice_axis(Axis(0), (0..n).into()).to_owned();
            let z = standard_normal(&[n, NoiseVector::DIM], &mut noise_rng);

            // fake LR from the frozen-side generator pass
            let gp_frozen = gen_store.leaves(false);
            let fake = gen.forward_t(
                &gp_frozen,
                &Tensor::leaf(hr_data.into_dyn()),
                &Tensor::leaf(z),
            );

            let pd = disc_store.leaves(true);
            let real_t = Tensor::leaf(lr_data.clone().into_dyn());
            let real_scores = disc.score_t(&pd, &real_t);
            let fake_scores = disc.score_t(&pd, &fake);
            let hinge = gan_loss_d_t(&real_scores, &fake_scores);
            let gp = gradient_penalty_t(
                |x| disc.score_t(&pd, x),
                &lr_data.into_dyn(),
                fake.data(),
                cfg.gp_lambda,
                &mut gp_rng,
            )?;
            let d_total = hinge.add(&gp);

            d_loss_acc += hinge.scalar_value();
            gp_acc += gp.scalar_value();

            let grads = pd.grads(&d_total);
            adam_d.step(&mut disc_store, &grads);
        }
        let d_loss = d_loss_acc / cfg.d_steps_per_g_step as f64;
        let gp_val = gp_acc / cfg.d_steps_per_g_step as f64;

        // -- generator update --
        let hr_batch = hr_stream.next_batch()?;
        let z = standard_normal(&[hr_batch.data.dim().0, NoiseVector::DIM], &mut noise_rng);
        let pg = gen_store.leaves(true);
        let pd_frozen = disc_store.leaves(false);
        let hr_t = Tensor::leaf(hr_batch.data.into_dyn());
        let fake = gen.forward_t(&pg, &hr_t, &Tensor::leaf(z));
        let scores = disc.score_t(&pd_frozen, &fake);
        let g_gan = gan_loss_g_t(&scores);

        let up = upsample_bilinear_t(&fake, cfg.upscale_factor);
        let g_l1 = l1_loss_t(&up, &hr_t);
        let g_vgg = if cfg.weights.delta != 0.0 {
            fx.perceptual_distance_t(&up, &hr_t)
        } else {
            Tensor::scalar(0.0)
        };
        let pixel = g_l1.scale(cfg.weights.gamma).add(&g_vgg.scale(cfg.weights.delta));
        let total = total_loss_t(&pixel, &g_gan, &cfg.weights);

        let row = LossRow {
            iteration: it,
            d_loss,
            gp: gp_val,
            g_gan: g_gan.scalar_value(),
            g_l1: g_l1.scalar_value(),
            g_vgg: g_vgg.scalar_value(),
            total: total.scalar_value(),
        };
        if !row.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss at iteration {it}: d={} gp={} g_gan={} g_l1={} g_vgg={} total={}",
                row.d_loss, row.gp, row.g_gan, row.g_l1, row.g_vgg, row.total
            )));
        }

        let grads = pg.grads(&total);
        adam_g.step(&mut gen_store, &grads);
        rows.push(row);
    }

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;
    let manifest = DegraderManifest {
        format_version: 1,
        kind: "degrader".into(),
        channels: cfg.channels,
        noise_dim: NoiseVector::DIM,
        hr_side: HR_SIDE,
        lr_side: LR_SIDE,
        seed: cfg.seed,
        iterations: cfg.iterations,
        loss_history: "loss.csv".into(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    save_weights(&out_dir.join("weights_gen.bin"), &gen_store)?;
    save_weights(&out_dir.join("weights_disc.bin"), &disc_store)?;
    write_loss_csv(&out_dir.join("loss.csv"), &rows)?;

    Ok(DegraderCheckpoint {
        dir: out_dir.to_path_buf(),
        manifest,
        gen,
        disc,
        gen_store,
        disc_store,
    })
}

/// Fresh random degradation pair saved to `out_dir` without training; useful
/// for toy pipelines and tests.
pub fn init_degrader(
    channels: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DegraderCheckpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen_store = ParamStore::new();
    let gen = DegraderGenerator::build(channels, &mut gen_store, &mut rng);
    let mut disc_store = ParamStore::new();
    let disc = DegraderDiscriminator::build(channels, &mut disc_store, &mut rng);
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;
    let manifest = DegraderManifest {
        format_version: 1,
        kind: "degrader".into(),
        channels,
        noise_dim: NoiseVector::DIM,
        hr_side: HR_SIDE,
        lr_side: LR_SIDE,
        seed,
        iterations: 0,
        loss_history: "loss.csv".into(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    save_weights(&out_dir.join("weights_gen.bin"), &gen_store)?;
    save_weights(&out_dir.join("weights_disc.bin"), &disc_store)?;
    write_loss_csv(&out_dir.join("loss.csv"), &[])?;
    Ok(DegraderCheckpoint {
        dir: out_dir.to_path_buf(),
        manifest,
        gen,
        disc,
        gen_store,
        disc_store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagedata::synth_dataset;
    use ndarray::Array4;
    use rand::Rng;

    fn tiny_cfg() -> DegraderTrainConfig {
        DegraderTrainConfig {
            iterations: 4,
            batch_size: 4,
            channels: 6,
            seed: 99,
            ..Default::default()
        }
    }

    #[test]
    fn noise_vector_dimension_is_enforced() {
        assert!(NoiseVector::new(Array1::zeros(100)).is_ok());
        assert!(NoiseVector::new(Array1::zeros(99)).is_err());
    }

    #[test]
    fn pixel_shuffle_spec_cases() {
        let x = Array3::from_shape_vec((4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dim(), (1, 2, 2));
        assert_eq!(y.as_slice().unwrap(), &[1.0, 2.0, 3.0, 4.0]);

        let big = Array3::zeros((12, 2, 2));
        assert_eq!(pixel_shuffle(&big, 2).unwrap().dim(), (3, 4, 4));

        // rearrangement is a bijection: multiset preserved
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rand = Array3::from_shape_simple_fn((8, 3, 5), || rng.gen_range(-1.0..1.0));
        let mut before: Vec<f64> = rand.iter().cloned().collect();
        let mut after: Vec<f64> = pixel_shuffle(&rand, 2).unwrap().iter().cloned().collect();
        before.sort_by(f64::total_cmp);
        after.sort_by(f64::total_cmp);
        assert_eq!(before, after);

        assert!(pixel_shuffle(&Array3::zeros((5, 2, 2)), 2).is_err());
    }

    #[test]
    fn pixel_shuffle_roundtrips_with_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(c, h, w, r) in &[(4usize, 1usize, 1usize, 2usize), (12, 2, 2, 2), (27, 3, 4, 3)] {
            let x = Array3::from_shape_simple_fn((c, h, w), || rng.gen_range(-1.0..1.0));
            let back = pixel_unshuffle(&pixel_shuffle(&x, r).unwrap(), r).unwrap();
            assert_eq!(x, back);
        }
    }

    #[test]
    fn project_noise_shape_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let gen = DegraderGenerator::build(4, &mut store, &mut rng);

        let z = NoiseVector::from_seed(1);
        let out = gen.project_noise(&store, &z);
        assert_eq!(out.dim(), (1, HR_SIDE, HR_SIDE));

        // zero the bias: projection becomes linear
        store.get_mut("dg.noise.b").fill(0.0);
        let zero = NoiseVector::zeros();
        let out0 = gen.project_noise(&store, &zero);
        assert!(out0.iter().all(|&v| v == 0.0));

        let a = NoiseVector::from_seed(2);
        let b = NoiseVector::from_seed(3);
        let sum = NoiseVector::new(a.values() + b.values()).unwrap();
        let pa = gen.project_noise(&store, &a);
        let pb = gen.project_noise(&store, &b);
        let psum = gen.project_noise(&store, &sum);
        for ((x, y), s) in pa.iter().zip(pb.iter()).zip(psum.iter()) {
            assert!((x + y - s).abs() < 1e-9);
        }
    }

    #[test]
    fn disc_batched_scoring_equals_per_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let disc = DegraderDiscriminator::build(6, &mut store, &mut rng);

        let d = synth_dataset(3, 16, 40).unwrap();
        let mut batch = Array4::<f64>::zeros((3, 3, 16, 16));
        for i in 0..3 {
            batch
                .index_axis_mut(Axis(0), i)
                .assign(d.load_image(i).unwrap().data());
        }
        let p = store.leaves(false);
        let batched = disc.score_t(&p, &Tensor::leaf(batch.clone().into_dyn()));
        for i in 0..3 {
            let single = disc.score_t(
                &p,
                &Tensor::leaf(d.load_image(i).unwrap().to_batch().into_dyn()),
            );
            let a = batched.data()[[i]];
            let b = single.data()[[0]];
            assert!(a.is_finite());
            assert!((a - b).abs() < 1e-12, "batched {a} vs single {b}");
        }
    }

    #[test]
    fn smoke_training_reduces_l1_and_conditions_on_noise() {
        // 50 iterations on 32 synthetic images
        let hr = synth_dataset(32, 64, 54).unwrap();
        let lr = synth_dataset(32, 16, 55).unwrap();
        let fx = FeatureExtractor::random_with(2, 64, &[4, 8]);
        let cfg = DegraderTrainConfig {
            iterations: 50,
            batch_size: 4,
            channels: 6,
            seed: 21,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ckpt = train_degrader(&cfg, &hr, &lr, &fx, dir.path()).unwrap();
        assert!(dir.path().join("manifest.json").exists());

        let rows = read_loss_csv(&dir.path().join("loss.csv")).unwrap();
        assert_eq!(rows.len(), 50);
        assert!(rows.iter().all(|r| r.is_finite()), "non-finite loss logged");
        assert!(
            rows.last().unwrap().g_l1 < rows[0].g_l1,
            "generator L1 term did not decrease: {} -> {}",
            rows[0].g_l1,
            rows.last().unwrap().g_l1
        );

        // distinct noise vectors give distinct LR outputs on the trained model
        let hr_img = hr.load_image(0).unwrap();
        let a = ckpt.degrade(&hr_img, &NoiseVector::from_seed(1)).unwrap();
        let b = ckpt.degrade(&hr_img, &NoiseVector::from_seed(2)).unwrap();
        assert!(a.l1_to(&b) > 0.0, "noise conditioning has no effect");
    }

    #[test]
    fn degrade_is_deterministic_in_shape_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = init_degrader(6, 7, dir.path()).unwrap();
        let hr = synth_dataset(1, 64, 41).unwrap().load_image(0).unwrap();
        let z = NoiseVector::from_seed(11);
        let a = ckpt.degrade(&hr, &z).unwrap();
        let b = ckpt.degrade(&hr, &z).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.side(), 16);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));

        // wrong input resolution
        let small = synth_dataset(1, 16, 41).unwrap().load_image(0).unwrap();
        assert!(ckpt.degrade(&small, &z).is_err());
    }

    #[test]
    fn training_aborts_cleanly_on_bad_roles() {
        let hr = synth_dataset(4, 64, 50).unwrap();
        let lr = synth_dataset(4, 16, 51).unwrap();
        let fx = FeatureExtractor::random(1);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        assert!(train_degrader(&cfg, &lr, &hr, &fx, dir.path()).is_err());
        let empty = synth_dataset(0, 64, 50).unwrap();
        assert!(train_degrader(&cfg, &empty, &lr, &fx, dir.path()).is_err());
    }

    #[test]
    fn short_training_runs_are_deterministic() {
        let hr = synth_dataset(8, 64, 52).unwrap();
        let lr = synth_dataset(8, 16, 53).unwrap();
        let fx = FeatureExtractor::random_with(1, 64, &[4, 8]);
        let cfg = tiny_cfg();

        let d1 = tempfile::tempdir().unwrap();
        let c1 = train_degrader(&cfg, &hr, &lr, &fx, d1.path()).unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let c2 = train_degrader(&cfg, &hr, &lr, &fx, d2.path()).unwrap();

        assert_eq!(c1.gen_store.digest(), c2.gen_store.digest());
        let csv1 = std::fs::read(d1.path().join("loss.csv")).unwrap();
        let csv2 = std::fs::read(d2.path().join("loss.csv")).unwrap();
        assert_eq!(csv1, csv2);

        let rows = read_loss_csv(&d1.path().join("loss.csv")).unwrap();
        assert_eq!(rows.len(), cfg.iterations);
        assert!(rows.iter().all(|r| r.is_finite()));
    }

    #[test]
    fn checkpoint_reload_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = init_degrader(6, 8, dir.path()).unwrap();
        let hr = synth_dataset(1, 64, 42).unwrap().load_image(0).unwrap();
        let z = NoiseVector::from_seed(12);
        let before = ckpt.degrade(&hr, &z).unwrap();

        let reloaded = DegraderCheckpoint::load(dir.path()).unwrap();
        let after = reloaded.degrade(&hr, &z).unwrap();
        assert_eq!(before.data(), after.data());

        // architecture mismatch is a checkpoint error
        let dir2 = tempfile::tempdir().unwrap();
        init_degrader(8, 8, dir2.path()).unwrap();
        let mut manifest: DegraderManifest =
            read_json(&dir2.path().join("manifest.json")).unwrap();
        manifest.channels = 6;
        write_json(&dir2.path().join("manifest.json"), &manifest).unwrap();
        assert!(matches!(
            DegraderCheckpoint::load(dir2.path()),
            Err(Error::Checkpoint(_))
        ));
    }
}
