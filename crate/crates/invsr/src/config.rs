//! Run configuration: defaults, a flat `dotted.key = value` config file
//! format, and flag overrides layered on top.
//!
//! Seeds are always explicit — defaults are fixed constants, never clock
//! derived — so identical configs reproduce identical artifacts.

use crate::degrader::{DegraderTrainConfig, LossWeights};
use crate::error::{Error, Result};
use crate::hrgen::{GrowthSchedule, HrGenConfig};
use crate::imagedata::{load_manifest, synth_dataset, Dataset};
use crate::naminvert::InversionOptions;
use crate::nn::AdamParams;
use crate::percept::FeatureExtractor;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct DataConfig {
    pub hr_manifest: Option<PathBuf>,
    pub lr_manifest: Option<PathBuf>,
    pub synth_hr_count: usize,
    pub synth_lr_count: usize,
    pub synth_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            hr_manifest: None,
            lr_manifest: None,
            synth_hr_count: 200,
            synth_lr_count: 200,
            synth_seed: 1000,
        }
    }
}

impl DataConfig {
    pub fn hr_dataset(&self) -> Result<Dataset> {
        match &self.hr_manifest {
            Some(path) => load_manifest(path),
            None => synth_dataset(self.synth_hr_count, 64, self.synth_seed),
        }
    }

    pub fn lr_dataset(&self) -> Result<Dataset> {
        match &self.lr_manifest {
            Some(path) => load_manifest(path),
            None => synth_dataset(self.synth_lr_count, 16, self.synth_seed.wrapping_add(1)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PerceptConfig {
    pub backend: String,
    pub seed: u64,
    pub weights: Option<PathBuf>,
}

impl Default for PerceptConfig {
    fn default() -> Self {
        Self { backend: "random".into(), seed: 7, weights: None }
    }
}

impl PerceptConfig {
    pub fn build(&self) -> Result<FeatureExtractor> {
        match self.backend.as_str() {
            "random" => Ok(FeatureExtractor::random(self.seed)),
            "pretrained" => {
                let dir = self.weights.as_ref().ok_or_else(|| {
                    Error::Config(
                        "percept.backend=pretrained requires percept.weights=<dir>".into(),
                    )
                })?;
                FeatureExtractor::pretrained_from(dir)
            }
            other => Err(Error::Config(format!(
                "percept.backend must be \"random\" or \"pretrained\", got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DegraderSection {
    pub iterations: usize,
    pub d_steps: usize,
    pub gp_lambda: f64,
    pub batch_size: usize,
    pub channels: usize,
    pub weights: LossWeights,
    pub lr: f64,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for DegraderSection {
    fn default() -> Self {
        let d = DegraderTrainConfig::default();
        Self {
            iterations: d.iterations,
            d_steps: d.d_steps_per_g_step,
            gp_lambda: d.gp_lambda,
            batch_size: d.batch_size,
            channels: d.channels,
            weights: d.weights,
            lr: d.adam.lr,
            seed: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HrgenSection {
    pub resolutions: Vec<usize>,
    pub epochs: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub fade_fraction: f64,
    pub channels: Vec<usize>,
    pub gp_lambda: f64,
    pub d_steps: usize,
    pub lr: f64,
    pub latent_sphere: bool,
    pub sample_grid: usize,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for HrgenSection {
    fn default() -> Self {
        let h = HrGenConfig::default();
        Self {
            resolutions: h.schedule.resolutions,
            epochs: h.schedule.epochs,
            batch_sizes: h.schedule.batch_sizes,
            fade_fraction: h.schedule.fade_fraction,
            channels: h.stage_channels,
            gp_lambda: h.gp_lambda,
            d_steps: h.d_steps,
            lr: h.adam.lr,
            latent_sphere: h.latent_sphere,
            sample_grid: h.sample_grid,
            seed: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InvertSection {
    pub iterations: usize,
    pub num_solutions: usize,
    pub init_scale: f64,
    pub lr: f64,
    pub record_trace: bool,
    pub sphere_project: bool,
    pub seed: Option<u64>,
}

impl Default for InvertSection {
    fn default() -> Self {
        let o = InversionOptions::default();
        Self {
            iterations: o.iterations,
            num_solutions: o.num_solutions,
            init_scale: o.init_scale,
            lr: o.adam.lr,
            record_trace: o.record_trace,
            sphere_project: o.sphere_project,
            seed: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricsConfig {
    pub sigma: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { sigma: 2.0 }
    }
}

/// Full run configuration; every command reads the sections it needs.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub out_dir: OutDir,
    pub seed: u64,
    pub data: DataConfig,
    pub percept: PerceptConfig,
    pub degrader: DegraderSection,
    pub hrgen: HrgenSection,
    pub invert: InvertSection,
    pub metrics: MetricsConfig,
}

#[derive(Clone, Debug)]
pub struct OutDir(pub PathBuf);

impl Default for OutDir {
    fn default() -> Self {
        Self(PathBuf::from("out"))
    }
}

impl RunConfig {
    /// Effective per-module seeds: explicit value if configured, otherwise a
    /// fixed offset from the base seed.
    pub fn degrader_seed(&self) -> u64 {
        self.degrader.seed.unwrap_or(self.seed.wrapping_add(100))
    }

    pub fn hrgen_seed(&self) -> u64 {
        self.hrgen.seed.unwrap_or(self.seed.wrapping_add(200))
    }

    pub fn invert_seed(&self) -> u64 {
        self.invert.seed.unwrap_or(self.seed.wrapping_add(300))
    }

    pub fn degrader_train_config(&self) -> DegraderTrainConfig {
        DegraderTrainConfig {
            iterations: self.degrader.iterations,
            d_steps_per_g_step: self.degrader.d_steps,
            gp_lambda: self.degrader.gp_lambda,
            batch_size: self.degrader.batch_size,
            channels: self.degrader.channels,
            weights: self.degrader.weights,
            adam: AdamParams::with_lr(self.degrader.lr),
            upscale_factor: 4,
            seed: self.degrader_seed(),
        }
    }

    pub fn hrgen_config(&self) -> HrGenConfig {
        HrGenConfig {
            schedule: GrowthSchedule {
                resolutions: self.hrgen.resolutions.clone(),
                epochs: self.hrgen.epochs.clone(),
                batch_sizes: self.hrgen.batch_sizes.clone(),
                fade_fraction: self.hrgen.fade_fraction,
            },
            stage_channels: self.hrgen.channels.clone(),
            latent_sphere: self.hrgen.latent_sphere,
            gp_lambda: self.hrgen.gp_lambda,
            d_steps: self.hrgen.d_steps,
            adam: AdamParams::with_lr(self.hrgen.lr),
            seed: self.hrgen_seed(),
            sample_grid: self.hrgen.sample_grid,
        }
    }

    pub fn inversion_options(&self) -> InversionOptions {
        InversionOptions {
            iterations: self.invert.iterations,
            num_solutions: self.invert.num_solutions,
            seed: self.invert_seed(),
            adam: AdamParams::with_lr(self.invert.lr),
            init_scale: self.invert.init_scale,
            sphere_project: self.invert.sphere_project,
            record_trace: self.invert.record_trace,
        }
    }

    /// Loads `key = value` lines (`#` comments) on top of the current state.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key = value, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    /// Sets one dotted key, e.g. `degrader.gp_lambda = 10`.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse()
                .map_err(|e| Error::Config(format!("{key}: bad value {v:?} ({e})")))
        }
        fn boolean(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("{key}: bad boolean {v:?}"))),
            }
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',')
                .map(|s| num::<usize>(key, s.trim()))
                .collect()
        }

        match key {
            "out.dir" => self.out_dir = OutDir(PathBuf::from(value)),
            "seed" => self.seed = num(key, value)?,

            "data.hr_manifest" => self.data.hr_manifest = Some(PathBuf::from(value)),
            "data.lr_manifest" => self.data.lr_manifest = Some(PathBuf::from(value)),
            "data.synth_hr_count" => self.data.synth_hr_count = num(key, value)?,
            "data.synth_lr_count" => self.data.synth_lr_count = num(key, value)?,
            "data.synth_seed" => self.data.synth_seed = num(key, value)?,

            "percept.backend" => self.percept.backend = value.to_string(),
            "percept.seed" => self.percept.seed = num(key, value)?,
            "percept.weights" => self.percept.weights = Some(PathBuf::from(value)),

            "degrader.iterations" => self.degrader.iterations = num(key, value)?,
            "degrader.d_steps" => self.degrader.d_steps = num(key, value)?,
            "degrader.gp_lambda" => self.degrader.gp_lambda = num(key, value)?,
            "degrader.batch_size" => self.degrader.batch_size = num(key, value)?,
            "degrader.channels" => self.degrader.channels = num(key, value)?,
            "degrader.alpha" => self.degrader.weights.alpha = num(key, value)?,
            "degrader.beta" => self.degrader.weights.beta = num(key, value)?,
            "degrader.gamma" => self.degrader.weights.gamma = num(key, value)?,
            "degrader.delta" => self.degrader.weights.delta = num(key, value)?,
            "degrader.lr" => self.degrader.lr = num(key, value)?,
            "degrader.seed" => self.degrader.seed = Some(num(key, value)?),
            "degrader.checkpoint" => self.degrader.checkpoint = Some(PathBuf::from(value)),

            "hrgen.resolutions" => self.hrgen.resolutions = list(key, value)?,
            "hrgen.epochs" => self.hrgen.epochs = list(key, value)?,
            "hrgen.batch_sizes" => self.hrgen.batch_sizes = list(key, value)?,
            "hrgen.fade_fraction" => self.hrgen.fade_fraction = num(key, value)?,
            "hrgen.channels" => self.hrgen.channels = list(key, value)?,
            "hrgen.gp_lambda" => self.hrgen.gp_lambda = num(key, value)?,
            "hrgen.d_steps" => self.hrgen.d_steps = num(key, value)?,
            "hrgen.lr" => self.hrgen.lr = num(key, value)?,
            "hrgen.latent_sphere" => self.hrgen.latent_sphere = boolean(key, value)?,
            "hrgen.sample_grid" => self.hrgen.sample_grid = num(key, value)?,
            "hrgen.seed" => self.hrgen.seed = Some(num(key, value)?),
            "hrgen.checkpoint" => self.hrgen.checkpoint = Some(PathBuf::from(value)),

            "invert.iterations" => self.invert.iterations = num(key, value)?,
            "invert.num_solutions" => self.invert.num_solutions = num(key, value)?,
            "invert.init_scale" => self.invert.init_scale = num(key, value)?,
            "invert.lr" => self.invert.lr = num(key, value)?,
            "invert.record_trace" => self.invert.record_trace = boolean(key, value)?,
            "invert.sphere_project" => self.invert.sphere_project = boolean(key, value)?,
            "invert.seed" => self.invert.seed = Some(num(key, value)?),

            "metrics.sigma" => self.metrics.sigma = num(key, value)?,

            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Every path the config references must exist.
    pub fn validate_paths(&self) -> Result<()> {
        let check = |key: &str, p: &Option<PathBuf>| -> Result<()> {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "{key}: path {} does not exist",
                        p.display()
                    )));
                }
            }
            Ok(())
        };
        check("data.hr_manifest", &self.data.hr_manifest)?;
        check("data.lr_manifest", &self.data.lr_manifest)?;
        check("percept.weights", &self.percept.weights)?;
        check("degrader.checkpoint", &self.degrader.checkpoint)?;
        check("hrgen.checkpoint", &self.hrgen.checkpoint)?;
        Ok(())
    }
}
