//! Command-line front-end: train, degrade, invert and evaluate.
//!
//! Exit codes: 0 ok, 2 config/validation error, 3 training divergence,
//! 4 checkpoint problems. Every command is deterministic given the same
//! config and seeds.

use crate::config::RunConfig;
use crate::degrader::{train_degrader, DegraderCheckpoint, NoiseVector};
use crate::error::{Error, Result};
use crate::hrgen::{train_progressive, GeneratorCheckpoint};
use crate::imagedata::load_image_file;
use crate::metrics::{
    heatmap_metric, solution_diversity, write_eval_csv, CentroidBackend, EvalRow, LandmarkBackend,
};
use crate::naminvert::{super_resolve, write_solutions};
use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "invsr",
    about = "Face super-resolution by latent inversion: learned degradation, progressive generator, multi-start latent search"
)]
pub struct Cli {
    /// Config file of `dotted.key = value` lines; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; per-module seeds derive from it unless set explicitly.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the HR→LR degradation generator and discriminator.
    TrainDegrader,
    /// Train the progressive HR generator, stage by stage.
    TrainGenerator,
    /// Degrade one 64×64 image under several noise draws.
    Degrade {
        #[arg(long)]
        hr_image: PathBuf,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Recover multiple HR candidates for one 16×16 image.
    Invert {
        #[arg(long)]
        lr_image: PathBuf,
        #[arg(long)]
        num_solutions: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Heatmap metric and diversity for emitted solutions.
    Eval {
        #[arg(long)]
        solutions_dir: PathBuf,
        #[arg(long)]
        reference_dir: PathBuf,
    },
}

/// Runs a parsed invocation, mapping errors onto the exit-code contract.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir.0 = out;
    }
    cfg.validate_paths()?;

    match cli.command {
        Command::TrainDegrader => cmd_train_degrader(&cfg),
        Command::TrainGenerator => cmd_train_generator(&cfg),
        Command::Degrade { hr_image, noise_seed, count } => {
            cmd_degrade(&cfg, &hr_image, noise_seed, count)
        }
        Command::Invert { lr_image, num_solutions, iters } => {
            cmd_invert(&cfg, &lr_image, num_solutions, iters)
        }
        Command::Eval { solutions_dir, reference_dir } => {
            cmd_eval(&cfg, &solutions_dir, &reference_dir)
        }
    }
}

pub fn cmd_train_degrader(cfg: &RunConfig) -> Result<()> {
    let hr = cfg.data.hr_dataset()?;
    let lr = cfg.data.lr_dataset()?;
    let fx = cfg.percept.build()?;
    let out = cfg.out_dir.0.join("degrader");
    let ckpt = train_degrader(&cfg.degrader_train_config(), &hr, &lr, &fx, &out)?;
    println!("degrader checkpoint: {}", ckpt.dir.display());
    Ok(())
}

pub fn cmd_train_generator(cfg: &RunConfig) -> Result<()> {
    let hr = cfg.data.hr_dataset()?;
    let out = cfg.out_dir.0.join("hrgen");
    let ckpt = train_progressive(&cfg.hrgen_config(), &hr, &out)?;
    println!(
        "generator checkpoint (stage {}, {res}×{res}): {}",
        ckpt.manifest.stage,
        ckpt.dir.display(),
        res = ckpt.manifest.resolution
    );
    Ok(())
}

fn degrader_checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.degrader
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.0.join("degrader"))
}

fn generator_checkpoint_dir(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(p) = &cfg.hrgen.checkpoint {
        // either a stage directory itself or a root holding stage_<res> dirs
        if p.join("manifest.json").exists() {
            return Ok(p.clone());
        }
        return latest_stage_dir(p);
    }
    latest_stage_dir(&cfg.out_dir.0.join("hrgen"))
}

fn latest_stage_dir(root: &Path) -> Result<PathBuf> {
    let entries = std::fs::read_dir(root)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", root.display())))?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::Checkpoint(format!("{}: {e}", root.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(res) = name.strip_prefix("stage_").and_then(|s| s.parse::<usize>().ok()) {
            if best.as_ref().map_or(true, |(r, _)| res > *r) {
                best = Some((res, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        Error::Checkpoint(format!("{}: no stage_<res> checkpoints found", root.display()))
    })
}

pub fn cmd_degrade(cfg: &RunConfig, hr_image: &Path, noise_seed: u64, count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidInput("--count must be >= 1".into()));
    }
    let ckpt = DegraderCheckpoint::load(&degrader_checkpoint_dir(cfg))?;
    let hr = load_image_file(hr_image)?;
    if hr.side() != 64 {
        return Err(Error::Shape(format!(
            "--hr-image must be 64×64, got {side}×{side}",
            side = hr.side()
        )));
    }
    let stem = hr_image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let out = cfg.out_dir.0.join("degraded");
    std::fs::create_dir_all(&out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    for k in 0..count {
        let noise = NoiseVector::from_seed(noise_seed.wrapping_add(k as u64));
        let lr = ckpt.degrade(&hr, &noise)?;
        let path = out.join(format!("{stem}_lr{k}.png"));
        crate::imagedata::save_image_file(&path, &lr)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn cmd_invert(
    cfg: &RunConfig,
    lr_image: &Path,
    num_solutions: Option<usize>,
    iters: Option<usize>,
) -> Result<()> {
    let mut opts = cfg.inversion_options();
    if let Some(k) = num_solutions {
        opts.num_solutions = k;
    }
    if let Some(it) = iters {
        opts.iterations = it;
    }
    if opts.iterations == 0 || opts.iterations > 10_000 {
        return Err(Error::InvalidInput(format!(
            "--iters must lie in [1, 10000], got {}",
            opts.iterations
        )));
    }
    opts.validate()?;

    let gen_ckpt = GeneratorCheckpoint::load(&generator_checkpoint_dir(cfg)?)?;
    let deg_ckpt = DegraderCheckpoint::load(&degrader_checkpoint_dir(cfg))?;
    let lr = load_image_file(lr_image)?;
    if lr.side() != 16 {
        return Err(Error::Shape(format!(
            "--lr-image must be 16×16, got {side}×{side}",
            side = lr.side()
        )));
    }

    let id = lr_image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let solutions = super_resolve(&lr, &gen_ckpt, &deg_ckpt, &opts)?;
    let out = cfg.out_dir.0.join("inverted");
    let report = write_solutions(&out, &id, &solutions, opts.record_trace)?;
    println!(
        "wrote {} solutions for {id}; report: {}",
        solutions.len(),
        report.display()
    );
    Ok(())
}

/// Solution sets found in a directory: id → sorted `(k, hr_png_path)`.
fn scan_solutions(dir: &Path) -> Result<BTreeMap<String, Vec<(usize, PathBuf)>>> {
    let mut by_id: BTreeMap<String, Vec<(usize, PathBuf)>> = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("--solutions-dir {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io(e.to_string()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix("_hr.png") else {
            continue;
        };
        let Some((id, k_str)) = stem.rsplit_once("_sol") else {
            continue;
        };
        let Ok(k) = k_str.parse::<usize>() else {
            continue;
        };
        by_id.entry(id.to_string()).or_default().push((k, entry.path()));
    }
    for sols in by_id.values_mut() {
        sols.sort_by_key(|(k, _)| *k);
    }
    Ok(by_id)
}

/// Best objectives parsed out of `<id>_report.jsonl` files: (id, k) → value.
fn scan_reports(dir: &Path) -> BTreeMap<(String, usize), f64> {
    let mut map = BTreeMap::new();
    let Ok(entries) = std::fs::read_dir(dir) else {
        return map;
    };
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.ends_with("_report.jsonl") {
            continue;
        }
        let Ok(text) = std::fs::read_to_string(entry.path()) else {
            continue;
        };
        for line in text.lines() {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(line) {
                if let (Some(id), Some(k), Some(obj)) = (
                    v.get("id").and_then(|x| x.as_str()),
                    v.get("k").and_then(|x| x.as_u64()),
                    v.get("best_objective").and_then(|x| x.as_f64()),
                ) {
                    map.insert((id.to_string(), k as usize), obj);
                }
            }
        }
    }
    map
}

pub fn cmd_eval(cfg: &RunConfig, solutions_dir: &Path, reference_dir: &Path) -> Result<()> {
    let solutions = scan_solutions(solutions_dir)?;
    if solutions.is_empty() {
        return Err(Error::Config(format!(
            "--solutions-dir {}: no <id>_sol<k>_hr.png files found",
            solutions_dir.display()
        )));
    }

    // strict id matching in both directions
    let mut reference_ids: Vec<String> = Vec::new();
    let entries = std::fs::read_dir(reference_dir)
        .map_err(|e| Error::Config(format!("--reference-dir {}: {e}", reference_dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io(e.to_string()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".png") {
            reference_ids.push(id.to_string());
        }
    }
    reference_ids.sort();
    for id in solutions.keys() {
        if !reference_ids.contains(id) {
            return Err(Error::Config(format!(
                "solution id {id:?} has no reference image in {}",
                reference_dir.display()
            )));
        }
    }
    for id in &reference_ids {
        if !solutions.contains_key(id) {
            return Err(Error::Config(format!(
                "reference id {id:?} has no solutions in {}",
                solutions_dir.display()
            )));
        }
    }

    let objectives = scan_reports(solutions_dir);
    let backend = CentroidBackend { sigma: cfg.metrics.sigma };
    let mut rows: Vec<EvalRow> = Vec::new();
    for (id, sols) in &solutions {
        let reference = load_image_file(&reference_dir.join(format!("{id}.png")))?;
        let ref_maps = backend.heatmaps(&reference)?;
        let images: Vec<_> = sols
            .iter()
            .map(|(_, path)| load_image_file(path))
            .collect::<Result<Vec<_>>>()?;
        let diversity = if images.len() >= 2 {
            Some(solution_diversity(&images)?)
        } else {
            None
        };
        for ((k, _), img) in sols.iter().zip(&images) {
            let gen_maps = backend.heatmaps(img)?;
            rows.push(EvalRow {
                id: id.clone(),
                k: *k,
                heatmap_metric: heatmap_metric(&gen_maps, &ref_maps)?,
                objective: objectives.get(&(id.clone(), *k)).copied(),
                diversity,
            });
        }
    }

    std::fs::create_dir_all(&cfg.out_dir.0)
        .map_err(|e| Error::Io(format!("{}: {e}", cfg.out_dir.0.display())))?;
    let path = cfg.out_dir.0.join("eval.csv");
    write_eval_csv(&path, &rows)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}
