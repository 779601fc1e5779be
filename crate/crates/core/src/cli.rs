//! The `pst` command line.
//!
//! Every subcommand ends with a `RESULT key=value ...` line on stdout. Exit
//! status is 0 on success, 1 for usage and configuration mistakes and 2 for
//! data or contract failures.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classic::solve_map;
use crate::gradsuite::run_gradient_suite;
use crate::model::{read_checkpoint, write_checkpoint, Checkpoint, ModelConfig, PsTransformer};
use crate::objective::mean_angular_error;
use crate::synthdata::{
    extract_patches, generate_dataset, load_dataset, read_sample, write_normal_png, GenConfig,
    SurfaceKind,
};
use crate::trainer::{evaluate, predict, train, AdamState, TrainConfig};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "pst", version, about = "Photometric stereo with set attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Setting override, `key=value`; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    Gen {
        #[arg(long)]
        count: Option<usize>,
        /// sphere, blob or mixed
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Mean angular error over random light subsets.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Predict a normal map and export it as PNG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Least-squares Lambertian solution of a sample.
    Oracle {
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of the differentiable ops and reduced model.
    Gradcheck,
}

/// Parses a flat `key = value` file; `#` starts a comment.
pub fn parse_config(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{origin}:{}: expected `key = value`, got {raw:?}", n + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// File settings overlaid with `key=value` overrides.
fn settings(common: &Common) -> Result<(BTreeMap<String, String>, String)> {
    let (mut map, origin) = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let origin = path.display().to_string();
            (parse_config(&text, &origin)?, origin)
        }
        None => (BTreeMap::new(), "--set".to_string()),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok((map, origin))
}

fn parse_value<V: std::str::FromStr>(key: &str, v: &str, origin: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("{origin}: key `{key}` has invalid value {v:?}")))
}

fn kind_from(v: &str) -> Result<Option<SurfaceKind>> {
    if v == "mixed" {
        Ok(None)
    } else {
        v.parse().map(Some)
    }
}

pub fn gen_config(map: &BTreeMap<String, String>, origin: &str) -> Result<GenConfig> {
    let mut c = GenConfig::default();
    for (k, v) in map {
        match k.as_str() {
            "count" => c.count = parse_value(k, v, origin)?,
            "kind" => c.kind = kind_from(v)?,
            "size" => c.size = parse_value(k, v, origin)?,
            "channels" => c.channels = parse_value(k, v, origin)?,
            "lights" => c.lights = parse_value(k, v, origin)?,
            "min_z" => c.min_z = parse_value(k, v, origin)?,
            "max_specular" => c.max_specular = parse_value(k, v, origin)?,
            "lambertian_fraction" => c.lambertian_fraction = parse_value(k, v, origin)?,
            "noise" => c.noise = parse_value(k, v, origin)?,
            "shared_lights" => c.shared_lights = parse_value(k, v, origin)?,
            "seed" => c.seed = parse_value(k, v, origin)?,
            _ => return Err(Error::Config(format!("{origin}: unknown key `{k}`"))),
        }
    }
    Ok(c)
}

/// Training run settings beyond [`TrainConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Samples at the end of the dataset kept for evaluation.
    pub held_out: usize,
    pub patch_stride: usize,
    pub min_mask_fraction: f64,
    pub init_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            held_out: 2,
            patch_stride: 8,
            min_mask_fraction: 0.5,
            init_seed: 0,
        }
    }
}

pub fn run_config(map: &BTreeMap<String, String>, origin: &str) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    for (k, v) in map {
        let t = &mut c.train;
        let m = &mut c.model;
        match k.as_str() {
            "steps" => t.steps = parse_value(k, v, origin)?,
            "batch_size" => t.batch_size = parse_value(k, v, origin)?,
            "lr" => t.adam.lr = parse_value(k, v, origin)?,
            "beta1" => t.adam.beta1 = parse_value(k, v, origin)?,
            "beta2" => t.adam.beta2 = parse_value(k, v, origin)?,
            "eps" => t.adam.eps = parse_value(k, v, origin)?,
            "m_train" => t.m_train = parse_value(k, v, origin)?,
            "patch_size" => t.patch_size = parse_value(k, v, origin)?,
            "eval_interval" => t.eval_interval = parse_value(k, v, origin)?,
            "eval_m" => t.eval_m = parse_value(k, v, origin)?,
            "seed" => t.seed = parse_value(k, v, origin)?,
            "channels" => m.channels = parse_value(k, v, origin)?,
            "d" => m.d = parse_value(k, v, origin)?,
            "heads" => m.heads = parse_value(k, v, origin)?,
            "blocks" => m.blocks = parse_value(k, v, origin)?,
            "feat" => m.feat = parse_value(k, v, origin)?,
            "dropout" => m.dropout = parse_value(k, v, origin)?,
            "held_out" => c.held_out = parse_value(k, v, origin)?,
            "patch_stride" => c.patch_stride = parse_value(k, v, origin)?,
            "min_mask_fraction" => c.min_mask_fraction = parse_value(k, v, origin)?,
            "init_seed" => c.init_seed = parse_value(k, v, origin)?,
            _ => return Err(Error::Config(format!("{origin}: unknown key `{k}`"))),
        }
    }
    c.train.validate()?;
    c.model.validate()?;
    Ok(c)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Caps rayon's worker count from `PST_THREADS` (unset or 0 means automatic).
pub fn init_threads() -> Result<()> {
    let n = match std::env::var("PST_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("PST_THREADS={v:?} is not a count")))?,
        Err(_) => 0,
    };
    if n > 0 {
        // a second initialization in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs the CLI with explicit output streams and returns the exit status.
pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = init_threads().and_then(|_| dispatch(cli.command, out));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

fn emit(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Gen {
            count,
            kind,
            out: dir,
            common,
        } => {
            let (mut map, origin) = settings(&common)?;
            if let Some(c) = count {
                map.insert("count".into(), c.to_string());
            }
            if let Some(k) = kind {
                map.insert("kind".into(), k);
            }
            let cfg = gen_config(&map, &origin)?;
            let manifest = generate_dataset(&cfg, &dir)?;
            emit(
                out,
                format!("RESULT samples={} dir={}", manifest.len(), dir.display()),
            )
        }
        Command::Train {
            data,
            out: dir,
            resume,
            common,
        } => cmd_train(&data, &dir, resume.as_deref(), &common, out),
        Command::Eval {
            ckpt,
            data,
            m,
            trials,
            seed,
        } => {
            let model = read_checkpoint::<f32>(&ckpt)?.model;
            let (_, samples) = load_dataset(&data)?;
            let report = evaluate(&model, &samples, m, trials, seed)?;
            for (i, (mae, lights)) in report.per_trial.iter().zip(&report.light_sets).enumerate() {
                let ids: Vec<String> = lights.iter().map(usize::to_string).collect();
                emit(out, format!("trial={i} mae_deg={mae:.6} lights={}", ids.join(",")))?;
            }
            emit(out, format!("mean mae_deg={:.6}", report.mean))?;
            emit(
                out,
                format!(
                    "RESULT trials={trials} m={m} samples={} mean_mae_deg={:.6}",
                    samples.len(),
                    report.mean
                ),
            )
        }
        Command::Infer {
            ckpt,
            sample,
            m,
            out: png,
            seed,
        } => {
            let model = read_checkpoint::<f32>(&ckpt)?.model;
            let s = read_sample(&sample)?;
            if m == 0 || m > s.light_count() {
                return Err(Error::Contract(format!(
                    "{}: --m {m} but the sample has {} lights",
                    sample.display(),
                    s.light_count()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lights = index::sample(&mut rng, s.light_count(), m).into_vec();
            let pred = predict(&model, &s, &lights)?;
            write_normal_png(&png, &pred)?;
            let mut result = format!("RESULT lights_used={} out={}", lights.len(), png.display());
            if let Some(gt) = s.ground_truth() {
                let mae = mean_angular_error(&pred, &gt, &gt.mask)?;
                result.push_str(&format!(" mae_deg={mae:.6}"));
            }
            emit(out, result)
        }
        Command::Oracle { sample, out: png } => {
            let s = read_sample(&sample)?;
            let solved = solve_map(&s)?;
            write_normal_png(&png, &solved.normals)?;
            let mut result = format!(
                "RESULT condition={:.4} degenerate={} out={}",
                solved.condition,
                solved.degenerate,
                png.display()
            );
            if let Some(gt) = s.ground_truth() {
                let mae = mean_angular_error(&solved.normals, &gt, &gt.mask)?;
                let lit = fully_lit(&s);
                result.push_str(&format!(" mae_deg={mae:.6}"));
                if lit.iter().any(|&v| v) {
                    let lit_mae = mean_angular_error(&solved.normals, &gt, &lit)?;
                    result.push_str(&format!(" lit_mae_deg={lit_mae:.6}"));
                }
            }
            emit(out, result)
        }
        Command::Gradcheck => {
            let outcomes = run_gradient_suite()?;
            let mut worst_primitive = 0.0f64;
            let mut model_error = 0.0f64;
            let mut failed = 0;
            for o in &outcomes {
                emit(
                    out,
                    format!(
                        "{:<20} max_rel_err={:.3e} tol={:.0e} {}",
                        o.name,
                        o.error,
                        o.tolerance,
                        if o.passed() { "ok" } else { "FAIL" }
                    ),
                )?;
                if !o.passed() {
                    failed += 1;
                }
                if o.name == "full_model" {
                    model_error = o.error;
                } else {
                    worst_primitive = worst_primitive.max(o.error);
                }
            }
            emit(
                out,
                format!(
                    "RESULT checks={} failed={failed} max_rel_err_primitive={worst_primitive:.3e} max_rel_err_model={model_error:.3e}",
                    outcomes.len()
                ),
            )?;
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} gradient checks failed")));
            }
            Ok(())
        }
    }
}

/// Masked pixels lit by every light, where the Lambertian model holds exactly.
pub fn fully_lit(s: &crate::model::PhotoSample) -> Vec<bool> {
    let Some(n) = &s.normals else {
        return vec![false; s.pixels()];
    };
    (0..s.pixels())
        .map(|p| {
            s.is_masked(p)
                && s.lights
                    .iter()
                    .all(|l| (0..3).map(|k| l[k] * n[p * 3 + k]).sum::<f32>() > 0.0)
        })
        .collect()
}

fn cmd_train(
    data: &Path,
    dir: &Path,
    resume: Option<&Path>,
    common: &Common,
    out: &mut dyn Write,
) -> Result<()> {
    let (map, origin) = settings(common)?;
    let mut cfg = run_config(&map, &origin)?;
    let (_, samples) = load_dataset(data)?;
    if samples.len() <= cfg.held_out {
        return Err(Error::EmptySet(format!(
            "{}: {} samples leave nothing to train on after holding out {}",
            data.display(),
            samples.len(),
            cfg.held_out
        )));
    }
    let (train_set, held) = samples.split_at(samples.len() - cfg.held_out);
    let mut patches = Vec::new();
    for s in train_set {
        patches.extend(extract_patches(
            s,
            cfg.train.patch_size,
            cfg.patch_stride,
            cfg.min_mask_fraction,
        )?);
    }
    if patches.is_empty() {
        return Err(Error::EmptySet(format!("{}: no patches pass the mask threshold", data.display())));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.train.checkpoint = Some(dir.join("best.ckpt"));
    let (mut model, mut state) = match resume {
        Some(path) => {
            let ck = read_checkpoint::<f32>(path)?;
            (ck.model, ck.optimizer.unwrap_or_default())
        }
        None => (
            PsTransformer::<f32>::new(cfg.model.clone(), cfg.init_seed)?,
            AdamState::default(),
        ),
    };
    let log_path = dir.join("train.log");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut write_err = None;
    let log = train(&mut model, &mut state, &patches, held, &cfg.train, |r| {
        if let Err(e) = writeln!(log_file, "{r}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    let final_path = dir.join("final.ckpt");
    write_checkpoint(
        &final_path,
        &Checkpoint {
            model,
            optimizer: Some(state),
        },
    )?;
    let losses = log.losses();
    let first = losses.first().map_or(f64::NAN, |l| l.1.total);
    let last = losses.last().map_or(f64::NAN, |l| l.1.total);
    let best = log
        .evals()
        .iter()
        .map(|e| e.1)
        .fold(f64::INFINITY, f64::min);
    emit(
        out,
        format!(
            "RESULT steps={} patches={} first_total={first:.6} final_total={last:.6} best_mae_deg={best:.6} ckpt={}",
            losses.len(),
            patches.len(),
            final_path.display()
        ),
    )
}
