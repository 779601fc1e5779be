//! Adam optimization, the training loop and the evaluation protocol.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffarray::{Float, Mode, Tape, Tensor};
use crate::model::{write_checkpoint, Batch, Checkpoint, Fusion, NormalMap, PhotoSample, PsTransformer};
use crate::objective::{graph_loss, mean_angular_error, LossBreakdown};
use crate::params::ParamStore;
use crate::{Error, Result};

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            Some(p) => {
                return Err(Error::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            None => return Err(Error::Contract(format!("gradient for unknown parameter {name}"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(t));
    let c2 = T::one() - T::lit(cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Training-loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub m_train: usize,
    pub patch_size: usize,
    pub eval_interval: u64,
    /// Lights per held-out sample during periodic evaluation.
    pub eval_m: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            adam: AdamConfig::default(),
            m_train: 10,
            patch_size: 8,
            eval_interval: 200,
            eval_m: 10,
            seed: 0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let positive = [
            ("steps", self.steps as f64),
            ("batch_size", self.batch_size as f64),
            ("m_train", self.m_train as f64),
            ("patch_size", self.patch_size as f64),
            ("eval_interval", self.eval_interval as f64),
            ("eval_m", self.eval_m as f64),
            ("lr", a.lr),
            ("beta1", a.beta1),
            ("beta2", a.beta2),
            ("eps", a.eps),
        ];
        for (key, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{key} must be positive, got {v}")));
            }
        }
        if a.beta1 >= 1.0 || a.beta2 >= 1.0 {
            return Err(Error::Config("Adam betas must be below 1".into()));
        }
        if self.patch_size < 3 {
            return Err(Error::Config(format!("patch_size {} below 3", self.patch_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogRecord {
    Step { step: u64, loss: LossBreakdown },
    Eval { step: u64, mae_deg: f64 },
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogRecord::Step { step, loss } => write!(
                f,
                "step={step} main={:.6} single={:.6} agg1={:.6} agg2={:.6} total={:.6}",
                loss.main, loss.single, loss.agg1, loss.agg2, loss.total
            ),
            LogRecord::Eval { step, mae_deg } => write!(f, "eval step={step} mae_deg={mae_deg:.6}"),
        }
    }
}

/// Append-only training record; wall-clock times are kept beside each entry.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub elapsed: Vec<Duration>,
}

impl TrainLog {
    fn push(&mut self, r: LogRecord, start: Instant) {
        self.records.push(r);
        self.elapsed.push(start.elapsed());
    }

    pub fn losses(&self) -> Vec<(u64, LossBreakdown)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { step, loss } => Some((*step, *loss)),
                _ => None,
            })
            .collect()
    }

    pub fn evals(&self) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Eval { step, mae_deg } => Some((*step, *mae_deg)),
                _ => None,
            })
            .collect()
    }

    pub fn lines(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.lines()).map_err(|e| Error::io(path, e))
    }
}

/// Generator for one training step; depends only on the seed and the step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// One optimization step on a batch; returns the pre-update loss.
pub fn train_step<T: Float>(
    model: &mut PsTransformer<T>,
    state: &mut AdamState<T>,
    patches: &[PhotoSample],
    cfg: &TrainConfig,
    step: u64,
) -> Result<LossBreakdown> {
    let mut rng = step_rng(cfg.seed, step);
    let picks = index::sample(&mut rng, patches.len(), cfg.batch_size.min(patches.len()));
    let batch_samples = picks
        .iter()
        .map(|i| {
            let p = &patches[i];
            if p.light_count() < cfg.m_train {
                return Err(Error::Contract(format!(
                    "training patch {i} has {} lights, m_train is {}",
                    p.light_count(),
                    cfg.m_train
                )));
            }
            let lights = index::sample(&mut rng, p.light_count(), cfg.m_train).into_vec();
            p.select_lights(&lights)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PhotoSample> = batch_samples.iter().collect();
    let batch = Batch::from_samples(&refs)?;

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let graph = model.build_graph(&mut tape, &bound, &batch, Mode::Train, Fusion::Both, &mut rng)?;
    let loss = graph_loss(&mut tape, &graph, &batch)?;
    let breakdown = loss.breakdown(&tape);
    for (name, v) in breakdown.terms() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is {v} at step {step}")));
        }
    }
    let grads = tape.backward(loss.total)?;
    let grads: BTreeMap<String, Tensor<T>> = bound
        .iter()
        .map(|(name, &var)| (name.clone(), grads.wrt(var)))
        .collect();
    adam_step(&mut model.params, &grads, state, &cfg.adam)?;
    model.apply_bn_updates(&graph.bn_updates)?;
    Ok(breakdown)
}

/// Runs steps `state.step + 1 ..= cfg.steps`, evaluating on `held_out` every
/// `eval_interval` steps and checkpointing whenever the error improves.
pub fn train<T: Float>(
    model: &mut PsTransformer<T>,
    state: &mut AdamState<T>,
    patches: &[PhotoSample],
    held_out: &[PhotoSample],
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::EmptySet("training set is empty".into()));
    }
    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    while state.step < cfg.steps {
        let step = state.step + 1;
        let loss = train_step(model, state, patches, cfg, step)?;
        let rec = LogRecord::Step { step, loss };
        on_record(&rec);
        log.push(rec, start);
        if !held_out.is_empty() && step % cfg.eval_interval == 0 {
            let report = evaluate(model, held_out, cfg.eval_m, 1, cfg.seed)?;
            let rec = LogRecord::Eval {
                step,
                mae_deg: report.mean,
            };
            on_record(&rec);
            log.push(rec, start);
            if report.mean < best {
                best = report.mean;
                if let Some(path) = &cfg.checkpoint {
                    write_checkpoint(
                        path,
                        &Checkpoint {
                            model: model.clone(),
                            optimizer: Some(state.clone()),
                        },
                    )?;
                }
            }
        }
    }
    Ok(log)
}

/// Angular errors of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Light indices used in each trial, shared by every sample.
    pub light_sets: Vec<Vec<usize>>,
    pub per_trial: Vec<f64>,
    pub mean: f64,
}

/// Prediction for `sample` restricted to `lights`, in eval mode.
pub fn predict<T: Float>(model: &PsTransformer<T>, sample: &PhotoSample, lights: &[usize]) -> Result<NormalMap> {
    let sub = sample.select_lights(lights)?;
    // eval mode draws nothing from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(model.forward(&sub, Mode::Eval, &mut rng)?.normal)
}

/// Draws `m_eval` distinct light indices per trial, evaluates every sample
/// with that same set, and averages the per-sample angular errors.
pub fn evaluate<T: Float>(
    model: &PsTransformer<T>,
    samples: &[PhotoSample],
    m_eval: usize,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptySet("evaluation set is empty".into()));
    }
    let available = samples.iter().map(PhotoSample::light_count).min().unwrap_or(0);
    if m_eval == 0 || m_eval > available {
        return Err(Error::Contract(format!(
            "m_eval {m_eval} but samples provide {available} lights"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let light_sets: Vec<Vec<usize>> = (0..trials)
        .map(|_| index::sample(&mut rng, available, m_eval).into_vec())
        .collect();
    let mut per_trial = Vec::with_capacity(trials);
    for lights in &light_sets {
        let errors = samples
            .par_iter()
            .map(|s| {
                let gt = s
                    .ground_truth()
                    .ok_or_else(|| Error::Contract("evaluation sample lacks ground truth".into()))?;
                let pred = predict(model, s, lights)?;
                mean_angular_error(&pred, &gt, &gt.mask)
            })
            .collect::<Result<Vec<f64>>>()?;
        per_trial.push(errors.iter().sum::<f64>() / errors.len() as f64);
    }
    let mean = per_trial.iter().sum::<f64>() / trials as f64;
    Ok(EvalReport {
        light_sets,
        per_trial,
        mean,
    })
}
