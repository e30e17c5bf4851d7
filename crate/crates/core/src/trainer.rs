//! Mini-batch gradient descent with step decay, clipping and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::losses::{LossReport, LossToggles};
use crate::metrics::{evaluate, EvalOptions, EvalReport, MetricsError};
use crate::model::{Model, ModelConfig, ModelError, NamedGradients, PreparedSample};
use crate::tensor::{ParamStore, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training scenes")]
    EmptyData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("diverged at epoch {epoch}, step {step}: {diagnostic}")]
    Diverged {
        epoch: usize,
        step: usize,
        diagnostic: String,
        last_good: Box<Model>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Heavy-ball coefficient; `None` is plain SGD.
    pub momentum: Option<f64>,
    pub clip_norm: f64,
    pub seed: u64,
    pub workers: usize,
    /// Evaluate on the validation split after every epoch; otherwise only
    /// after the last.
    pub eval_every_epoch: bool,
    pub eval: EvalOptions,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            decay_factor: 0.5,
            decay_every: 30,
            momentum: None,
            clip_norm: 10.0,
            seed: 42,
            workers: 1,
            eval_every_epoch: true,
            eval: EvalOptions::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.workers == 0 {
            return fail("epochs, batch size and workers must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!("learning rate {}", self.learning_rate));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_every == 0 {
            return fail(format!("decay {} every {}", self.decay_factor, self.decay_every));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return fail(format!("clip norm {}", self.clip_norm));
        }
        if let Some(mu) = self.momentum {
            if !(0.0..1.0).contains(&mu) {
                return fail(format!("momentum {mu}"));
            }
        }
        self.model.validate()?;
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: LossReport,
    pub clipped_steps: usize,
    pub val: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.history.last().and_then(|r| r.val.as_ref())
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(
        "epoch,lr,embed,align,bidir,dissim,total,grad_norm,clipped_steps,val_map,val_map_25,val_map_50\n",
    );
    for r in history {
        let l = &r.loss;
        let _ = write!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            r.epoch, r.learning_rate, l.embed, l.align, l.bidir, l.dissim, l.total, l.grad_norm, r.clipped_steps
        );
        match &r.val {
            Some(v) => {
                let _ = writeln!(
                    out,
                    ",{:.6},{:.6},{:.6}",
                    v.overall.map_50_95, v.overall.map_25, v.overall.map_50
                );
            }
            None => out.push_str(",,,\n"),
        }
    }
    out
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, TrainError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))
}

/// Per-scene results in input order, whatever the worker count.
fn per_scene<T: Send>(
    workers: usize,
    pool: &rayon::ThreadPool,
    data: &[&PreparedSample],
    f: impl Fn(&PreparedSample) -> Result<T, ModelError> + Sync,
) -> Result<Vec<T>, ModelError> {
    if workers == 1 {
        data.iter().map(|s| f(s)).collect()
    } else {
        pool.install(|| data.par_iter().map(|s| f(s)).collect())
    }
}

pub fn evaluate_model(
    model: &Model,
    data: &[PreparedSample],
    opts: EvalOptions,
    workers: usize,
) -> Result<EvalReport, TrainError> {
    let refs: Vec<&PreparedSample> = data.iter().collect();
    let preds = per_scene(workers, &pool(workers)?, &refs, |s| Ok(model.predict(s)?.1))?;
    let gts: Vec<_> = data.iter().map(|s| s.gt.clone()).collect();
    Ok(evaluate(&preds, &gts, opts)?)
}

/// Mean loss and summed-then-averaged gradient over a batch.
fn batch_gradient(
    model: &Model,
    batch: &[&PreparedSample],
    workers: usize,
    pool: &rayon::ThreadPool,
) -> Result<(LossReport, NamedGradients), ModelError> {
    let results = per_scene(workers, pool, batch, |s| model.scene_gradients(s))?;
    let k = results.len() as f64;
    let reports: Vec<LossReport> = results.iter().map(|(r, _)| *r).collect();
    let mut iter = results.into_iter();
    let (_, mut acc) = iter.next().expect("non-empty batch");
    for (_, grads) in iter {
        for ((_, a), (_, g)) in acc.iter_mut().zip(grads) {
            a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
        }
    }
    for (_, a) in &mut acc {
        a.iter_mut().for_each(|x| *x /= k);
    }
    Ok((LossReport::mean(&reports).expect("non-empty batch"), acc))
}

fn install_gradients(params: &mut ParamStore, grads: Vec<(String, Vec<f64>)>) -> Result<(), TensorError> {
    params.zero_grad();
    for (name, g) in grads {
        params.get_mut(&name)?.accumulate_grad(&g);
    }
    Ok(())
}

pub fn train(cfg: &TrainConfig, train: &[PreparedSample], val: &[PreparedSample]) -> Result<TrainOutcome, TrainError> {
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    train_from(cfg, model, train, val)
}

/// Continues training an existing model.
pub fn train_from(
    cfg: &TrainConfig,
    mut model: Model,
    train: &[PreparedSample],
    val: &[PreparedSample],
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let pool = pool(cfg.workers)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut velocity: Vec<(String, Vec<f64>)> = Vec::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let mut reports = Vec::new();
        let mut clipped_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&k| &train[k]).collect();
            let (mut report, grads) = batch_gradient(&model, &batch, cfg.workers, &pool)?;
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if !report.total.is_finite() || !norm.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    diagnostic: format!("total loss {}, gradient norm {norm}", report.total),
                    last_good: Box::new(model),
                });
            }
            install_gradients(&mut model.params, grads)?;
            report.step = step;
            report.grad_norm = norm;
            if norm > cfg.clip_norm {
                model.params.scale_grads(cfg.clip_norm / norm);
                report.clipped = true;
                clipped_steps += 1;
            }
            apply_update(&mut model.params, &mut velocity, lr, cfg.momentum)?;
            reports.push(report);
            step += 1;
        }
        let mut loss = LossReport::mean(&reports).expect("at least one batch");
        loss.step = step;
        loss.grad_norm = reports.iter().map(|r| r.grad_norm).sum::<f64>() / reports.len() as f64;
        loss.clipped = clipped_steps > 0;
        let last = epoch + 1 == cfg.epochs;
        let val_report = if !val.is_empty() && (cfg.eval_every_epoch || last) {
            Some(evaluate_model(&model, val, cfg.eval, cfg.workers)?)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            loss,
            clipped_steps,
            val: val_report,
        });
    }
    Ok(TrainOutcome { model, history })
}

fn apply_update(
    params: &mut ParamStore,
    velocity: &mut Vec<(String, Vec<f64>)>,
    lr: f64,
    momentum: Option<f64>,
) -> Result<(), TensorError> {
    if velocity.is_empty() && momentum.is_some() {
        *velocity = params.iter().map(|(n, t)| (n.to_string(), vec![0.0; t.len()])).collect();
    }
    for (k, (_, t)) in params.iter_mut().enumerate() {
        let Some(grad) = t.grad.take() else { continue };
        let step: Vec<f64> = match momentum {
            Some(mu) => {
                let v = &mut velocity[k].1;
                v.iter_mut().zip(&grad).for_each(|(v, g)| *v = mu * *v + g);
                v.clone()
            }
            None => grad,
        };
        if lr != 0.0 {
            t.data_mut().iter_mut().zip(&step).for_each(|(p, s)| *p -= lr * s);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub toggles: LossToggles,
    pub report: EvalReport,
}

/// One training run per toggle set, all from the same seed and data.
pub fn ablate(
    cfg: &TrainConfig,
    train_data: &[PreparedSample],
    val: &[PreparedSample],
    sets: &[LossToggles],
) -> Result<Vec<AblationRow>, TrainError> {
    if sets.is_empty() {
        return Err(TrainError::Config("no component sets to ablate".into()));
    }
    if val.is_empty() {
        return Err(TrainError::Config("ablation needs validation scenes".into()));
    }
    sets.iter()
        .map(|&toggles| {
            let mut c = cfg.clone();
            c.model.toggles = toggles;
            c.eval_every_epoch = false;
            let out = train(&c, train_data, val)?;
            Ok(AblationRow {
                toggles,
                report: out.final_eval().cloned().expect("final evaluation"),
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<28} {:>8} {:>8} {:>8}\n", "components", "mAP", "mAP@0.25", "mAP@0.50");
    for r in rows {
        let o = &r.report.overall;
        let _ = writeln!(
            out,
            "{:<28} {:>8.4} {:>8.4} {:>8.4}",
            r.toggles.label(),
            o.map_50_95,
            o.map_25,
            o.map_50
        );
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("components,{}\n", EvalReport::csv_header());
    for r in rows {
        let _ = writeln!(out, "{},{}", r.toggles.label(), r.report.csv_row());
    }
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), TensorError> {
    model.params.save(path)
}

pub fn load_checkpoint(cfg: ModelConfig, path: &Path) -> Result<Model, TensorError> {
    Ok(Model {
        cfg,
        params: ParamStore::load(path)?,
    })
}
