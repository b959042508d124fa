//! Two-pass training loop with the stop-gradient topology.
//!
//! Per step: peripheral pass, priority map, detached fixation sampling,
//! fixation passes through the same encoder, impact weights, combined loss,
//! backward, SGD update (momentum + linear warmup + cosine decay). Batch
//! elements run in parallel on separate graphs; gradients reduce in element
//! order, so runs are bit-reproducible regardless of thread count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Once;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::total_loss;
use crate::numerics::{Graph, Tensor};
use crate::params::{Binding, ParamSet};
use crate::pipeline::config::{RunConfig, TrainMode};
use crate::pipeline::dataset::{derive_seed, Dataset, Sample};
use crate::pipeline::eval::{evaluate, EvalMode};
use crate::pipeline::model::{FixationSource, ForwardOptions, SaccaderModel};

static THREAD_POOL: Once = Once::new();

/// Caps rayon's worker count from `SACC_THREADS` once per process.
pub fn init_threads() {
    THREAD_POOL.call_once(|| {
        if let Ok(v) = std::env::var("SACC_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n > 0 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_per: f64,
    pub loss_fix: f64,
    pub alpha_mean: f64,
    /// Validation top-1 (the early-stopping signal).
    pub top1: f64,
}

#[derive(Clone, Debug, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: u64,
}

/// Adam moment buffers, persisted in checkpoints.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub m1: BTreeMap<String, Tensor<f32>>,
    pub m2: BTreeMap<String, Tensor<f32>>,
    /// Update count, for bias correction.
    pub t: u64,
}

struct StepResult {
    grads: BTreeMap<String, Tensor<f32>>,
    loss_per: f64,
    loss_fix: f64,
    alpha: f64,
}

/// Learning rate at an epoch: linear warmup, then cosine decay to zero.
fn lr_at(cfg: &RunConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.learning_rate * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else if cfg.epochs <= cfg.warmup_epochs {
        cfg.learning_rate
    } else {
        let t = (epoch - cfg.warmup_epochs) as f64 / (cfg.epochs - cfg.warmup_epochs) as f64;
        cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Stratified train/validation split: the last `val_fraction` of each class's
/// samples (in generation order) become validation.
fn split_validation<'a>(
    data: &'a Dataset<f32>,
    val_fraction: f64,
) -> (Vec<&'a Sample<f32>>, Vec<&'a Sample<f32>>) {
    let mut per_class: BTreeMap<usize, Vec<&Sample<f32>>> = BTreeMap::new();
    for s in &data.samples {
        per_class.entry(s.label).or_default().push(s);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, samples) in per_class {
        let n_val = ((samples.len() as f64 * val_fraction).floor() as usize).min(samples.len() - 1);
        let cut = samples.len() - n_val;
        train.extend_from_slice(&samples[..cut]);
        val.extend_from_slice(&samples[cut..]);
    }
    (train, val)
}

fn forward_step(
    model: &SaccaderModel,
    params: &ParamSet<f32>,
    sample: &Sample<f32>,
    cfg: &RunConfig,
    sampler_seed: u64,
) -> Result<StepResult> {
    let g = Graph::<f32>::new();
    let b = Binding::new(&g, params);
    let n = match cfg.mode {
        TrainMode::Peripheral => 0,
        _ => cfg.n_train,
    };
    let mut opts = ForwardOptions::sampler(cfg.sampler_params(sampler_seed, n));
    match cfg.mode {
        TrainMode::Random => {
            opts.source = FixationSource::Random;
            opts.uniform_beta = true;
        }
        _ => {}
    }
    let out = model.forward(&b, &sample.image, &opts)?;
    let loss_cfg = cfg.loss_config();
    let loss = total_loss(
        &g,
        out.z_per,
        out.z_fix_pooled,
        sample.label,
        out.alpha,
        &loss_cfg,
    )?;
    let loss_value = g.scalar_value(loss) as f64;
    if !loss_value.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            detail: format!("loss = {loss_value}"),
        });
    }
    let grads = g.backward(loss);
    let per = {
        let l = crate::fusion::nll_smoothed(&g, out.z_per, sample.label, loss_cfg.num_classes, loss_cfg.label_smoothing)?;
        g.scalar_value(l) as f64
    };
    let fix = match out.z_fix_pooled {
        Some(zf) => {
            let l = crate::fusion::conf_nll(&g, zf, sample.label, out.alpha, &loss_cfg)?;
            g.scalar_value(l) as f64
        }
        None => 0.0,
    };
    Ok(StepResult {
        grads: b.collect_grads(&grads),
        loss_per: per,
        loss_fix: fix,
        alpha: g.scalar_value(out.alpha) as f64,
    })
}

/// Adam with decoupled weight decay. Gradient scales differ by many orders
/// of magnitude between the token-summed norm shifts and the attention-path
/// weights, so per-parameter step normalization is what makes desk-scale
/// training converge at all.
fn apply_update(
    params: &mut ParamSet<f32>,
    state: &mut OptimizerState,
    batch: &[StepResult],
    lr: f64,
    beta1: f64,
    weight_decay: f64,
) {
    const BETA2: f64 = 0.999;
    const EPS: f32 = 1e-8;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    let step_scale = (lr * bc2.sqrt() / bc1) as f32;
    let scale = 1.0 / batch.len() as f32;
    // union of touched names, in sorted order
    let mut names: Vec<&String> = batch.iter().flat_map(|r| r.grads.keys()).collect();
    names.sort();
    names.dedup();
    for name in names {
        if !params.is_trainable(name) {
            continue;
        }
        let shape = params.get(name).shape().to_vec();
        let mut grad = Tensor::<f32>::zeros(&shape);
        for r in batch {
            if let Some(g) = r.grads.get(name.as_str()) {
                for (acc, v) in grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += v * scale;
                }
            }
        }
        let m1 = state
            .m1
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        let m2 = state
            .m2
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        let w = params.get_mut(name);
        let (b1, b2, wd, lr32) = (beta1 as f32, BETA2 as f32, weight_decay as f32, lr as f32);
        for (((wv, gv), m1v), m2v) in w
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m1.data_mut())
            .zip(m2.data_mut())
        {
            *m1v = b1 * *m1v + (1.0 - b1) * gv;
            *m2v = b2 * *m2v + (1.0 - b2) * gv * gv;
            *wv -= step_scale * *m1v / (m2v.sqrt() + EPS) + lr32 * wd * *wv;
        }
    }
}

/// Trains in place; returns the per-epoch history and the optimizer state
/// (for checkpointing). Weights end at the best validation epoch (early
/// stopping with the configured patience).
pub fn train(
    model: &SaccaderModel,
    params: &mut ParamSet<f32>,
    data: &Dataset<f32>,
    cfg: &RunConfig,
) -> Result<(History, OptimizerState)> {
    init_threads();
    cfg.validate()?;
    let (train_set, val_set) = split_validation(data, cfg.val_fraction);
    if train_set.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    // tiny datasets can floor the split to zero; fall back to the training
    // split as the early-stopping signal in that corner
    let val_ds = Dataset {
        samples: if val_set.is_empty() {
            train_set.iter().map(|s| (*s).clone()).collect()
        } else {
            val_set.iter().map(|s| (*s).clone()).collect()
        },
        classes: data.classes,
    };
    let mut moments = OptimizerState::default();
    let mut history = History::default();
    let mut best: Option<(f64, ParamSet<f32>, OptimizerState, usize)> = None;
    let mut patience_left = cfg.early_stop_patience;
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x0eb0_0000 + epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        for chunk in order.chunks(cfg.batch_size) {
            let results: Vec<Result<StepResult>> = chunk
                .par_iter()
                .map(|&idx| {
                    let seed = derive_seed(cfg.seed, 0x1000_0000u64 + step * 0x1_0000 + idx as u64);
                    forward_step(model, params, train_set[idx], cfg, seed)
                })
                .collect();
            let mut batch = Vec::with_capacity(results.len());
            for r in results {
                match r {
                    Ok(v) => batch.push(v),
                    Err(Error::Diverged { detail, .. }) => {
                        return Err(Error::Diverged {
                            step: step as usize,
                            detail,
                        })
                    }
                    Err(e) => return Err(e),
                }
            }
            for r in &batch {
                sums.0 += r.loss_per;
                sums.1 += r.loss_fix;
                sums.2 += r.alpha;
            }
            apply_update(params, &mut moments, &batch, lr, cfg.momentum, cfg.weight_decay);
            step += 1;
        }

        let n = (order.len()) as f64;
        let eval_mode = match cfg.mode {
            TrainMode::Peripheral => EvalMode::Peripheral,
            TrainMode::Random => EvalMode::Random,
            TrainMode::Saccadic => EvalMode::Saccadic,
        };
        let report = evaluate(
            model,
            params,
            &val_ds,
            cfg.n_train.max(1),
            eval_mode,
            derive_seed(cfg.seed, 0xe7a1),
            cfg,
        )?;
        let record = EpochRecord {
            epoch,
            loss_per: sums.0 / n,
            loss_fix: sums.1 / n,
            alpha_mean: sums.2 / n,
            top1: report.top1,
        };
        history.epochs.push(record.clone());

        let improved = best.as_ref().map(|(b, ..)| record.top1 > *b).unwrap_or(true);
        if improved {
            best = Some((record.top1, params.clone(), moments.clone(), epoch));
            patience_left = cfg.early_stop_patience;
        } else if patience_left > 0 {
            patience_left -= 1;
        }
        if patience_left == 0 {
            break;
        }
    }

    if let Some((_, best_params, best_moments, best_epoch)) = best {
        *params = best_params;
        moments = best_moments;
        history.best_epoch = best_epoch;
    }
    history.steps = step;
    Ok((history, moments))
}

/// Appends the metrics CSV (header + one row per epoch).
pub fn write_metrics_csv(path: &Path, history: &History) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if f.metadata()?.len() == 0 {
        writeln!(f, "epoch,loss_per,loss_fix,alpha_mean,top1")?;
    }
    for r in &history.epochs {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.loss_per, r.loss_fix, r.alpha_mean, r.top1
        )?;
    }
    Ok(())
}
