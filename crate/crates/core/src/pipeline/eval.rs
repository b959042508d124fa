//! Evaluation modes: saccadic fusion, peripheral-only, and the
//! random-sampler averaging baseline.

use rayon::prelude::*;

use crate::error::Result;
use crate::numerics::{Graph, Tensor};
use crate::params::{Binding, ParamSet};
use crate::pipeline::config::RunConfig;
use crate::pipeline::dataset::{derive_seed, Dataset};
use crate::pipeline::model::{FixationSource, ForwardOptions, SaccaderModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Priority-map sampling, learned beta/alpha, fused logits.
    Saccadic,
    /// Peripheral logits only; fixations are skipped entirely.
    Peripheral,
    /// Uniform-random fixation positions and uniform beta (signal averaging).
    Random,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Saccadic => "saccadic",
            EvalMode::Peripheral => "peripheral",
            EvalMode::Random => "random",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub top1: f64,
    /// Per-class (correct, total).
    pub per_class: Vec<(usize, usize)>,
    pub mode: EvalMode,
    pub n_test: usize,
}

/// Extra knobs for controlled comparisons; the plain entry point uses
/// defaults.
#[derive(Clone, Default)]
pub struct EvalOptions {
    pub force_uniform_beta: bool,
    pub fixed_alpha: Option<f64>,
    /// Overrides the sampler with caller-supplied points (keyed per sample).
    pub fixed_points: Option<Vec<Vec<(f64, f64)>>>,
}

pub fn evaluate(
    model: &SaccaderModel,
    params: &ParamSet<f32>,
    data: &Dataset<f32>,
    n_test: usize,
    mode: EvalMode,
    seed: u64,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    evaluate_with_options(model, params, data, n_test, mode, seed, cfg, &EvalOptions::default())
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_with_options(
    model: &SaccaderModel,
    params: &ParamSet<f32>,
    data: &Dataset<f32>,
    n_test: usize,
    mode: EvalMode,
    seed: u64,
    cfg: &RunConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    crate::pipeline::train::init_threads();
    if data.is_empty() {
        return Err(crate::error::Error::InvalidArgument {
            op: "evaluate",
            detail: "empty dataset".into(),
        });
    }
    let predictions: Vec<Result<usize>> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(idx, sample)| {
            let g = Graph::<f32>::new();
            let b = Binding::new(&g, params);
            let n = match mode {
                EvalMode::Peripheral => 0,
                _ => n_test,
            };
            let sampler = cfg.sampler_params(derive_seed(seed, idx as u64), n);
            let mut fwd = ForwardOptions::sampler(sampler);
            match mode {
                EvalMode::Random => {
                    fwd.source = FixationSource::Random;
                    fwd.uniform_beta = true;
                }
                _ => {}
            }
            if opts.force_uniform_beta {
                fwd.uniform_beta = true;
            }
            fwd.alpha_override = opts.fixed_alpha;
            let fixed;
            if let Some(points) = &opts.fixed_points {
                fixed = points[idx].clone();
                fwd.source = FixationSource::Fixed(&fixed);
            }
            let out = model.forward(&b, &sample.image, &fwd)?;
            let logits = match mode {
                EvalMode::Peripheral => g.value(out.z_per),
                _ => g.value(out.fused),
            };
            Ok(argmax(&logits))
        })
        .collect();

    let mut per_class = vec![(0usize, 0usize); data.classes];
    let mut correct = 0usize;
    for (sample, pred) in data.samples.iter().zip(predictions) {
        let pred = pred?;
        per_class[sample.label].1 += 1;
        if pred == sample.label {
            per_class[sample.label].0 += 1;
            correct += 1;
        }
    }
    Ok(EvalReport {
        top1: correct as f64 / data.len() as f64,
        per_class,
        mode,
        n_test,
    })
}

fn argmax(logits: &Tensor<f32>) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
