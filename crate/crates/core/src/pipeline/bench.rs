//! Walltime measurements: full-pipeline runtime vs. fixation count and the
//! sampler-only scaling check.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Graph, Tensor};
use crate::params::{Binding, ParamSet};
use crate::pipeline::config::RunConfig;
use crate::pipeline::dataset::{derive_seed, Dataset};
use crate::pipeline::model::{ForwardOptions, SaccaderModel};
use crate::saccade::{sample_fixations, PriorityMap, Resolution, SamplerParams};

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub n: usize,
    pub mean_seconds: f64,
    /// Half-width of the 95% confidence interval over batches.
    pub ci95_seconds: f64,
    pub batches: usize,
}

/// Mean walltime (with confidence interval) of one evaluation batch per
/// requested fixation count.
pub fn runtime_bench(
    model: &SaccaderModel,
    params: &ParamSet<f32>,
    data: &Dataset<f32>,
    cfg: &RunConfig,
    n_list: &[usize],
    batches: usize,
    batch_size: usize,
) -> Result<Vec<BenchRow>> {
    crate::pipeline::train::init_threads();
    let mut rows = Vec::with_capacity(n_list.len());
    // warm-up pass so allocator and caches settle
    run_batch(model, params, data, cfg, n_list.iter().copied().max().unwrap_or(1), 0, batch_size)?;
    for &n in n_list {
        let mut times = Vec::with_capacity(batches);
        for b in 0..batches {
            let start = Instant::now();
            run_batch(model, params, data, cfg, n, b, batch_size)?;
            times.push(start.elapsed().as_secs_f64());
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
            / (times.len().saturating_sub(1)).max(1) as f64;
        rows.push(BenchRow {
            n,
            mean_seconds: mean,
            ci95_seconds: 1.96 * (var / times.len() as f64).sqrt(),
            batches,
        });
    }
    Ok(rows)
}

fn run_batch(
    model: &SaccaderModel,
    params: &ParamSet<f32>,
    data: &Dataset<f32>,
    cfg: &RunConfig,
    n: usize,
    batch_index: usize,
    batch_size: usize,
) -> Result<()> {
    for i in 0..batch_size {
        let sample = &data.samples[(batch_index * batch_size + i) % data.len()];
        let g = Graph::<f32>::new();
        let b = Binding::new(&g, params);
        let opts = ForwardOptions::sampler(cfg.sampler_params(derive_seed(7, i as u64), n));
        let out = model.forward(&b, &sample.image, &opts)?;
        let _ = g.value(out.fused);
    }
    Ok(())
}

/// Sampler-only mean walltime per fixation count on a synthetic map.
pub fn sampler_walltimes(
    map_side: usize,
    n_list: &[usize],
    repeats: usize,
) -> Result<Vec<(usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut field = Tensor::<f64>::zeros(&[map_side, map_side]);
    for v in field.data_mut() {
        *v = rand::Rng::random::<f64>(&mut rng) + 1e-3;
    }
    let map = PriorityMap::normalized(field, Resolution::Pooled { window: (0, 0) })?;
    let mut out = Vec::with_capacity(n_list.len());
    // warm-up
    let warm = SamplerParams {
        fixations: *n_list.last().unwrap_or(&1),
        seed: 0,
        nms_sigma: map_side as f64 / 8.0,
        ..SamplerParams::default()
    };
    let _ = sample_fixations(&map, &warm)?;
    for &n in n_list {
        let start = Instant::now();
        for r in 0..repeats {
            let p = SamplerParams {
                fixations: n,
                seed: r as u64,
                nms_sigma: map_side as f64 / 8.0,
                ..SamplerParams::default()
            };
            let _ = sample_fixations(&map, &p)?;
        }
        out.push((n, start.elapsed().as_secs_f64() / repeats as f64));
    }
    Ok(out)
}

/// Coefficient of determination of the least-squares line through the points.
pub fn linear_fit_r2(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - mean_y) * (p.1 - mean_y)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    (sxy * sxy) / (sxx * syy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_of_exact_line_is_one() {
        let pts: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, 3.0 + 2.0 * i as f64)).collect();
        assert!((linear_fit_r2(&pts) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn r2_detects_nonlinearity() {
        let pts: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, (i as f64).exp())).collect();
        assert!(linear_fit_r2(&pts) < 0.9);
    }
}
