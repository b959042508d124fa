//! Fixation-count grid ablation: train at each N_train, evaluate at each
//! N_test, average over seeds.

use crate::error::{Error, Result};
use crate::pipeline::config::RunConfig;
use crate::pipeline::dataset::Dataset;
use crate::pipeline::eval::{evaluate, EvalMode};
use crate::pipeline::model::SaccaderModel;
use crate::pipeline::train::train;

#[derive(Clone, Debug)]
pub struct AblationMatrix {
    pub n_train: Vec<usize>,
    pub n_test: Vec<usize>,
    pub seeds: Vec<u64>,
    /// `means[i][j]` = mean accuracy over seeds for (n_train[i], n_test[j]).
    pub means: Vec<Vec<f64>>,
}

impl AblationMatrix {
    pub fn render(&self) -> String {
        let mut out = String::from("n_train\\n_test");
        for n in &self.n_test {
            out.push_str(&format!("\t{n}"));
        }
        out.push('\n');
        for (i, nt) in self.n_train.iter().enumerate() {
            out.push_str(&format!("{nt}"));
            for j in 0..self.n_test.len() {
                out.push_str(&format!("\t{:.4}", self.means[i][j]));
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per (N_train, seed) and evaluates it at every N_test.
/// Training grid values below 2 are rejected: single-fixation training
/// collapses the fixation-pooling weights.
pub fn fixation_grid_ablation(
    base: &RunConfig,
    train_data: &Dataset<f32>,
    test_data: &Dataset<f32>,
    n_train_grid: &[usize],
    n_test_grid: &[usize],
    seeds: &[u64],
) -> Result<AblationMatrix> {
    if n_train_grid.iter().any(|&n| n < 2) {
        return Err(Error::InvalidArgument {
            op: "fixation_grid_ablation",
            detail: "training fixation counts must be >= 2".into(),
        });
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument {
            op: "fixation_grid_ablation",
            detail: "need at least one seed".into(),
        });
    }
    let mut means = vec![vec![0.0f64; n_test_grid.len()]; n_train_grid.len()];
    for (i, &n_train) in n_train_grid.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.n_train = n_train;
            cfg.seed = seed;
            let model = SaccaderModel::new(cfg.clone())?;
            let mut params = model.init_params::<f32>(seed);
            train(&model, &mut params, train_data, &cfg)?;
            for (j, &n_test) in n_test_grid.iter().enumerate() {
                let report = evaluate(
                    &model,
                    &params,
                    test_data,
                    n_test,
                    EvalMode::Saccadic,
                    seed,
                    &cfg,
                )?;
                means[i][j] += report.top1 / seeds.len() as f64;
            }
        }
    }
    Ok(AblationMatrix {
        n_train: n_train_grid.to_vec(),
        n_test: n_test_grid.to_vec(),
        seeds: seeds.to_vec(),
        means,
    })
}
