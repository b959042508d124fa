//! End-to-end pipeline behavior: gradient topology, weight sharing,
//! determinism, and evaluation-mode equivalences.

use saccade_core::fusion::total_loss;
use saccade_core::numerics::Graph;
use saccade_core::params::Binding;
use saccade_core::pipeline::*;

/// Small, fast configuration used throughout these tests.
fn tiny_config() -> RunConfig {
    RunConfig {
        canvas_side: 64,
        glyph_side: 16,
        classes: 4,
        train_per_class: 6,
        test_per_class: 3,
        clutter_density: 0.0005,
        input_side: 16,
        patch_size: 2,
        stage_channels: vec![8, 12],
        parts: vec![3, 3],
        n_train: 2,
        n_test: 2,
        epochs: 2,
        batch_size: 6,
        learning_rate: 0.003,
        warmup_epochs: 1,
        early_stop_patience: 10,
        ..RunConfig::default()
    }
}

#[test]
fn fixation_branch_gradients_reach_shared_encoder() {
    let cfg = tiny_config();
    let (train_set, _) = generate_glyph_dataset::<f32>(&cfg).unwrap();
    let model = SaccaderModel::new(cfg.clone()).unwrap();
    let params = model.init_params::<f32>(5);
    let sample = &train_set.samples[0];

    let g = Graph::<f32>::new();
    let b = Binding::new(&g, &params);
    let opts = ForwardOptions::sampler(cfg.sampler_params(3, 2));
    let out = model.forward(&b, &sample.image, &opts).unwrap();

    // fixation-only loss: lambda_per = 0
    let mut loss_cfg = cfg.loss_config();
    loss_cfg.lambda_per = 0.0;
    loss_cfg.lambda_fix = 1.0;
    let loss = total_loss(
        &g,
        out.z_per,
        out.z_fix_pooled,
        sample.label,
        out.alpha,
        &loss_cfg,
    )
    .unwrap();
    let grads = g.backward(loss);
    let by_name = b.collect_grads(&grads);
    let bb_norm: f64 = by_name
        .iter()
        .filter(|(n, _)| n.starts_with("backbone."))
        .flat_map(|(_, t)| t.iter_f64())
        .map(|v| v * v)
        .sum();
    assert!(
        bb_norm > 0.0,
        "fixation loss must reach the shared encoder weights"
    );

    // and the peripheral loss reaches them too
    let mut loss_cfg = cfg.loss_config();
    loss_cfg.lambda_fix = 0.0;
    loss_cfg.lambda_per = 1.0;
    let loss = total_loss(&g, out.z_per, None, sample.label, out.alpha, &loss_cfg).unwrap();
    let grads = g.backward(loss);
    let by_name = b.collect_grads(&grads);
    let bb_norm: f64 = by_name
        .iter()
        .filter(|(n, _)| n.starts_with("backbone."))
        .flat_map(|(_, t)| t.iter_f64())
        .map(|v| v * v)
        .sum();
    assert!(bb_norm > 0.0);
}

#[test]
fn gradients_exist_only_for_named_parameters() {
    // fixation coordinates and extracted patches live outside the graph;
    // after backward, gradient entries exist only for parameter leaves
    let cfg = tiny_config();
    let (train_set, _) = generate_glyph_dataset::<f32>(&cfg).unwrap();
    let model = SaccaderModel::new(cfg.clone()).unwrap();
    let params = model.init_params::<f32>(5);
    let sample = &train_set.samples[1];

    let g = Graph::<f32>::new();
    let b = Binding::new(&g, &params);
    let opts = ForwardOptions::sampler(cfg.sampler_params(4, 2));
    let out = model.forward(&b, &sample.image, &opts).unwrap();
    let loss = total_loss(
        &g,
        out.z_per,
        out.z_fix_pooled,
        sample.label,
        out.alpha,
        &cfg.loss_config(),
    )
    .unwrap();
    let grads = g.backward(loss);
    let by_name = b.collect_grads(&grads);
    for name in by_name.keys() {
        assert!(params.contains(name), "gradient for non-parameter {name}");
    }
    // points are plain floats, not graph nodes
    assert!(out.fixations.points.iter().all(|p| p.0.is_finite()));
}

#[test]
fn training_is_deterministic_across_runs() {
    let cfg = tiny_config();
    let (train_set, _) = generate_glyph_dataset::<f32>(&cfg).unwrap();
    let model = SaccaderModel::new(cfg.clone()).unwrap();

    let mut p1 = model.init_params::<f32>(cfg.seed);
    let (h1, _) = train(&model, &mut p1, &train_set, &cfg).unwrap();
    let mut p2 = model.init_params::<f32>(cfg.seed);
    let (h2, _) = train(&model, &mut p2, &train_set, &cfg).unwrap();

    assert_eq!(h1.epochs.len(), h2.epochs.len());
    for (a, b) in h1.epochs.iter().zip(&h2.epochs) {
        assert_eq!(a.loss_per, b.loss_per, "loss curves must match bitwise");
        assert_eq!(a.loss_fix, b.loss_fix);
        assert_eq!(a.top1, b.top1);
    }
    for (name, e) in p1.iter() {
        assert_eq!(e.tensor, *p2.get(name), "{name} differs between runs");
    }
}

#[test]
fn one_epoch_reduces_training_loss() {
    let mut cfg = tiny_config();
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.train_per_class = 8;
    let (train_set, _) = generate_glyph_dataset::<f32>(&cfg).unwrap();
    let model = SaccaderModel::new(cfg.clone()).unwrap();
    let mut params = model.init_params::<f32>(cfg.seed);
    let (history, _) = train(&model, &mut params, &train_set, &cfg).unwrap();
    let first = history.epochs[0].loss_per + history.epochs[0].loss_fix;
    let last = history.epochs[1].loss_per + history.epochs[1].loss_fix;
    assert!(last < first, "epoch loss {first} -> {last} did not decrease");
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let mut cfg = tiny_config();
    cfg.learning_rate = 0.0;
    cfg.weight_decay = 0.0;
    cfg.epochs = 1;
    cfg.warmup_epochs = 0;
    cfg.early_stop_patience = 1;
    let (train_set, _) = generate_glyph_dataset::<f32>(&cfg).unwrap();
    let model = SaccaderModel::new(cfg.clone()).unwrap();
    let mut params = model.init_params::<f32>(cfg.seed);
    let before = params.clone();
    let _ = train(&model, &mut params, &train_set, &cfg).unwrap();
    for (name, e) in before.iter() {
        assert_eq!(e.tensor, *params.get(name), "{name} moved at zero lr");
    }
}

#[test]
fn peripheral_mode_ignores_fixation_machinery() {
    let mut cfg = tiny_config();
    cfg.mode = TrainMode::Peripheral;
    cfg.lambda_per = 1.0;
    cfg.lambda_fix = 0.0;
    cfg.epochs = 1;
    let (train_set, _) = generate_glyph_dataset::<f32>(&cfg).unwrap();
    let model = SaccaderModel::new(cfg.clone()).unwrap();
    let mut params = model.init_params::<f32>(cfg.seed);
    let (history, _) = train(&model, &mut params, &train_set, &cfg).unwrap();
    assert!(history.epochs[0].loss_fix == 0.0, "no fixation loss in peripheral mode");
}

#[test]
fn evaluation_is_deterministic_and_modes_coincide_when_pinned() {
    let cfg = tiny_config();
    let (train_set, test_set) = generate_glyph_dataset::<f32>(&cfg).unwrap();
    let _ = &train_set;
    let model = SaccaderModel::new(cfg.clone()).unwrap();
    let params = model.init_params::<f32>(11);

    let r1 = evaluate(&model, &params, &test_set, 2, EvalMode::Saccadic, 77, &cfg).unwrap();
    let r2 = evaluate(&model, &params, &test_set, 2, EvalMode::Saccadic, 77, &cfg).unwrap();
    assert_eq!(r1.top1, r2.top1);
    assert_eq!(r1.per_class, r2.per_class);

    // identical points + uniform beta + fixed alpha: saccadic == random
    let half = cfg.input_side as f64 / 2.0;
    let lo = half;
    let hi = cfg.canvas_side as f64 - half;
    let points: Vec<Vec<(f64, f64)>> = (0..test_set.len())
        .map(|i| {
            vec![
                (lo + (i % 7) as f64, lo + (i % 11) as f64),
                (hi - (i % 5) as f64, hi - (i % 3) as f64),
            ]
        })
        .collect();
    let opts = EvalOptions {
        force_uniform_beta: true,
        fixed_alpha: Some(0.6),
        fixed_points: Some(points),
    };
    let a = evaluate_with_options(
        &model, &params, &test_set, 2, EvalMode::Saccadic, 77, &cfg, &opts,
    )
    .unwrap();
    let b = evaluate_with_options(
        &model, &params, &test_set, 2, EvalMode::Random, 77, &cfg, &opts,
    )
    .unwrap();
    assert_eq!(a.top1, b.top1, "modes differ only in sampler and weighting");
    assert_eq!(a.per_class, b.per_class);
}

#[test]
fn metrics_csv_matches_history_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (train_set, _) = generate_glyph_dataset::<f32>(&cfg).unwrap();
    let model = SaccaderModel::new(cfg.clone()).unwrap();

    let mut p1 = model.init_params::<f32>(cfg.seed);
    let (h1, m1) = train(&model, &mut p1, &train_set, &cfg).unwrap();
    let mut p2 = model.init_params::<f32>(cfg.seed);
    let (h2, m2) = train(&model, &mut p2, &train_set, &cfg).unwrap();

    let c1 = dir.path().join("a.csv");
    let c2 = dir.path().join("b.csv");
    write_metrics_csv(&c1, &h1).unwrap();
    write_metrics_csv(&c2, &h2).unwrap();
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());

    let k1 = dir.path().join("a.sacc");
    let k2 = dir.path().join("b.sacc");
    save_checkpoint(&k1, &cfg, h1.steps, &p1, &m1).unwrap();
    save_checkpoint(&k2, &cfg, h2.steps, &p2, &m2).unwrap();
    assert_eq!(std::fs::read(&k1).unwrap(), std::fs::read(&k2).unwrap());
}

#[test]
fn grid_ablation_shapes_and_validation() {
    let mut cfg = tiny_config();
    cfg.epochs = 1;
    cfg.train_per_class = 4;
    cfg.test_per_class = 2;
    let (train_set, test_set) = generate_glyph_dataset::<f32>(&cfg).unwrap();

    assert!(
        fixation_grid_ablation(&cfg, &train_set, &test_set, &[1, 2], &[2], &[0]).is_err(),
        "training grid below 2 must be rejected"
    );

    let matrix = fixation_grid_ablation(&cfg, &train_set, &test_set, &[2], &[2, 3], &[0]).unwrap();
    assert_eq!(matrix.means.len(), 1);
    assert_eq!(matrix.means[0].len(), 2);
    let rendered = matrix.render();
    assert!(rendered.contains("n_train"));
}
