use saccade_core::pipeline::*;
fn main() {
    let cfg = RunConfig {
        canvas_side: 64, glyph_side: 16, classes: 4, train_per_class: 6, test_per_class: 3,
        clutter_density: 0.0005, input_side: 16, patch_size: 2,
        stage_channels: vec![8, 12], parts: vec![3, 3], n_train: 2, n_test: 2,
        epochs: 2, batch_size: 6, learning_rate: 0.003, warmup_epochs: 1,
        early_stop_patience: 10, ..RunConfig::default()
    };
    let (train_set, _) = generate_glyph_dataset::<f32>(&cfg).unwrap();
    let model = SaccaderModel::new(cfg.clone()).unwrap();
    let mut params = model.init_params::<f32>(cfg.seed);
    let (h, _) = train(&model, &mut params, &train_set, &cfg).unwrap();
    for r in &h.epochs {
        println!("epoch {} loss_per {} loss_fix {} alpha {} top1 {}", r.epoch, r.loss_per, r.loss_fix, r.alpha_mean, r.top1);
    }
}
