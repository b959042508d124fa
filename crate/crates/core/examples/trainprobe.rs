use saccade_core::numerics::Graph;
use saccade_core::params::Binding;
use saccade_core::pipeline::*;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.parts = vec![4, 4];
    cfg.stage_channels = vec![12, 24];
    let mut args = std::env::args().skip(1);
    while let Some(k) = args.next() { let v = args.next().unwrap(); cfg.set(&k, &v).unwrap(); }
    eprintln!("== mode {} lr {} epochs {}", cfg.mode.as_str(), cfg.learning_rate, cfg.epochs);
    let (train_set, test_set) = generate_glyph_dataset::<f32>(&cfg).unwrap();
    let model = SaccaderModel::new(cfg.clone()).unwrap();
    let mut params = model.init_params::<f32>(cfg.seed);
    let t0 = std::time::Instant::now();
    let (history, _) = train(&model, &mut params, &train_set, &cfg).unwrap();
    for r in history.epochs.iter().filter(|r| r.epoch % 5 == 0 || r.epoch + 1 == history.epochs.len()) {
        eprintln!("epoch {:>3} loss_per {:.4} loss_fix {:.4} alpha {:.3} val {:.3}", r.epoch, r.loss_per, r.loss_fix, r.alpha_mean, r.top1);
    }
    eprintln!("trained {:.0}s best_epoch {}", t0.elapsed().as_secs_f64(), history.best_epoch);
    for mode in [EvalMode::Saccadic, EvalMode::Peripheral, EvalMode::Random] {
        let rep = evaluate(&model, &params, &test_set, cfg.n_test, mode, 123, &cfg).unwrap();
        eprintln!("{:<11} top1 = {:.4}", rep.mode.as_str(), rep.top1);
    }
    // trained hit rate on test images
    let (mut hits, mut total) = (0usize, 0usize);
    for (idx, s) in test_set.samples.iter().enumerate() {
        let side = cfg.canvas_side;
        let (mut sy, mut sx, mut n) = (0.0f64, 0.0f64, 0.0f64);
        for y in 0..side { for x in 0..side {
            if s.image.at(&[0, y, x]) >= 0.99 { sy += y as f64; sx += x as f64; n += 1.0; }
        }}
        let (gy, gx) = (sy / n, sx / n);
        let g = Graph::<f32>::new();
        let b = Binding::new(&g, &params);
        let opts = ForwardOptions::sampler(cfg.sampler_params(500 + idx as u64, cfg.n_test));
        let out = model.forward(&b, &s.image, &opts).unwrap();
        for (r, c) in &out.fixations.points {
            total += 1;
            if (r - gy).abs() <= 16.0 && (c - gx).abs() <= 16.0 { hits += 1; }
        }
    }
    eprintln!("trained fixation hit rate: {:.3} ({hits}/{total})", hits as f64 / total as f64);
}
