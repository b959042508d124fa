use saccade_core::pipeline::*;
use std::time::Instant;

fn main() {
    let mut cfg = RunConfig::default();
    let mut args = std::env::args().skip(1);
    while let Some(k) = args.next() {
        let v = args.next().unwrap();
        cfg.set(&k, &v).unwrap();
    }
    eprintln!("config:\n{}", cfg.to_text());
    let (train_set, test_set) = generate_glyph_dataset::<f32>(&cfg).unwrap();
    eprintln!("train {} test {}", train_set.len(), test_set.len());
    let model = SaccaderModel::new(cfg.clone()).unwrap();
    let mut params = model.init_params::<f32>(cfg.seed);
    eprintln!("params: {}", params.scalar_count());
    let t0 = Instant::now();
    let (history, _moments) = train(&model, &mut params, &train_set, &cfg).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    for r in &history.epochs {
        eprintln!(
            "epoch {:>3}  loss_per {:.4}  loss_fix {:.4}  alpha {:.3}  val_top1 {:.4}",
            r.epoch, r.loss_per, r.loss_fix, r.alpha_mean, r.top1
        );
    }
    eprintln!("trained in {:.1}s ({} epochs)", train_time, history.epochs.len());
    let t1 = Instant::now();
    for mode in [EvalMode::Saccadic, EvalMode::Peripheral, EvalMode::Random] {
        let rep = evaluate(&model, &params, &test_set, cfg.n_test, mode, 123, &cfg).unwrap();
        eprintln!("{:<11} top1 = {:.4}", rep.mode.as_str(), rep.top1);
    }
    eprintln!("eval in {:.1}s", t1.elapsed().as_secs_f64());
}
