use saccade_core::fusion::total_loss;
use saccade_core::numerics::Graph;
use saccade_core::params::Binding;
use saccade_core::pipeline::*;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.train_per_class = 3;
    cfg.test_per_class = 1;
    cfg.parts = vec![4, 4];
    cfg.stage_channels = vec![12, 24];
    let (train_set, _) = generate_glyph_dataset::<f32>(&cfg).unwrap();
    let model = SaccaderModel::new(cfg.clone()).unwrap();
    let params = model.init_params::<f32>(0);

    // logits spread across samples
    for s in train_set.samples.iter().step_by(7).take(4) {
        let g = Graph::<f32>::new();
        let b = Binding::new(&g, &params);
        let opts = ForwardOptions::sampler(cfg.sampler_params(1, 0));
        let out = model.forward(&b, &s.image, &opts).unwrap();
        println!("label {} z_per {:?}", s.label, g.value(out.z_per));
    }

    // gradient norms for one sample, peripheral loss only
    let g = Graph::<f32>::new();
    let b = Binding::new(&g, &params);
    let opts = ForwardOptions::sampler(cfg.sampler_params(1, 4));
    let out = model.forward(&g_b(&b), &train_set.samples[0].image, &opts).unwrap();
    let loss = total_loss(&g, out.z_per, out.z_fix_pooled, train_set.samples[0].label, out.alpha, &cfg.loss_config()).unwrap();
    println!("loss = {}", g.scalar_value(loss));
    let grads = g.backward(loss);
    let by_name = b.collect_grads(&grads);
    for (name, t) in &by_name {
        let norm: f64 = t.iter_f64().map(|v| v * v).sum::<f64>().sqrt();
        println!("{:<34} |g| = {:.3e}", name, norm);
    }
}

fn g_b<'a, 'b>(b: &'b Binding<'a, f32>) -> &'b Binding<'a, f32> { b }
