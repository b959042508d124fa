use saccade_core::numerics::Graph;
use saccade_core::params::Binding;
use saccade_core::pipeline::*;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.train_per_class = 10;
    cfg.test_per_class = 1;
    cfg.parts = vec![4, 4];
    cfg.stage_channels = vec![12, 24];
    let mut args = std::env::args().skip(1);
    while let Some(k) = args.next() { let v = args.next().unwrap(); cfg.set(&k, &v).unwrap(); }
    let (train_set, _) = generate_glyph_dataset::<f32>(&cfg).unwrap();
    let model = SaccaderModel::new(cfg.clone()).unwrap();
    let params = model.init_params::<f32>(cfg.seed);

    let mut hits = 0usize;
    let mut total = 0usize;
    let mut img_with_hit = 0usize;
    for (idx, s) in train_set.samples.iter().enumerate() {
        // glyph center: centroid of lit pixels (glyph is the only 1.0 region)
        let side = cfg.canvas_side;
        let (mut sy, mut sx, mut n) = (0.0f64, 0.0f64, 0.0f64);
        for y in 0..side { for x in 0..side {
            if s.image.at(&[0, y, x]) >= 0.99 { sy += y as f64; sx += x as f64; n += 1.0; }
        }}
        let (gy, gx) = (sy / n, sx / n);
        let g = Graph::<f32>::new();
        let b = Binding::new(&g, &params);
        let opts = ForwardOptions::sampler(cfg.sampler_params(idx as u64, cfg.n_test));
        let out = model.forward(&b, &s.image, &opts).unwrap();
        let mut any = false;
        for (r, c) in &out.fixations.points {
            total += 1;
            // window half-side 16: does the window contain the glyph center?
            if (r - gy).abs() <= 16.0 && (c - gx).abs() <= 16.0 { hits += 1; any = true; }
        }
        if any { img_with_hit += 1; }
    }
    println!("fixation hit rate: {:.3} ({} / {})", hits as f64 / total as f64, hits, total);
    println!("images with >=1 hit: {:.3}", img_with_hit as f64 / train_set.len() as f64);
    // chance: window center within +/-16 of glyph center ~ (32/225)^2 ~ 2%
}
