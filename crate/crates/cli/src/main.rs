//! Command-line harness: train, evaluate, ablate, benchmark, and render
//! priority-map visualizations.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use saccade_core::numerics::{Graph, Tensor};
use saccade_core::params::Binding;
use saccade_core::pipeline::pnm;
use saccade_core::pipeline::{
    evaluate, fixation_grid_ablation, generate_glyph_dataset, load_checkpoint, load_image_folder,
    runtime_bench, save_checkpoint, train, write_metrics_csv, Dataset, EvalMode, ForwardOptions,
    RunConfig, SaccaderModel,
};
use saccade_core::saccade::render_priority_progression;

#[derive(Parser)]
#[command(name = "saccade", version, about = "Saccadic-vision classifier harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint + metrics to --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints top-1 and appends a JSON-lines record.
    Eval(EvalArgs),
    /// Render priority maps, the suppression progression, and the fixation
    /// overlay for one image.
    Visualize(VizArgs),
    /// Walltime per fixation count over repeated evaluation batches.
    Bench(BenchArgs),
    /// Fixation-count grid ablation (train x test).
    Ablate(AblateArgs),
}

/// Command-line overrides; each maps onto a config key and takes precedence
/// over the config file.
#[derive(Args, Clone)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "n-train")]
    n_train: Option<usize>,
    #[arg(long = "n-test")]
    n_test: Option<usize>,
    #[arg(long = "nms-sigma")]
    nms_sigma: Option<f64>,
    #[arg(long = "nms-strength")]
    nms_strength: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, action = clap::ArgAction::SetTrue)]
    disable_position_bias: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        let mut set = |k: &str, v: String| -> anyhow::Result<()> {
            cfg.set(k, &v).map_err(|e| anyhow!("{e}"))
        };
        if let Some(v) = self.seed {
            set("seed", v.to_string())?;
        }
        if let Some(v) = self.epochs {
            set("epochs", v.to_string())?;
        }
        if let Some(v) = self.n_train {
            set("n_train", v.to_string())?;
        }
        if let Some(v) = self.n_test {
            set("n_test", v.to_string())?;
        }
        if let Some(v) = self.nms_sigma {
            set("nms_sigma", v.to_string())?;
        }
        if let Some(v) = self.nms_strength {
            set("nms_strength", v.to_string())?;
        }
        if let Some(v) = self.temperature {
            set("temperature", v.to_string())?;
        }
        if self.disable_position_bias {
            set("disable_position_bias", "true".into())?;
        }
        cfg.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Training mode override (saccadic | peripheral | random).
    #[arg(long)]
    mode: Option<ModeArg>,
    /// Output directory for checkpoint, metrics, and the resolved config.
    #[arg(long, default_value = "saccade-run")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional directory-per-class pixmap dataset; defaults to the seeded
    /// glyph test split of the embedded config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Saccadic)]
    mode: ModeArg,
    /// Fixations at test time (defaults to the checkpoint config's n_test).
    #[arg(long = "n-test")]
    n_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to append results.jsonl (defaults next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// P5/P6 input image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fixation counts to benchmark.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4, 8, 16])]
    n: Vec<usize>,
    /// Batches per fixation count (the mean and CI are taken over these).
    #[arg(long, default_value_t = 32)]
    batches: usize,
    #[arg(long = "batch-size", default_value_t = 4)]
    batch_size: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "n-train", value_delimiter = ',', default_values_t = vec![2usize, 4])]
    n_train: Vec<usize>,
    #[arg(long = "n-test", value_delimiter = ',', default_values_t = vec![2usize, 4])]
    n_test: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
    seeds: Vec<u64>,
    #[arg(long, default_value = "saccade-ablation")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Saccadic,
    Peripheral,
    Random,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Saccadic => EvalMode::Saccadic,
            ModeArg::Peripheral => EvalMode::Peripheral,
            ModeArg::Random => EvalMode::Random,
        }
    }
}

impl ModeArg {
    fn config_value(self) -> &'static str {
        match self {
            ModeArg::Saccadic => "saccadic",
            ModeArg::Peripheral => "peripheral",
            ModeArg::Random => "random",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Visualize(args) => cmd_visualize(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn read_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    RunConfig::parse(&text).map_err(|e| anyhow!("{e}"))
}

fn training_data(cfg: &RunConfig) -> anyhow::Result<(Dataset<f32>, Dataset<f32>)> {
    if cfg.data_dir.is_empty() {
        Ok(generate_glyph_dataset::<f32>(cfg)?)
    } else {
        let root = PathBuf::from(&cfg.data_dir);
        let train = load_image_folder::<f32>(&root.join("train"), cfg)?;
        let test = load_image_folder::<f32>(&root.join("test"), cfg)?;
        Ok((train, test))
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = read_config(&args.config)?;
    if let Some(mode) = args.mode {
        cfg.set("mode", mode.config_value()).map_err(|e| anyhow!("{e}"))?;
    }
    args.overrides.apply(&mut cfg)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.resolved"), cfg.to_text())?;

    let (train_set, _) = training_data(&cfg)?;
    let model = SaccaderModel::new(cfg.clone())?;
    let mut params = model.init_params::<f32>(cfg.seed);
    println!(
        "training: mode={} params={} train={} classes={}",
        cfg.mode.as_str(),
        params.scalar_count(),
        train_set.len(),
        train_set.classes
    );
    let (history, moments) = train(&model, &mut params, &train_set, &cfg)?;
    for r in &history.epochs {
        println!(
            "epoch {:>3}  loss_per {:.4}  loss_fix {:.4}  alpha {:.3}  val_top1 {:.4}",
            r.epoch, r.loss_per, r.loss_fix, r.alpha_mean, r.top1
        );
    }
    write_metrics_csv(&args.out.join("metrics.csv"), &history)?;
    save_checkpoint(
        &args.out.join("checkpoint.sacc"),
        &cfg,
        history.steps,
        &params,
        &moments,
    )?;
    println!(
        "done: best epoch {} of {}, outputs in {}",
        history.best_epoch,
        history.epochs.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (ck, model) = load_checkpoint(&args.checkpoint)?;
    let cfg = ck.config.clone();
    let data = match &args.data {
        Some(dir) => load_image_folder::<f32>(dir, &cfg)?,
        None => generate_glyph_dataset::<f32>(&cfg)?.1,
    };
    let mode: EvalMode = args.mode.into();
    let n_test = args.n_test.unwrap_or(cfg.n_test);
    let seed = args.seed.unwrap_or(cfg.seed);
    let report = evaluate(&model, &ck.params, &data, n_test, mode, seed, &cfg)?;
    println!("mode {} n_test {} top1 {:.4}", mode.as_str(), n_test, report.top1);
    for (class, (correct, total)) in report.per_class.iter().enumerate() {
        println!("class {class}: {correct}/{total}");
    }
    let record = serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "mode": mode.as_str(),
        "n_test": n_test,
        "seed": seed,
        "samples": data.len(),
        "top1": report.top1,
        "per_class": report.per_class,
    });
    let out = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf()
    });
    std::fs::create_dir_all(&out)?;
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("results.jsonl"))?;
    writeln!(f, "{record}")?;
    Ok(())
}

fn cmd_visualize(args: VizArgs) -> anyhow::Result<()> {
    let (ck, model) = load_checkpoint(&args.checkpoint)?;
    let cfg = ck.config.clone();
    let image = pnm::read_pnm::<f32>(&args.image)?;
    if image.dim(0) != cfg.in_channels {
        return Err(anyhow!(
            "image has {} channels, model expects {}",
            image.dim(0),
            cfg.in_channels
        ));
    }
    std::fs::create_dir_all(&args.out)?;

    let g = Graph::<f32>::new();
    let b = Binding::new(&g, &ck.params);
    let mut opts = ForwardOptions::sampler(cfg.sampler_params(args.seed, cfg.n_test));
    opts.trace = true;
    let out = model.forward(&b, &image, &opts)?;

    // raw fused map and the window-constrained map, max-normalized
    let norm = |t: &Tensor<f64>| {
        let max = t.max_value();
        if max > 0.0 {
            t.map(|v| v / max)
        } else {
            t.clone()
        }
    };
    pnm::write_pgm(&args.out.join("priority_raw.pgm"), &norm(&out.priority.field))?;
    let refined = out
        .refined
        .as_ref()
        .ok_or_else(|| anyhow!("no refined map (n_test is 0)"))?;
    pnm::write_pgm(&args.out.join("priority_refined.pgm"), &norm(&refined.field))?;

    // per-step suppressed maps (after each draw)
    let rendered = render_priority_progression(&out.fixations.snapshots);
    for (step, map) in rendered.iter().skip(1).enumerate() {
        pnm::write_pgm(&args.out.join(format!("progression_{step:02}.pgm")), map)?;
    }

    // source with fixation windows outlined
    let overlay = draw_overlay(&image, &out.fixations.points, cfg.input_side);
    pnm::write_ppm(&args.out.join("fixations.ppm"), &overlay)?;

    println!(
        "wrote {} files to {}",
        2 + rendered.len().saturating_sub(1) + 1,
        args.out.display()
    );
    Ok(())
}

/// Grayscale (or first-channel) source promoted to RGB with red window
/// outlines at each fixation.
fn draw_overlay(image: &Tensor<f32>, points: &[(f64, f64)], window: usize) -> Tensor<f32> {
    let (h, w) = (image.dim(1), image.dim(2));
    let mut rgb = Tensor::<f32>::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let v = image.at(&[0, y, x]);
            for c in 0..3 {
                rgb.set(&[c, y, x], v);
            }
        }
    }
    let half = window as f64 / 2.0;
    for &(r, c) in points {
        let y0 = (r - half).round().max(0.0) as usize;
        let y1 = ((r + half).round() as usize).min(h - 1);
        let x0 = (c - half).round().max(0.0) as usize;
        let x1 = ((c + half).round() as usize).min(w - 1);
        for x in x0..=x1 {
            for y in [y0, y1] {
                rgb.set(&[0, y, x], 1.0);
                rgb.set(&[1, y, x], 0.0);
                rgb.set(&[2, y, x], 0.0);
            }
        }
        for y in y0..=y1 {
            for x in [x0, x1] {
                rgb.set(&[0, y, x], 1.0);
                rgb.set(&[1, y, x], 0.0);
                rgb.set(&[2, y, x], 0.0);
            }
        }
    }
    rgb
}

fn cmd_bench(args: BenchArgs) -> anyhow::Result<()> {
    if args.batches < 32 {
        return Err(anyhow!("need at least 32 batches for a stable interval"));
    }
    let (ck, model) = load_checkpoint(&args.checkpoint)?;
    let cfg = ck.config.clone();
    let data = generate_glyph_dataset::<f32>(&cfg)?.1;
    let rows = runtime_bench(
        &model,
        &ck.params,
        &data,
        &cfg,
        &args.n,
        args.batches,
        args.batch_size,
    )?;
    println!("n_test\tmean_s\tci95_s\tbatches");
    for row in rows {
        println!(
            "{}\t{:.4}\t{:.4}\t{}",
            row.n, row.mean_seconds, row.ci95_seconds, row.batches
        );
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let cfg = read_config(&args.config)?;
    let (train_set, test_set) = training_data(&cfg)?;
    let matrix = fixation_grid_ablation(
        &cfg,
        &train_set,
        &test_set,
        &args.n_train,
        &args.n_test,
        &args.seeds,
    )?;
    let rendered = matrix.render();
    print!("{rendered}");
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("ablation.tsv"), rendered)?;
    std::fs::write(args.out.join("config.resolved"), cfg.to_text())?;
    Ok(())
}
