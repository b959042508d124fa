//! Full model assembly: encoder, part-sampling attention, sampler wiring,
//! and fusion, sharing one parameter set across the peripheral and fixation
//! passes.
//!
//! Gradient topology: the priority map leaves the graph as a plain tensor
//! before refinement and sampling, fixation coordinates are plain floats, and
//! extracted patches re-enter the graph as constants. Everything else (both
//! encoder passes, the attention blocks, the impact heads, the losses) stays
//! on one differentiable tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, StageFeatures};
use crate::error::Result;
use crate::fusion::Fusion;
use crate::mpsa::Mpsa;
use crate::numerics::{bilinear_resize, Real, Tensor, Var};
use crate::params::{Binding, ParamSet};
use crate::pipeline::config::RunConfig;
use crate::saccade::{
    extract_patch, refine_priority, sample_fixations, sample_fixations_traced, FixationSet,
    PriorityMap, Resolution, SamplerParams,
};

/// Where fixation points come from during a forward pass.
pub enum FixationSource<'a> {
    /// Priority-map sampling with Gaussian-penalty NMS.
    Sampler,
    /// Uniform-random valid window positions (the DA/TTA baseline).
    Random,
    /// Caller-supplied points (tests and visualization).
    Fixed(&'a [(f64, f64)]),
}

pub struct ForwardOptions<'a> {
    pub sampler: SamplerParams,
    pub source: FixationSource<'a>,
    /// Replace learned Boltzmann weights with uniform 1/N pooling.
    pub uniform_beta: bool,
    /// Clamp the global impact to a fixed value instead of the learned head.
    pub alpha_override: Option<f64>,
    /// Record per-step priority snapshots for visualization.
    pub trace: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn sampler(sampler: SamplerParams) -> Self {
        Self {
            sampler,
            source: FixationSource::Sampler,
            uniform_beta: false,
            alpha_override: None,
            trace: false,
        }
    }
}

/// One full peripheral + fixation pass.
pub struct SaccadicForward {
    pub z_per: Var,
    pub z_fix: Vec<Var>,
    /// Beta-pooled fixation logits including the 1/N factor (loss input).
    pub z_fix_pooled: Option<Var>,
    pub alpha: Var,
    pub beta: Option<Var>,
    /// Final fused class logits.
    pub fused: Var,
    pub fixations: FixationSet,
    /// Feature-grid priority map (plain tensor, already detached).
    pub priority: PriorityMap<f64>,
    /// Window-constrained priority map the sampler drew from.
    pub refined: Option<PriorityMap<f64>>,
}

pub struct SaccaderModel {
    pub backbone: Backbone,
    pub mpsa: Mpsa,
    pub fusion: Fusion,
    cfg: RunConfig,
}

impl SaccaderModel {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone_cfg = cfg.backbone_config();
        let backbone = Backbone::new(backbone_cfg.clone())?;
        let mpsa = Mpsa::new(&backbone_cfg, cfg.mpsa_config())?;
        let fusion = Fusion::new(&backbone_cfg, cfg.classes, cfg.boltzmann_temperature)?;
        Ok(Self {
            backbone,
            mpsa,
            fusion,
            cfg,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        self.backbone.init(&mut params, &mut rng);
        self.mpsa.init(&mut params, &mut rng);
        self.fusion.init(&mut params, &mut rng);
        params
    }

    /// Downsamples the source image to the encoder's input side.
    pub fn peripheral_view<T: Real>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
        let side = self.cfg.input_side;
        let mut out = Tensor::zeros(&[c, side, side]);
        for ch in 0..c {
            let plane = Tensor::new(vec![h, w], image.data()[ch * h * w..(ch + 1) * h * w].to_vec())
                .expect("plane shape");
            let resized = bilinear_resize(&plane, side, side)?;
            for y in 0..side {
                for x in 0..side {
                    out.set(&[ch, y, x], resized.at(&[y, x]));
                }
            }
        }
        Ok(out)
    }

    /// Encoder + attention pass over one already-sized view.
    pub fn forward_view<T: Real>(
        &self,
        b: &Binding<'_, T>,
        view: &Tensor<T>,
    ) -> Result<(Vec<StageFeatures>, crate::mpsa::MpsaForward)> {
        let stages = self.backbone.encode(b, view)?;
        let out = self.mpsa.forward(b, &stages)?;
        Ok((stages, out))
    }

    /// Full saccadic pass over a high-resolution source image.
    pub fn forward<T: Real>(
        &self,
        b: &Binding<'_, T>,
        image: &Tensor<T>,
        opts: &ForwardOptions<'_>,
    ) -> Result<SaccadicForward> {
        let g = b.graph();
        let source = (image.dim(1), image.dim(2));
        let window = (self.cfg.input_side, self.cfg.input_side);

        let view = self.peripheral_view(image)?;
        let (stages, per) = self.forward_view(b, &view)?;
        let last = stages[stages.len() - 1];
        let z_per = per.logits;

        let alpha = match opts.alpha_override {
            Some(a) => g.constant(Tensor::scalar(T::fromf(a))),
            None => self.fusion.global_impact(b, &last),
        };

        // stop-gradient boundary: the map leaves the tape here
        let priority_plain: Tensor<f64> =
            Tensor::from_f64(&g.shape(per.priority), &g.value(per.priority).iter_f64().collect::<Vec<_>>())
                .expect("priority shape");
        let priority = PriorityMap::normalized(priority_plain, Resolution::FeatureGrid)?;

        let n = opts.sampler.fixations;
        if n == 0 {
            let fused = self.fusion.fuse(b, z_per, &[], alpha, g.constant(Tensor::zeros(&[0])))?;
            return Ok(SaccadicForward {
                z_per,
                z_fix: Vec::new(),
                z_fix_pooled: None,
                alpha,
                beta: None,
                fused,
                fixations: FixationSet {
                    points: Vec::new(),
                    snapshots: Vec::new(),
                    uniform_fallback: false,
                },
                priority,
                refined: None,
            });
        }

        let refined = refine_priority(&priority, source, window)?;
        let fixations = match &opts.source {
            FixationSource::Sampler => {
                if opts.trace {
                    sample_fixations_traced(&refined, &opts.sampler)?
                } else {
                    sample_fixations(&refined, &opts.sampler)?
                }
            }
            FixationSource::Random => random_fixations(&refined, &opts.sampler),
            FixationSource::Fixed(points) => FixationSet {
                points: points.to_vec(),
                snapshots: Vec::new(),
                uniform_fallback: false,
            },
        };

        let mut z_fix = Vec::with_capacity(fixations.points.len());
        for &point in &fixations.points {
            // patches re-enter the graph as constants (no gradient to the crop)
            let patch = extract_patch(image, point, window)?;
            let (_, out) = self.forward_view(b, &patch)?;
            z_fix.push(out.logits);
        }

        let beta = if opts.uniform_beta {
            g.constant(Tensor::full(
                &[z_fix.len()],
                T::fromf(1.0 / z_fix.len() as f64),
            ))
        } else {
            self.fusion
                .fixation_weights(b, &last, &fixations.points, source, window)?
        };
        let pooled = self.fusion.pool_fixations(b, &z_fix, beta)?;
        let fused = self.fusion.fuse_pooled(b, z_per, Some(pooled), alpha);

        Ok(SaccadicForward {
            z_per,
            z_fix,
            z_fix_pooled: Some(pooled),
            alpha,
            beta: Some(beta),
            fused,
            fixations,
            priority,
            refined: Some(refined),
        })
    }
}

/// Uniform-random valid window positions on the pooled grid.
fn random_fixations(refined: &PriorityMap<f64>, params: &SamplerParams) -> FixationSet {
    let (h, w) = refined.shape();
    let offset = match refined.resolution {
        Resolution::Pooled { window } => (window.0 as f64 / 2.0, window.1 as f64 / 2.0),
        _ => (0.0, 0.0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let points = (0..params.fixations)
        .map(|_| {
            let flat = rng.random_range(0..h * w);
            ((flat / w) as f64 + offset.0, (flat % w) as f64 + offset.1)
        })
        .collect();
    FixationSet {
        points,
        snapshots: Vec::new(),
        uniform_fallback: false,
    }
}
