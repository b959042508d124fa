//! Multi-granularity part-sampling attention.
//!
//! Per encoder stage: a learned spatial distribution compresses the token
//! grid into a small set of parts (soft convex combinations of tokens),
//! cross-attention between last-stage queries and the parts produces
//! per-channel attention scores, those scores yield a nonnegative spatial
//! scalar field, and the attended features are refined with the field as a
//! damped bias. The per-stage fields fuse (learned per-stage gains, then
//! normalization to unit mass) into the spatial priority map, and the refined
//! stage features pool under that map into class logits.

use rand::Rng;

use crate::backbone::{BackboneConfig, StageFeatures};
use crate::error::{Error, Result};
use crate::numerics::{linear2d, linear_vec, Real, Tensor, Var};
use crate::params::{Binding, ParamSet};

/// Fixed damping of the scalar-field bias inside feature refinement.
pub const IMPORTANCE_DAMPING: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MpsaConfig {
    /// Part count per stage; each must stay below the stage channel width.
    pub parts: Vec<usize>,
    pub num_classes: usize,
    /// Zeroes and freezes the spatial position bias (for center-biased data).
    pub disable_position_bias: bool,
}

impl MpsaConfig {
    pub fn with_default_parts(stages: usize, num_classes: usize) -> Self {
        Self {
            parts: vec![8; stages],
            num_classes,
            disable_position_bias: false,
        }
    }
}

/// Geometry of one stage as seen by the attention blocks.
#[derive(Clone, Copy, Debug)]
struct StageDims {
    spatial: (usize, usize),
    tokens: usize,
    channels: usize,
    parts: usize,
}

pub struct Mpsa {
    cfg: MpsaConfig,
    dims: Vec<StageDims>,
    last_channels: usize,
    last_spatial: (usize, usize),
}

/// Everything one forward pass of the part-sampling encoder produces.
pub struct MpsaForward {
    /// Per-stage spatial scalar fields (flattened, length `H_s*W_s`).
    pub fields: Vec<Var>,
    /// Per-stage refined token grids.
    pub refined: Vec<Var>,
    /// Fused, normalized priority map on the last-stage grid (`H_S x W_S`).
    pub priority: Var,
    /// Class logits of this view.
    pub logits: Var,
}

impl Mpsa {
    pub fn new(backbone: &BackboneConfig, cfg: MpsaConfig) -> Result<Self> {
        if cfg.parts.len() != backbone.stages() {
            return Err(Error::Config(format!(
                "part counts ({}) must match stage count ({})",
                cfg.parts.len(),
                backbone.stages()
            )));
        }
        if cfg.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut dims = Vec::with_capacity(backbone.stages());
        for s in 0..backbone.stages() {
            let spatial = backbone.stage_spatial(s);
            let channels = backbone.stage_channels[s];
            let parts = cfg.parts[s];
            if parts == 0 || parts >= channels {
                return Err(Error::Config(format!(
                    "stage {s}: part count {parts} must satisfy 0 < P < C ({channels})"
                )));
            }
            dims.push(StageDims {
                spatial,
                tokens: spatial.0 * spatial.1,
                channels,
                parts,
            });
        }
        Ok(Self {
            cfg,
            dims,
            last_channels: backbone.last_stage_channels(),
            last_spatial: backbone.last_stage_spatial(),
        })
    }

    pub fn config(&self) -> &MpsaConfig {
        &self.cfg
    }

    pub fn stages(&self) -> usize {
        self.dims.len()
    }

    pub fn last_spatial(&self) -> (usize, usize) {
        self.last_spatial
    }

    fn se_hidden(parts: usize) -> usize {
        (parts / 2).max(1)
    }

    pub fn init<T: Real, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        for (s, d) in self.dims.iter().enumerate() {
            let c = d.channels;
            let p = d.parts;
            let std_c = 1.0 / (c as f64).sqrt();
            params.insert_full(format!("psa.s{s}.compress.norm.scale"), &[c], T::one());
            params.insert_zeros(format!("psa.s{s}.compress.norm.shift"), &[c]);
            params.insert_randn(format!("psa.s{s}.compress.lin.w"), &[c, p], std_c, rng);
            params.insert_zeros(format!("psa.s{s}.compress.lin.b"), &[p]);
            // position biases start at zero: corrections, not priors
            if self.cfg.disable_position_bias {
                params.insert_frozen(
                    format!("psa.s{s}.pos_bias"),
                    Tensor::zeros(&[d.tokens, p]),
                );
            } else {
                params.insert_zeros(format!("psa.s{s}.pos_bias"), &[d.tokens, p]);
            }
            let std_q = 1.0 / (self.last_channels as f64).sqrt();
            params.insert_randn(format!("psa.s{s}.wq"), &[self.last_channels, c], std_q, rng);
            params.insert_randn(format!("psa.s{s}.wk"), &[c, c], std_c, rng);
            params.insert_randn(format!("psa.s{s}.wv"), &[c, c], std_c, rng);
            params.insert_zeros(format!("psa.s{s}.attn_bias"), &[c, d.tokens, p]);
            let hidden = Self::se_hidden(p);
            let std_p = 1.0 / (p as f64).sqrt();
            params.insert_randn(format!("psa.s{s}.se.w1"), &[hidden, p], std_p, rng);
            params.insert_zeros(format!("psa.s{s}.se.b1"), &[hidden]);
            params.insert_randn(
                format!("psa.s{s}.se.w2"),
                &[p, hidden],
                1.0 / (hidden as f64).sqrt(),
                rng,
            );
            params.insert_zeros(format!("psa.s{s}.se.b2"), &[p]);
            params.insert_randn(format!("psa.s{s}.refine.w"), &[c, c], std_c, rng);
            params.insert_zeros(format!("psa.s{s}.refine.b"), &[c]);
            params.insert_full(format!("psa.gamma{s}"), &[1], T::one());
        }
        let total: usize = self.dims.iter().map(|d| d.channels).sum();
        params.insert_randn(
            "psa.head.w",
            &[self.cfg.num_classes, total],
            1.0 / (total as f64).sqrt(),
            rng,
        );
        params.insert_zeros("psa.head.b", &[self.cfg.num_classes]);
    }

    /// Compresses a stage's token grid into `P_s` parts, each a convex
    /// combination of spatial tokens.
    pub fn part_sampling<T: Real>(&self, b: &Binding<'_, T>, stage: &StageFeatures) -> Var {
        let s = stage.stage_index;
        let g = b.graph();
        let normed = g.layer_norm(
            stage.tokens,
            b.var(&format!("psa.s{s}.compress.norm.scale")),
            b.var(&format!("psa.s{s}.compress.norm.shift")),
        );
        let lin = linear2d(
            g,
            normed,
            b.var(&format!("psa.s{s}.compress.lin.w")),
            b.var(&format!("psa.s{s}.compress.lin.b")),
        );
        let compressed = g.gelu(lin);
        let biased = g.add(compressed, b.var(&format!("psa.s{s}.pos_bias")));
        // normalize over the spatial axis so each part column is convex
        let attn = g.softmax(biased, &[0], T::one());
        g.matmul(g.transpose(attn), stage.tokens)
    }

    /// Single-head cross-attention between last-stage queries and parts.
    /// Returns the raw attention scores `C_s x H_sW_s x P_s` and the attended
    /// token grid `H_sW_s x C_s`.
    pub fn cross_attention<T: Real>(
        &self,
        b: &Binding<'_, T>,
        last_stage: &StageFeatures,
        stage_index: usize,
        parts: Var,
    ) -> (Var, Var) {
        let d = self.dims[stage_index];
        let g = b.graph();
        // queries come from the last stage, resampled onto this stage's grid
        let q_tokens = if last_stage.spatial == d.spatial {
            last_stage.tokens
        } else {
            g.resample_tokens(last_stage.tokens, last_stage.spatial, d.spatial)
        };
        let q = g.matmul(q_tokens, b.var(&format!("psa.s{stage_index}.wq")));
        let k = g.matmul(parts, b.var(&format!("psa.s{stage_index}.wk")));
        let v = g.matmul(parts, b.var(&format!("psa.s{stage_index}.wv")));
        let scores = g.batched_outer(g.transpose(q), g.transpose(k));
        let scaled = g.scale(scores, T::fromf(1.0 / (d.channels as f64).sqrt()));
        let attention = g.add(scaled, b.var(&format!("psa.s{stage_index}.attn_bias")));
        let over_parts = g.softmax(attention, &[2], T::one());
        let attended = g.transpose(g.batched_matvec(over_parts, g.transpose(v)));
        (attention, attended)
    }

    /// Squeeze-excite part importances in `[0,1]^P`.
    fn part_importance<T: Real>(&self, b: &Binding<'_, T>, stage_index: usize, parts: Var) -> Var {
        let g = b.graph();
        let gap = g.mean_rows(g.transpose(parts));
        let h = g.gelu(linear_vec(
            g,
            gap,
            b.var(&format!("psa.s{stage_index}.se.w1")),
            b.var(&format!("psa.s{stage_index}.se.b1")),
        ));
        g.sigmoid(linear_vec(
            g,
            h,
            b.var(&format!("psa.s{stage_index}.se.w2")),
            b.var(&format!("psa.s{stage_index}.se.b2")),
        ))
    }

    /// Nonnegative spatial scalar field of one stage (flattened `H_s*W_s`):
    /// spatially-normalized attention contracted with part importances,
    /// averaged over channels.
    pub fn scalar_field<T: Real>(
        &self,
        b: &Binding<'_, T>,
        stage_index: usize,
        attention: Var,
        parts: Var,
    ) -> Var {
        let g = b.graph();
        let over_space = g.softmax(attention, &[1], T::one());
        let importance = self.part_importance(b, stage_index, parts);
        let per_channel = g.batched_matvec_shared(over_space, importance);
        g.mean_rows(per_channel)
    }

    /// Refined tokens: attended features biased by the damped scalar field,
    /// then linearly projected.
    pub fn refine_features<T: Real>(
        &self,
        b: &Binding<'_, T>,
        stage_index: usize,
        attended: Var,
        field: Var,
    ) -> Var {
        let g = b.graph();
        let biased = g.add_col_broadcast_scaled(attended, field, T::fromf(IMPORTANCE_DAMPING));
        linear2d(
            g,
            biased,
            b.var(&format!("psa.s{stage_index}.refine.w")),
            b.var(&format!("psa.s{stage_index}.refine.b")),
        )
    }

    /// Fuses per-stage fields into the unit-mass priority map on the
    /// last-stage grid. Negative mass (possible once the per-stage gains go
    /// negative) is clamped to zero before normalizing; an all-zero result is
    /// a degenerate-gain error.
    pub fn fuse_scalar_fields<T: Real>(&self, b: &Binding<'_, T>, fields: &[Var]) -> Result<Var> {
        assert_eq!(fields.len(), self.dims.len(), "one field per stage");
        let g = b.graph();
        let (lh, lw) = self.last_spatial;
        let mut acc: Option<Var> = None;
        for (s, (&field, d)) in fields.iter().zip(&self.dims).enumerate() {
            let field2d = g.reshape(field, &[d.spatial.0, d.spatial.1]);
            let resized = if d.spatial == self.last_spatial {
                field2d
            } else {
                g.resize2d(field2d, lh, lw)
            };
            let scaled = g.mul_scalar(resized, b.var(&format!("psa.gamma{s}")));
            acc = Some(match acc {
                None => scaled,
                Some(a) => g.add(a, scaled),
            });
        }
        let clamped = g.relu(acc.expect("at least one stage"));
        let mass = g.sum_all(clamped);
        if g.scalar_value(mass) <= T::zero() {
            return Err(Error::DegenerateMass);
        }
        Ok(g.div_scalar(clamped, mass))
    }

    /// Pools the refined stage features under the priority map and maps the
    /// pooled vector to class logits.
    pub fn fuse_logits<T: Real>(&self, b: &Binding<'_, T>, refined: &[Var], priority: Var) -> Var {
        assert_eq!(refined.len(), self.dims.len(), "one grid per stage");
        let g = b.graph();
        let resampled: Vec<Var> = refined
            .iter()
            .zip(&self.dims)
            .map(|(&r, d)| {
                if d.spatial == self.last_spatial {
                    r
                } else {
                    g.resample_tokens(r, d.spatial, self.last_spatial)
                }
            })
            .collect();
        let concat = g.concat_cols(&resampled);
        let activated = g.gelu(concat);
        let weights = g.reshape(priority, &[self.last_spatial.0 * self.last_spatial.1]);
        let pooled = g.matvec(g.transpose(activated), weights);
        linear_vec(g, pooled, b.var("psa.head.w"), b.var("psa.head.b"))
    }

    /// Full part-sampling pass over one view's stage features.
    pub fn forward<T: Real>(
        &self,
        b: &Binding<'_, T>,
        stages: &[StageFeatures],
    ) -> Result<MpsaForward> {
        assert_eq!(stages.len(), self.dims.len(), "stage count mismatch");
        let last = &stages[self.dims.len() - 1];
        let mut fields = Vec::with_capacity(stages.len());
        let mut refined = Vec::with_capacity(stages.len());
        for stage in stages {
            let parts = self.part_sampling(b, stage);
            let (attention, attended) = self.cross_attention(b, last, stage.stage_index, parts);
            let field = self.scalar_field(b, stage.stage_index, attention, parts);
            refined.push(self.refine_features(b, stage.stage_index, attended, field));
            fields.push(field);
        }
        let priority = self.fuse_scalar_fields(b, &fields)?;
        let logits = self.fuse_logits(b, &refined, priority);
        Ok(MpsaForward {
            fields,
            refined,
            priority,
            logits,
        })
    }
}
