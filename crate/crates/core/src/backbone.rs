//! The weight-shared multi-stage encoder.
//!
//! A deliberately small reference encoder: a patchify stem followed by
//! per-stage downsampling blocks of layer_norm -> linear -> gelu, halving the
//! spatial extent at each stage. It stands in for the large pretrained
//! backbones the architecture is otherwise agnostic to; anything that maps a
//! fixed-size view to a stack of `HW x C` token grids can be swapped in
//! behind [`Backbone::encode`].
//!
//! The same parameter set serves every call, so peripheral and fixation views
//! are encoded by the identical weights.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{linear2d, Real, Tensor, Var};
use crate::params::{Binding, ParamSet};

/// Per-stage token grid produced by the encoder.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    /// `H_s*W_s x C_s` token matrix in the current graph.
    pub tokens: Var,
    pub spatial: (usize, usize),
    pub channels: usize,
    pub stage_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Side length of every input view (peripheral and fixation).
    pub input_side: usize,
    pub in_channels: usize,
    /// Patchify factor of the stem; stage 0 sits at `input_side / patch_size`.
    pub patch_size: usize,
    /// Channel width per stage; the length sets the stage count S.
    pub stage_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_side: 224,
            in_channels: 3,
            patch_size: 4,
            stage_channels: vec![32, 64, 128, 256],
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial extent of stage `s`: the stem grid halved (floor) per stage.
    pub fn stage_spatial(&self, s: usize) -> (usize, usize) {
        let mut side = self.input_side / self.patch_size;
        for _ in 0..s {
            side /= 2;
        }
        (side, side)
    }

    pub fn last_stage_spatial(&self) -> (usize, usize) {
        self.stage_spatial(self.stages() - 1)
    }

    pub fn last_stage_channels(&self) -> usize {
        *self.stage_channels.last().expect("at least one stage")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.patch_size == 0 || self.input_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide input side {}",
                self.patch_size, self.input_side
            )));
        }
        let (last, _) = self.stage_spatial(self.stages() - 1);
        if last == 0 {
            return Err(Error::Config(format!(
                "input side {} too small for {} stages at patch {}",
                self.input_side,
                self.stages(),
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Reference encoder with cached layout permutations.
pub struct Backbone {
    cfg: BackboneConfig,
    /// Index map per stage: stage 0 patchifies the image, later stages merge
    /// 2x2 token neighborhoods.
    layouts: Vec<Arc<Vec<usize>>>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layouts = Vec::with_capacity(cfg.stages());
        layouts.push(Arc::new(patchify_indices(
            cfg.in_channels,
            cfg.input_side,
            cfg.patch_size,
        )));
        for s in 1..cfg.stages() {
            let (h, w) = cfg.stage_spatial(s - 1);
            layouts.push(Arc::new(merge_indices(h, w, cfg.stage_channels[s - 1])));
        }
        Ok(Self { cfg, layouts })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Input width of the stage-`s` linear block.
    fn stage_in_dim(&self, s: usize) -> usize {
        if s == 0 {
            self.cfg.in_channels * self.cfg.patch_size * self.cfg.patch_size
        } else {
            4 * self.cfg.stage_channels[s - 1]
        }
    }

    /// Registers all encoder weights, drawn from the given seeded generator.
    pub fn init<T: Real, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        for s in 0..self.cfg.stages() {
            let d_in = self.stage_in_dim(s);
            let d_out = self.cfg.stage_channels[s];
            let std = 1.0 / (d_in as f64).sqrt();
            params.insert_full(format!("backbone.stage{s}.norm.scale"), &[d_in], T::one());
            params.insert_zeros(format!("backbone.stage{s}.norm.shift"), &[d_in]);
            params.insert_randn(format!("backbone.stage{s}.lin.w"), &[d_in, d_out], std, rng);
            params.insert_zeros(format!("backbone.stage{s}.lin.b"), &[d_out]);
        }
    }

    /// Total scalar parameter count of the encoder.
    pub fn param_count(&self) -> usize {
        (0..self.cfg.stages())
            .map(|s| {
                let d_in = self.stage_in_dim(s);
                let d_out = self.cfg.stage_channels[s];
                2 * d_in + d_in * d_out + d_out
            })
            .sum()
    }

    /// Encodes a `C x side x side` view into one token grid per stage.
    pub fn encode<T: Real>(
        &self,
        binding: &Binding<'_, T>,
        view: &Tensor<T>,
    ) -> Result<Vec<StageFeatures>> {
        let want = [self.cfg.in_channels, self.cfg.input_side, self.cfg.input_side];
        if view.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "Backbone::encode",
                detail: format!("expected view {:?}, got {:?}", want, view.shape()),
            });
        }
        let g = binding.graph();
        let mut current = g.constant(view.clone());
        let mut stages = Vec::with_capacity(self.cfg.stages());
        for s in 0..self.cfg.stages() {
            let (h, w) = self.cfg.stage_spatial(s);
            let d_in = self.stage_in_dim(s);
            let merged = g.permute_flat(current, Arc::clone(&self.layouts[s]), &[h * w, d_in]);
            let normed = g.layer_norm(
                merged,
                binding.var(&format!("backbone.stage{s}.norm.scale")),
                binding.var(&format!("backbone.stage{s}.norm.shift")),
            );
            let lin = linear2d(
                g,
                normed,
                binding.var(&format!("backbone.stage{s}.lin.w")),
                binding.var(&format!("backbone.stage{s}.lin.b")),
            );
            let tokens = g.gelu(lin);
            stages.push(StageFeatures {
                tokens,
                spatial: (h, w),
                channels: self.cfg.stage_channels[s],
                stage_index: s,
            });
            current = tokens;
        }
        Ok(stages)
    }
}

/// Flat gather indices turning a `C x side x side` image into
/// `(side/p)^2` tokens of width `C*p*p`.
fn patchify_indices(channels: usize, side: usize, p: usize) -> Vec<usize> {
    let grid = side / p;
    let mut idx = Vec::with_capacity(grid * grid * channels * p * p);
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..channels {
                for py in 0..p {
                    for px in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        idx.push(c * side * side + y * side + x);
                    }
                }
            }
        }
    }
    idx
}

/// Flat gather indices merging 2x2 token neighborhoods of an `h x w x C`
/// token grid into `(h/2)*(w/2)` tokens of width `4C`.
fn merge_indices(h: usize, w: usize, channels: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(oh * ow * 4 * channels);
    for gy in 0..oh {
        for gx in 0..ow {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let token = (2 * gy + dy) * w + (2 * gx + dx);
                for c in 0..channels {
                    idx.push(token * channels + c);
                }
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> BackboneConfig {
        BackboneConfig {
            input_side: 8,
            in_channels: 1,
            patch_size: 2,
            stage_channels: vec![4, 6],
        }
    }

    #[test]
    fn default_config_matches_reference_geometry() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.stages(), 4);
        assert_eq!(cfg.stage_spatial(0), (56, 56));
        assert_eq!(cfg.stage_spatial(1), (28, 28));
        assert_eq!(cfg.stage_spatial(2), (14, 14));
        assert_eq!(cfg.stage_spatial(3), (7, 7));
    }

    #[test]
    fn final_stage_width_follows_channels() {
        let cfg = BackboneConfig {
            stage_channels: vec![32, 64, 128, 256],
            ..BackboneConfig::default()
        };
        assert_eq!(cfg.last_stage_channels(), 256);
    }

    #[test]
    fn seeded_init_is_bit_identical() {
        let bb = Backbone::new(toy_config()).unwrap();
        let mut p1 = ParamSet::<f32>::new();
        let mut p2 = ParamSet::<f32>::new();
        bb.init(&mut p1, &mut ChaCha8Rng::seed_from_u64(0));
        bb.init(&mut p2, &mut ChaCha8Rng::seed_from_u64(0));
        for (name, e) in p1.iter() {
            assert_eq!(e.tensor, *p2.get(name), "{name} differs");
        }
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let bb = Backbone::new(toy_config()).unwrap();
        let mut params = ParamSet::<f64>::new();
        bb.init(&mut params, &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::randn(&[1, 8, 8], 0.5, &mut rng);

        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let s1 = bb.encode(&b, &img).unwrap();
        let s2 = bb.encode(&b, &img).unwrap();
        assert_eq!(s1.len(), 2);
        assert_eq!(s1[0].spatial, (4, 4));
        assert_eq!(s1[1].spatial, (2, 2));
        assert_eq!(g.shape(s1[0].tokens), vec![16, 4]);
        assert_eq!(g.shape(s1[1].tokens), vec![4, 6]);
        assert_eq!(g.value(s1[0].tokens), g.value(s2[0].tokens));
        assert_eq!(g.value(s1[1].tokens), g.value(s2[1].tokens));
    }

    #[test]
    fn weight_sharing_is_by_identity() {
        let bb = Backbone::new(toy_config()).unwrap();
        let mut params = ParamSet::<f64>::new();
        bb.init(&mut params, &mut ChaCha8Rng::seed_from_u64(1));
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let img = Tensor::zeros(&[1, 8, 8]);
        let _ = bb.encode(&b, &img).unwrap();
        let before = b.var("backbone.stage0.lin.w");
        let _ = bb.encode(&b, &img).unwrap();
        let after = b.var("backbone.stage0.lin.w");
        assert_eq!(before, after, "both passes must read the same weight leaf");
    }

    #[test]
    fn zeroed_final_projection_zeroes_final_stage() {
        let bb = Backbone::new(toy_config()).unwrap();
        let mut params = ParamSet::<f64>::new();
        bb.init(&mut params, &mut ChaCha8Rng::seed_from_u64(1));
        *params.get_mut("backbone.stage1.lin.w") = Tensor::zeros(&[16, 6]);
        *params.get_mut("backbone.stage1.lin.b") = Tensor::zeros(&[6]);
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let img = Tensor::zeros(&[1, 8, 8]);
        let stages = bb.encode(&b, &img).unwrap();
        let last = g.value(stages[1].tokens);
        assert!(last.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_rejects_wrong_geometry() {
        let bb = Backbone::new(toy_config()).unwrap();
        let mut params = ParamSet::<f64>::new();
        bb.init(&mut params, &mut ChaCha8Rng::seed_from_u64(1));
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let img = Tensor::zeros(&[1, 6, 8]);
        assert!(bb.encode(&b, &img).is_err());
    }

    #[test]
    fn default_reference_backbone_stays_small() {
        let bb = Backbone::new(BackboneConfig::default()).unwrap();
        assert!(bb.param_count() <= 2_000_000, "{}", bb.param_count());
    }

    #[test]
    fn encoder_gradients_reach_all_weights() {
        let bb = Backbone::new(toy_config()).unwrap();
        let mut params = ParamSet::<f64>::new();
        bb.init(&mut params, &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::randn(&[1, 8, 8], 0.5, &mut rng);
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let stages = bb.encode(&b, &img).unwrap();
        let sq = g.mul(stages[1].tokens, stages[1].tokens);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        let by_name = b.collect_grads(&grads);
        for name in params.names() {
            let gnorm: f64 = by_name[name].iter_f64().map(|v| v * v).sum();
            assert!(gnorm > 0.0, "no gradient reached {name}");
        }
    }
}
