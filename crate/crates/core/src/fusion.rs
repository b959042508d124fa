//! Confidence-weighted fusion of peripheral and fixation predictions.
//!
//! A shallow shared head scores the peripheral last-stage features twice:
//! once globally (the impact factor alpha, gating the whole fixation branch)
//! and once per fixation under a Gaussian location mask (the Boltzmann
//! weights beta over fixations). Fixation logits are pooled under beta,
//! gated by alpha against the peripheral logits, and projected to the final
//! class scores. Training minimizes the peripheral NLL plus a
//! confidence-integrated NLL on the pooled fixation logits, where the
//! predicted distribution is mixed with the uniform one by alpha and low
//! confidence is penalized.

use rand::Rng;

use crate::backbone::{BackboneConfig, StageFeatures};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_field, linear_vec, Graph, Real, Tensor, Var};
use crate::params::{Binding, ParamSet};

/// Mixture weights and confidence penalty of the training loss.
#[derive(Clone, Debug)]
pub struct LossConfig {
    pub lambda_per: f64,
    pub lambda_fix: f64,
    /// Weight of the confidence penalty on `log(alpha)`.
    pub confidence_penalty: f64,
    pub num_classes: usize,
    pub label_smoothing: f64,
    /// Keep the penalty sign exactly as printed (`+ lambda log alpha`).
    /// Off by default: the default `- lambda log alpha` shrinks as confidence
    /// grows, matching the stated intent of rewarding confident models.
    pub printed_penalty_sign: bool,
}

impl LossConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            lambda_per: 0.5,
            lambda_fix: 0.5,
            confidence_penalty: 0.1,
            num_classes,
            label_smoothing: 0.0,
            printed_penalty_sign: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_per < 0.0 || self.lambda_fix < 0.0 || self.confidence_penalty < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Keeps `log` well-defined when f32 saturation drives a probability to 0.
const LOG_FLOOR: f64 = 1e-12;

/// Impact heads and the final projection.
pub struct Fusion {
    channels: usize,
    spatial: (usize, usize),
    num_classes: usize,
    /// Temperature of the Boltzmann distribution over fixations.
    pub boltzmann_temperature: f64,
}

impl Fusion {
    pub fn new(backbone: &BackboneConfig, num_classes: usize, boltzmann_temperature: f64) -> Result<Self> {
        if boltzmann_temperature <= 0.0 {
            return Err(Error::Config("Boltzmann temperature must be positive".into()));
        }
        Ok(Self {
            channels: backbone.last_stage_channels(),
            spatial: backbone.last_stage_spatial(),
            num_classes,
            boltzmann_temperature,
        })
    }

    fn hidden(&self) -> usize {
        (self.channels / 4).max(1)
    }

    pub fn init<T: Real, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let c = self.channels;
        let h = self.hidden();
        params.insert_randn("impact.w1", &[h, c], 1.0 / (c as f64).sqrt(), rng);
        params.insert_zeros("impact.b1", &[h]);
        params.insert_randn("impact.w2", &[1, h], 1.0 / (h as f64).sqrt(), rng);
        params.insert_zeros("impact.b2", &[1]);
        // identity projection keeps the fused logits meaningful from step one
        params.insert_eye("fusion.proj.w", self.num_classes);
        params.insert_zeros("fusion.proj.b", &[self.num_classes]);
    }

    /// The shared two-layer head with sigmoid output, mapping a pooled
    /// feature vector to a confidence score in (0, 1).
    fn impact_score<T: Real>(&self, b: &Binding<'_, T>, pooled: Var) -> Var {
        let g = b.graph();
        let h = g.gelu(linear_vec(g, pooled, b.var("impact.w1"), b.var("impact.b1")));
        g.sigmoid(linear_vec(g, h, b.var("impact.w2"), b.var("impact.b2")))
    }

    /// Global impact factor from the peripheral last-stage features.
    pub fn global_impact<T: Real>(&self, b: &Binding<'_, T>, last: &StageFeatures) -> Var {
        let g = b.graph();
        let gap = g.mean_rows(last.tokens);
        self.impact_score(b, gap)
    }

    /// Boltzmann weights over fixations: the shared head scores the
    /// peripheral features under a Gaussian mask at each fixation, and a
    /// low-temperature softmax turns the scores into weights. The mask's
    /// deviation is a quarter of the window side mapped onto the feature grid.
    pub fn fixation_weights<T: Real>(
        &self,
        b: &Binding<'_, T>,
        last: &StageFeatures,
        points: &[(f64, f64)],
        source: (usize, usize),
        window: (usize, usize),
    ) -> Result<Var> {
        if points.is_empty() {
            return Err(Error::InvalidArgument {
                op: "fixation_weights",
                detail: "no fixations to weigh".into(),
            });
        }
        let g = b.graph();
        let (fh, fw) = self.spatial;
        let scale_r = fh as f64 / source.0 as f64;
        let scale_c = fw as f64 / source.1 as f64;
        let sigma = ((window.0 as f64 * scale_r) / 4.0).max(1e-3);
        let mut scores = Vec::with_capacity(points.len());
        for &(r, c) in points {
            // continuous source coordinate -> feature-grid index space
            let center = (r * scale_r - 0.5, c * scale_c - 0.5);
            let mask = gaussian_field::<T>(center, (fh, fw), sigma, true);
            let mask = g.constant(mask.reshaped(&[fh * fw]).expect("mask shape"));
            let masked = g.mul_col_broadcast(last.tokens, mask);
            let gap = g.mean_rows(masked);
            scores.push(self.impact_score(b, gap));
        }
        let stacked = g.stack_scalars(&scores);
        Ok(g.softmax(stacked, &[0], T::fromf(self.boltzmann_temperature)))
    }

    /// Beta-weighted mean of the fixation logits, including the 1/N factor.
    pub fn pool_fixations<T: Real>(
        &self,
        b: &Binding<'_, T>,
        z_fix: &[Var],
        beta: Var,
    ) -> Result<Var> {
        let g = b.graph();
        if g.shape(beta) != [z_fix.len()] {
            return Err(Error::ShapeMismatch {
                op: "pool_fixations",
                detail: format!("{} fixation logits vs beta {:?}", z_fix.len(), g.shape(beta)),
            });
        }
        for &z in z_fix {
            if g.shape(z) != [self.num_classes] {
                return Err(Error::ShapeMismatch {
                    op: "pool_fixations",
                    detail: "logit length mismatch".into(),
                });
            }
        }
        if z_fix.is_empty() {
            return Err(Error::InvalidArgument {
                op: "pool_fixations",
                detail: "no fixation logits to pool".into(),
            });
        }
        let stacked = g.concat_cols(
            &z_fix
                .iter()
                .map(|&z| g.reshape(z, &[self.num_classes, 1]))
                .collect::<Vec<_>>(),
        );
        let weighted = g.matvec(stacked, beta);
        Ok(g.scale(weighted, T::fromf(1.0 / z_fix.len() as f64)))
    }

    /// Projects `z_per + alpha * pooled` to the final class scores.
    pub fn fuse_pooled<T: Real>(
        &self,
        b: &Binding<'_, T>,
        z_per: Var,
        pooled: Option<Var>,
        alpha: Var,
    ) -> Var {
        let g = b.graph();
        let combined = match pooled {
            Some(p) => g.add(z_per, g.mul_scalar(p, alpha)),
            None => z_per,
        };
        linear_vec(g, combined, b.var("fusion.proj.w"), b.var("fusion.proj.b"))
    }

    /// Final logits: the beta-pooled fixation logits (including the 1/N
    /// factor), gated by alpha, added to the peripheral logits and projected.
    pub fn fuse<T: Real>(
        &self,
        b: &Binding<'_, T>,
        z_per: Var,
        z_fix: &[Var],
        alpha: Var,
        beta: Var,
    ) -> Result<Var> {
        let g = b.graph();
        if g.shape(z_per) != [self.num_classes] {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                detail: format!("peripheral logits {:?}", g.shape(z_per)),
            });
        }
        let pooled = if z_fix.is_empty() {
            if g.shape(beta) != [0] {
                return Err(Error::ShapeMismatch {
                    op: "fuse",
                    detail: "beta must be empty without fixations".into(),
                });
            }
            None
        } else {
            Some(self.pool_fixations(b, z_fix, beta)?)
        };
        Ok(self.fuse_pooled(b, z_per, pooled, alpha))
    }
}

/// Smoothed one-hot target distribution.
pub fn smoothed_target<T: Real>(num_classes: usize, label: usize, smoothing: f64) -> Tensor<T> {
    let mut t = Tensor::full(&[num_classes], T::fromf(smoothing / num_classes as f64));
    let on = T::fromf(1.0 - smoothing + smoothing / num_classes as f64);
    t.set(&[label], on);
    t
}

fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::InvalidArgument {
            op: "nll",
            detail: format!("label {label} out of range for {num_classes} classes"),
        });
    }
    Ok(())
}

/// Vanilla negative log-likelihood: `-log softmax(logits)[label]`.
pub fn nll<T: Real>(g: &Graph<T>, logits: Var, label: usize, num_classes: usize) -> Result<Var> {
    nll_smoothed(g, logits, label, num_classes, 0.0)
}

pub fn nll_smoothed<T: Real>(
    g: &Graph<T>,
    logits: Var,
    label: usize,
    num_classes: usize,
    smoothing: f64,
) -> Result<Var> {
    check_label(label, num_classes)?;
    let target = smoothed_target::<T>(num_classes, label, smoothing);
    Ok(g.cross_entropy_logits(logits, &target))
}

/// Confidence-integrated NLL: the NLL of the alpha-mixture of the predicted
/// distribution with the uniform one, plus the confidence penalty on
/// `log(alpha)`.
pub fn conf_nll<T: Real>(
    g: &Graph<T>,
    logits_fix: Var,
    label: usize,
    alpha: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    check_label(label, cfg.num_classes)?;
    let k = cfg.num_classes;
    let probs = g.softmax(logits_fix, &[0], T::one());
    let scaled = g.mul_scalar(probs, alpha);
    let residual = g.scale(g.add_const(g.neg(alpha), T::one()), T::fromf(1.0 / k as f64));
    let mixture = g.add(scaled, g.broadcast_scalar(residual, k));
    let log_mix = g.log(g.add_const(mixture, T::fromf(LOG_FLOOR)));
    let target = g.constant(smoothed_target::<T>(k, label, cfg.label_smoothing));
    let mix_nll = g.neg(g.sum_all(g.mul(target, log_mix)));
    let log_alpha = g.log(g.add_const(alpha, T::fromf(LOG_FLOOR)));
    let sign = if cfg.printed_penalty_sign { 1.0 } else { -1.0 };
    let penalty = g.scale(log_alpha, T::fromf(sign * cfg.confidence_penalty));
    Ok(g.add(mix_nll, g.reshape(penalty, &[1])))
}

/// The training objective: weighted peripheral NLL plus weighted
/// confidence-integrated fixation NLL. Weight decay is the optimizer's job.
pub fn total_loss<T: Real>(
    g: &Graph<T>,
    z_per: Var,
    z_fix: Option<Var>,
    label: usize,
    alpha: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let per = nll_smoothed(g, z_per, label, cfg.num_classes, cfg.label_smoothing)?;
    let mut loss = g.scale(per, T::fromf(cfg.lambda_per));
    if let Some(zf) = z_fix {
        let fix = conf_nll(g, zf, label, alpha, cfg)?;
        loss = g.add(loss, g.scale(fix, T::fromf(cfg.lambda_fix)));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_backbone() -> BackboneConfig {
        BackboneConfig {
            input_side: 8,
            in_channels: 1,
            patch_size: 2,
            stage_channels: vec![4, 6],
        }
    }

    fn setup(seed: u64) -> (Fusion, ParamSet<f64>) {
        let f = Fusion::new(&toy_backbone(), 3, 0.1).unwrap();
        let mut params = ParamSet::new();
        f.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
        (f, params)
    }

    fn last_stage(g: &Graph<f64>, tokens: Tensor<f64>) -> StageFeatures {
        StageFeatures {
            tokens: g.constant(tokens),
            spatial: (2, 2),
            channels: 6,
            stage_index: 1,
        }
    }

    #[test]
    fn zero_head_zero_features_gives_half() {
        let (f, mut params) = setup(0);
        *params.get_mut("impact.w1") = Tensor::zeros(&[1, 6]);
        *params.get_mut("impact.w2") = Tensor::zeros(&[1, 1]);
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let alpha = f.global_impact(&b, &last_stage(&g, Tensor::zeros(&[4, 6])));
        assert_eq!(g.scalar_value(alpha), 0.5);
    }

    #[test]
    fn saturated_bias_drives_alpha_to_one() {
        let (f, mut params) = setup(0);
        *params.get_mut("impact.b2") = Tensor::scalar(10.0);
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let alpha = f.global_impact(&b, &last_stage(&g, Tensor::randn(&[4, 6], 0.1, &mut rng)));
        assert!(g.scalar_value(alpha) > 0.9999);
    }

    #[test]
    fn alpha_is_token_permutation_invariant_and_open_interval() {
        let (f, params) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tokens = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let mut permuted = Tensor::zeros(&[4, 6]);
        for (dst, src) in [(0usize, 2usize), (1, 0), (2, 3), (3, 1)] {
            for c in 0..6 {
                permuted.set(&[dst, c], tokens.at(&[src, c]));
            }
        }
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let a1 = g.scalar_value(f.global_impact(&b, &last_stage(&g, tokens)));
        let a2 = g.scalar_value(f.global_impact(&b, &last_stage(&g, permuted)));
        assert!((a1 - a2).abs() < 1e-12);
        assert!(a1 > 0.0 && a1 < 1.0);
    }

    #[test]
    fn identical_fixations_weigh_uniformly() {
        let (f, params) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let stage = last_stage(&g, Tensor::randn(&[4, 6], 1.0, &mut rng));
        let pts = vec![(12.0, 20.0); 3];
        let beta = g.value(f.fixation_weights(&b, &stage, &pts, (32, 32), (8, 8)).unwrap());
        assert!(beta.data().iter().all(|v| (*v - 1.0 / 3.0).abs() < 1e-9));

        let one = f
            .fixation_weights(&b, &stage, &pts[..1], (32, 32), (8, 8))
            .unwrap();
        assert_eq!(g.value(one).data(), &[1.0]);

        assert!(f
            .fixation_weights(&b, &stage, &[], (32, 32), (8, 8))
            .is_err());
    }

    #[test]
    fn hot_region_fixation_dominates_beta() {
        let f = Fusion::new(&toy_backbone(), 3, 0.05).unwrap();
        let mut params = ParamSet::new();
        f.init(&mut params, &mut ChaCha8Rng::seed_from_u64(6));
        // head that sums its input: score(hot) saturates, score(zero) = 0.5
        *params.get_mut("impact.w1") = Tensor::full(&[1, 6], 1.0);
        *params.get_mut("impact.w2") = Tensor::full(&[1, 1], 20.0);
        let mut tokens = Tensor::zeros(&[4, 6]);
        for c in 0..6 {
            tokens.set(&[0, c], 4.0); // token 0 = feature cell (0, 0)
        }
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let stage = last_stage(&g, tokens);
        // source 32 over a 2x2 grid: (8,8) is the center of cell (0,0) and
        // (24,24) the center of cell (1,1)
        let pts = vec![(8.0, 8.0), (24.0, 24.0)];
        let beta = g.value(f.fixation_weights(&b, &stage, &pts, (32, 32), (8, 8)).unwrap());
        assert!(beta.at(&[0]) > 0.99, "beta = {beta:?}");
    }

    #[test]
    fn beta_is_a_probability_vector() {
        let (f, params) = setup(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in 1..=5 {
            let g = Graph::new();
            let b = Binding::new(&g, &params);
            let stage = last_stage(&g, Tensor::randn(&[4, 6], 1.0, &mut rng));
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    (
                        4.0 + 24.0 * rng.random::<f64>(),
                        4.0 + 24.0 * rng.random::<f64>(),
                    )
                })
                .collect();
            let beta = g.value(f.fixation_weights(&b, &stage, &pts, (32, 32), (8, 8)).unwrap());
            assert!((beta.sum_f64() - 1.0).abs() < 1e-6);
            assert!(beta.data().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn fuse_reference_points() {
        let (f, params) = setup(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let zp = Tensor::randn(&[3], 1.0, &mut rng);
        let z1 = Tensor::randn(&[3], 1.0, &mut rng);
        let z2 = Tensor::randn(&[3], 1.0, &mut rng);

        // alpha = 0: fused logits ignore fixations entirely (identity proj)
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let fused = f
            .fuse(
                &b,
                g.constant(zp.clone()),
                &[g.constant(z1.clone()), g.constant(z2.clone())],
                g.constant(Tensor::scalar(0.0)),
                g.constant(Tensor::from_f64(&[2], &[0.3, 0.7]).unwrap()),
            )
            .unwrap();
        assert_eq!(g.value(fused), zp);

        // beta = [1, 0], z_per = 0, alpha = 1: the 1/N factor halves z1
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let fused = f
            .fuse(
                &b,
                g.constant(Tensor::zeros(&[3])),
                &[g.constant(z1.clone()), g.constant(z2.clone())],
                g.constant(Tensor::scalar(1.0)),
                g.constant(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap()),
            )
            .unwrap();
        let fused = g.value(fused);
        for c in 0..3 {
            assert!((fused.at(&[c]) - z1.at(&[c]) / 2.0).abs() < 1e-12);
        }

        // single fixation, beta = [1], alpha = 1, zero peripheral: identity
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let fused = f
            .fuse(
                &b,
                g.constant(Tensor::zeros(&[3])),
                &[g.constant(z1.clone())],
                g.constant(Tensor::scalar(1.0)),
                g.constant(Tensor::from_f64(&[1], &[1.0]).unwrap()),
            )
            .unwrap();
        assert_eq!(g.value(fused), z1);

        // length mismatch errors
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        assert!(f
            .fuse(
                &b,
                g.constant(Tensor::zeros(&[3])),
                &[g.constant(z1.clone())],
                g.constant(Tensor::scalar(1.0)),
                g.constant(Tensor::from_f64(&[2], &[0.5, 0.5]).unwrap()),
            )
            .is_err());
    }

    #[test]
    fn nll_reference_points() {
        let g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros(&[4]));
        let loss = nll(&g, uniform, 2, 4).unwrap();
        assert!((g.scalar_value(loss) - 4.0f64.ln()).abs() < 1e-12);

        let two = g.constant(Tensor::zeros(&[2]));
        let loss = nll(&g, two, 0, 2).unwrap();
        assert!((g.scalar_value(loss) - 2.0f64.ln()).abs() < 1e-12);

        let mut sat = Tensor::<f64>::zeros(&[3]);
        sat.set(&[1], 1e4);
        let sat = g.constant(sat);
        let loss = nll(&g, sat, 1, 3).unwrap();
        assert!(g.scalar_value(loss).abs() < 1e-9);

        assert!(nll(&g, uniform, 4, 4).is_err());
    }

    #[test]
    fn conf_nll_reference_points() {
        let cfg = LossConfig::new(2);
        // alpha = 0.5, uniform logits, K = 2
        let g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[2]));
        let alpha = g.constant(Tensor::scalar(0.5));
        let loss = conf_nll(&g, logits, 0, alpha, &cfg).unwrap();
        let expect = 2.0f64.ln() + 0.1 * 2.0f64.ln();
        assert!((g.scalar_value(loss) - expect).abs() < 1e-6);

        // alpha -> 1 reduces to the plain NLL with no penalty
        let g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(&[2], &[1.0, -0.5]).unwrap());
        let alpha = g.constant(Tensor::scalar(1.0 - 1e-9));
        let loss = conf_nll(&g, z, 0, alpha, &cfg).unwrap();
        let plain = nll(&g, z, 0, 2).unwrap();
        assert!((g.scalar_value(loss) - g.scalar_value(plain)).abs() < 1e-6);

        // alpha -> 0+: mixture term approaches ln K, penalty blows up
        let g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(&[2], &[3.0, -1.0]).unwrap());
        let alpha = g.constant(Tensor::scalar(1e-6));
        let loss = conf_nll(&g, z, 0, alpha, &cfg).unwrap();
        let penalty = -0.1 * (1e-6f64 + 1e-12).ln();
        assert!((g.scalar_value(loss) - (2.0f64.ln() * (1.0 - 1e-6 * 0.95257) + penalty)).abs() < 1e-2);
        assert!(g.scalar_value(loss) > 1.3);

        // printed sign flips the penalty
        let mut printed = LossConfig::new(2);
        printed.printed_penalty_sign = true;
        let g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[2]));
        let alpha = g.constant(Tensor::scalar(0.5));
        let loss = conf_nll(&g, logits, 0, alpha, &printed).unwrap();
        let expect = 2.0f64.ln() - 0.1 * 2.0f64.ln();
        assert!((g.scalar_value(loss) - expect).abs() < 1e-6);
    }

    #[test]
    fn conf_nll_decreases_with_confidence_when_prediction_is_good() {
        let cfg = LossConfig::new(4);
        let mut prev = f64::INFINITY;
        for step in 1..20 {
            let a = step as f64 / 20.0;
            let g = Graph::<f64>::new();
            let mut t = Tensor::<f64>::zeros(&[4]);
            t.set(&[1], 2.0); // true-class probability above 1/K
            let logits = g.constant(t);
            let alpha = g.constant(Tensor::scalar(a));
            let loss = g.scalar_value(conf_nll(&g, logits, 1, alpha, &cfg).unwrap());
            assert!(loss < prev, "not monotone at alpha = {a}");
            prev = loss;
        }
    }

    #[test]
    fn total_loss_composes_weighted_terms() {
        let mut cfg = LossConfig::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zp = Tensor::randn(&[3], 1.0, &mut rng);
        let zf = Tensor::randn(&[3], 1.0, &mut rng);

        // lambda_fix = 0 -> pure peripheral NLL
        cfg.lambda_per = 1.0;
        cfg.lambda_fix = 0.0;
        let g = Graph::<f64>::new();
        let (vp, vf) = (g.constant(zp.clone()), g.constant(zf.clone()));
        let alpha = g.constant(Tensor::scalar(0.7));
        let total = total_loss(&g, vp, Some(vf), 1, alpha, &cfg).unwrap();
        let plain = nll(&g, vp, 1, 3).unwrap();
        assert!((g.scalar_value(total) - g.scalar_value(plain)).abs() < 1e-9);

        // default weights combine both terms
        cfg.lambda_per = 0.5;
        cfg.lambda_fix = 0.5;
        let g = Graph::<f64>::new();
        let (vp, vf) = (g.constant(zp.clone()), g.constant(zf.clone()));
        let alpha = g.constant(Tensor::scalar(0.7));
        let total = g.scalar_value(total_loss(&g, vp, Some(vf), 1, alpha, &cfg).unwrap());
        let per = g.scalar_value(nll(&g, vp, 1, 3).unwrap());
        let fix = g.scalar_value(conf_nll(&g, vf, 1, alpha, &cfg).unwrap());
        assert!((total - 0.5 * per - 0.5 * fix).abs() < 1e-9);
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let (f, params) = setup(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tokens = Tensor::randn(&[4, 6], 0.8, &mut rng);
        let zp = Tensor::randn(&[3], 0.8, &mut rng);
        let z1 = Tensor::randn(&[3], 0.8, &mut rng);
        let z2 = Tensor::randn(&[3], 0.8, &mut rng);
        let cfg = LossConfig::new(3);
        let pts = vec![(10.0, 12.0), (22.0, 18.0)];

        let names: Vec<String> = params.names().map(String::from).collect();
        for name in names {
            let err = finite_difference_check(
                |g, x| {
                    let b = Binding::new(g, &params);
                    b.set_var(&name, x);
                    let stage = last_stage(g, tokens.clone());
                    let alpha = f.global_impact(&b, &stage);
                    let beta = f
                        .fixation_weights(&b, &stage, &pts, (32, 32), (8, 8))
                        .unwrap();
                    let fused = f
                        .fuse(
                            &b,
                            g.constant(zp.clone()),
                            &[g.constant(z1.clone()), g.constant(z2.clone())],
                            alpha,
                            beta,
                        )
                        .unwrap();
                    let pick = total_loss(g, fused, Some(fused), 1, alpha, &cfg).unwrap();
                    pick
                },
                params.get(&name),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-3, "{name}: err = {err}");
        }
    }
}
