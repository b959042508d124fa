//! Fixation sampling from the priority map.
//!
//! The fused feature-grid priority map is upsampled to source resolution,
//! constrained to valid window centers by stride-1 average pooling, and
//! treated as a spatial probability distribution. Fixation points are drawn
//! sequentially at low temperature; after each draw a Gaussian penalty kernel
//! down-weights the surrounding area so later draws avoid redundant
//! locations. Gradients never flow through sampling or patch extraction; this
//! whole module operates on plain tensors outside any graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{avg_pool_stride1, bilinear_resize, gaussian_field, Real, Tensor};

/// Grid a [`PriorityMap`] lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    /// Last-stage feature grid (`H_S x W_S`).
    FeatureGrid,
    /// Source-image pixel grid.
    SourceGrid,
    /// Pooled over fixation windows: cell (i, j) scores the window whose
    /// top-left corner is (i, j); its center is (i, j) + window/2.
    Pooled { window: (usize, usize) },
}

/// Nonnegative 2-D field of unit mass.
#[derive(Clone, Debug)]
pub struct PriorityMap<T: Real> {
    pub field: Tensor<T>,
    pub resolution: Resolution,
}

impl<T: Real> PriorityMap<T> {
    pub fn new(field: Tensor<T>, resolution: Resolution) -> Result<Self> {
        if field.rank() != 2 || field.is_empty() {
            return Err(Error::InvalidArgument {
                op: "PriorityMap::new",
                detail: format!("expected non-empty 2-D field, got {:?}", field.shape()),
            });
        }
        if field.data().iter().any(|v| *v < T::zero()) {
            return Err(Error::InvalidArgument {
                op: "PriorityMap::new",
                detail: "negative priority value".into(),
            });
        }
        let mass = field.sum_f64();
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument {
                op: "PriorityMap::new",
                detail: format!("mass {mass} is not 1 within 1e-6"),
            });
        }
        Ok(Self { field, resolution })
    }

    /// Builds a map from a raw nonnegative field by normalizing its mass.
    pub fn normalized(field: Tensor<T>, resolution: Resolution) -> Result<Self> {
        let mass = field.sum_f64();
        if mass <= 0.0 || !mass.is_finite() {
            return Err(Error::DegenerateMass);
        }
        let inv = T::fromf(1.0 / mass);
        Self::new(field.map(|v| v * inv), resolution)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.field.dim(0), self.field.dim(1))
    }
}

/// Sampler configuration. Sigma is measured in pooled-grid cells, which are
/// spaced one source pixel apart; callers working at a different source scale
/// rescale it proportionally before constructing the params.
#[derive(Clone, Debug)]
pub struct SamplerParams {
    pub temperature: f64,
    pub nms_sigma: f64,
    /// Suppression strength in [0, 1); zero disables suppression.
    pub nms_strength: f64,
    /// `false` keeps the plain-distance penalty kernel `exp(-d/(2s^2))`;
    /// `true` selects the conventional squared-distance Gaussian.
    pub squared_kernel: bool,
    pub fixations: usize,
    pub seed: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            nms_sigma: 50.0,
            nms_strength: 0.95,
            squared_kernel: false,
            fixations: 4,
            seed: 0,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "SamplerParams",
                detail: format!("temperature must be positive, got {}", self.temperature),
            });
        }
        if self.nms_sigma <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "SamplerParams",
                detail: format!("nms_sigma must be positive, got {}", self.nms_sigma),
            });
        }
        if !(0.0..1.0).contains(&self.nms_strength) {
            return Err(Error::InvalidArgument {
                op: "SamplerParams",
                detail: format!("nms_strength must lie in [0, 1), got {}", self.nms_strength),
            });
        }
        Ok(())
    }
}

/// Ordered fixation points in continuous source coordinates.
#[derive(Clone, Debug)]
pub struct FixationSet {
    pub points: Vec<(f64, f64)>,
    /// Priority snapshots: the initial map plus one after each draw
    /// (`N + 1` entries). Empty unless tracing was requested.
    pub snapshots: Vec<Tensor<f64>>,
    /// Set when the map ran out of mass and a draw fell back to uniform.
    pub uniform_fallback: bool,
}

/// Constrains a feature-grid priority map to valid window placements:
/// bilinear upsampling to source resolution, stride-1 average pooling with
/// the window as kernel, then renormalization to unit mass.
pub fn refine_priority<T: Real>(
    map: &PriorityMap<T>,
    source: (usize, usize),
    window: (usize, usize),
) -> Result<PriorityMap<T>> {
    if window.0 == 0 || window.1 == 0 || window.0 > source.0 || window.1 > source.1 {
        return Err(Error::InvalidArgument {
            op: "refine_priority",
            detail: format!("window {window:?} does not fit source {source:?}"),
        });
    }
    let upsampled = bilinear_resize(&map.field, source.0, source.1)?;
    let pooled = avg_pool_stride1(&upsampled, window.0, window.1)?;
    PriorityMap::normalized(pooled, Resolution::Pooled { window })
}

/// The categorical distribution the sampler draws from: the unit-mass map
/// sharpened by the temperature, i.e. a softmax over the map's
/// log-probabilities scaled by `1/t`. Returns `None` when the map carries no
/// mass at all.
pub fn sampling_distribution(field: &[f64], temperature: f64) -> Option<Vec<f64>> {
    let max = field.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 || !max.is_finite() {
        return None;
    }
    // sharpened weight (v/max)^(1/t); integer exponents take the cheap path
    let inv_t = 1.0 / temperature;
    let int_exp = inv_t.round();
    let use_powi = (inv_t - int_exp).abs() < 1e-12 && int_exp.abs() <= 128.0;
    let sharpen = |v: f64| -> f64 {
        let x = v / max;
        if use_powi {
            x.powi(int_exp as i32)
        } else {
            x.powf(inv_t)
        }
    };
    let mut weights: Vec<f64> = field
        .iter()
        .map(|&v| if v > 0.0 { sharpen(v) } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    for w in &mut weights {
        *w /= total;
    }
    Some(weights)
}

/// Draws `N` fixation points sequentially with Gaussian-penalty NMS.
pub fn sample_fixations<T: Real>(map: &PriorityMap<T>, params: &SamplerParams) -> Result<FixationSet> {
    sample_impl(map, params, false)
}

/// Like [`sample_fixations`] but records the priority progression
/// (initial map plus the map after every draw).
pub fn sample_fixations_traced<T: Real>(
    map: &PriorityMap<T>,
    params: &SamplerParams,
) -> Result<FixationSet> {
    sample_impl(map, params, true)
}

fn sample_impl<T: Real>(
    map: &PriorityMap<T>,
    params: &SamplerParams,
    trace: bool,
) -> Result<FixationSet> {
    params.validate()?;
    let (h, w) = map.shape();
    let offset = match map.resolution {
        Resolution::Pooled { window } => (window.0 as f64 / 2.0, window.1 as f64 / 2.0),
        _ => {
            return Err(Error::InvalidArgument {
                op: "sample_fixations",
                detail: "sampling requires a pooled-grid priority map".into(),
            })
        }
    };
    let mut working: Vec<f64> = map.field.iter_f64().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut points = Vec::with_capacity(params.fixations);
    let mut snapshots = Vec::new();
    let mut uniform_fallback = false;
    if trace {
        snapshots.push(snapshot(&working, h, w));
    }
    for _ in 0..params.fixations {
        let flat = match sampling_distribution(&working, params.temperature) {
            Some(probs) => draw_categorical(&probs, &mut rng),
            None => {
                uniform_fallback = true;
                rng.random_range(0..h * w)
            }
        };
        let row = flat / w;
        let col = flat % w;
        if params.nms_strength > 0.0 {
            let kernel = gaussian_field::<f64>(
                (row as f64, col as f64),
                (h, w),
                params.nms_sigma,
                params.squared_kernel,
            );
            for (v, k) in working.iter_mut().zip(kernel.data()) {
                *v *= 1.0 - params.nms_strength * k;
            }
        }
        if trace {
            snapshots.push(snapshot(&working, h, w));
        }
        points.push((row as f64 + offset.0, col as f64 + offset.1));
    }
    Ok(FixationSet {
        points,
        snapshots,
        uniform_fallback,
    })
}

fn snapshot(working: &[f64], h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(vec![h, w], working.to_vec()).expect("snapshot shape")
}

fn draw_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Crops an axis-aligned `window` centered at `center` (continuous source
/// coordinates) out of a `C x H x W` image by bilinear sampling. Equivalent
/// to an affine grid transform with scale `window/source` and the center as
/// translation. Integer-aligned centers degrade to exact slicing.
pub fn extract_patch<T: Real>(
    image: &Tensor<T>,
    center: (f64, f64),
    window: (usize, usize),
) -> Result<Tensor<T>> {
    extract_patch_scaled(image, center, window, 1.0)
}

/// [`extract_patch`] with the sampled source extent multiplied by
/// `context_scale` (>= 1 zooms out, gathering context and resampling it down
/// to the window size). The default pipeline uses scale 1.
pub fn extract_patch_scaled<T: Real>(
    image: &Tensor<T>,
    center: (f64, f64),
    window: (usize, usize),
    context_scale: f64,
) -> Result<Tensor<T>> {
    if image.rank() != 3 {
        return Err(Error::InvalidArgument {
            op: "extract_patch",
            detail: format!("expected C x H x W image, got {:?}", image.shape()),
        });
    }
    if window.0 == 0 || window.1 == 0 || context_scale <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "extract_patch",
            detail: "window extents and context scale must be positive".into(),
        });
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let span_h = window.0 as f64 * context_scale;
    let span_w = window.1 as f64 * context_scale;
    let eps = 1e-9;
    let inside = center.0 >= span_h / 2.0 - eps
        && center.0 <= h as f64 - span_h / 2.0 + eps
        && center.1 >= span_w / 2.0 - eps
        && center.1 <= w as f64 - span_w / 2.0 + eps;
    if !inside {
        return Err(Error::WindowOutOfBounds {
            row: center.0,
            col: center.1,
            win_h: window.0,
            win_w: window.1,
            src_h: h,
            src_w: w,
        });
    }
    let step_h = span_h / window.0 as f64;
    let step_w = span_w / window.1 as f64;
    let mut out = Tensor::zeros(&[c, window.0, window.1]);
    for ky in 0..window.0 {
        // sample at output pixel centers; u is in source index space
        let u = (center.0 - span_h / 2.0 + (ky as f64 + 0.5) * step_h - 0.5)
            .clamp(0.0, (h - 1) as f64);
        let y0 = u.floor() as usize;
        let fy = u - y0 as f64;
        let y1 = (y0 + 1).min(h - 1);
        for kx in 0..window.1 {
            let v = (center.1 - span_w / 2.0 + (kx as f64 + 0.5) * step_w - 0.5)
                .clamp(0.0, (w - 1) as f64);
            let x0 = v.floor() as usize;
            let fx = v - x0 as f64;
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let value = if fy == 0.0 && fx == 0.0 {
                    image.at(&[ch, y0, x0])
                } else {
                    let p00 = image.at(&[ch, y0, x0]).tof();
                    let p01 = image.at(&[ch, y0, x1]).tof();
                    let p10 = image.at(&[ch, y1, x0]).tof();
                    let p11 = image.at(&[ch, y1, x1]).tof();
                    T::fromf(
                        p00 * (1.0 - fy) * (1.0 - fx)
                            + p01 * (1.0 - fy) * fx
                            + p10 * fy * (1.0 - fx)
                            + p11 * fy * fx,
                    )
                };
                out.set(&[ch, ky, kx], value);
            }
        }
    }
    Ok(out)
}

/// Per-step progression maps normalized for image export (max maps to 1).
pub fn render_priority_progression(snapshots: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    snapshots
        .iter()
        .map(|s| {
            let max = s.max_value();
            if max > 0.0 {
                s.map(|v| v / max)
            } else {
                s.clone()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pooled_map(field: Tensor<f64>, window: (usize, usize)) -> PriorityMap<f64> {
        PriorityMap::normalized(field, Resolution::Pooled { window }).unwrap()
    }

    fn params(n: usize, seed: u64) -> SamplerParams {
        SamplerParams {
            fixations: n,
            seed,
            ..SamplerParams::default()
        }
    }

    #[test]
    fn priority_map_validates_mass_and_sign() {
        let good = Tensor::<f64>::full(&[2, 2], 0.25);
        assert!(PriorityMap::new(good, Resolution::FeatureGrid).is_ok());
        let bad_mass = Tensor::<f64>::full(&[2, 2], 0.3);
        assert!(PriorityMap::new(bad_mass, Resolution::FeatureGrid).is_err());
        let negative = Tensor::<f64>::from_f64(&[1, 2], &[1.5, -0.5]).unwrap();
        assert!(PriorityMap::new(negative, Resolution::FeatureGrid).is_err());
    }

    #[test]
    fn refine_uniform_stays_uniform() {
        let map = PriorityMap::new(Tensor::<f64>::full(&[4, 4], 1.0 / 16.0), Resolution::FeatureGrid)
            .unwrap();
        let refined = refine_priority(&map, (32, 32), (8, 8)).unwrap();
        assert_eq!(refined.shape(), (25, 25));
        let expect = 1.0 / (25.0 * 25.0);
        assert!(refined.field.data().iter().all(|v| (*v - expect).abs() < 1e-9));
        assert!((refined.field.sum_f64() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn refine_unit_window_is_upsample_renormalized() {
        let mut field = Tensor::<f64>::zeros(&[2, 2]);
        field.set(&[0, 0], 0.7);
        field.set(&[1, 1], 0.3);
        let map = PriorityMap::new(field, Resolution::FeatureGrid).unwrap();
        let refined = refine_priority(&map, (8, 8), (1, 1)).unwrap();
        assert_eq!(refined.shape(), (8, 8));
        let upsampled = bilinear_resize(&map.field, 8, 8).unwrap();
        let mass = upsampled.sum_f64();
        for i in 0..64 {
            assert!((refined.field.data()[i] - upsampled.data()[i] / mass).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_corner_mass_peaks_at_nearest_window() {
        let mut field = Tensor::<f64>::zeros(&[4, 4]);
        field.set(&[0, 0], 1.0);
        let map = PriorityMap::new(field, Resolution::FeatureGrid).unwrap();
        let refined = refine_priority(&map, (16, 16), (8, 8)).unwrap();
        let (h, w) = refined.shape();
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for r in 0..h {
            for c in 0..w {
                let v = refined.field.at(&[r, c]);
                if v > best_v {
                    best_v = v;
                    best = (r, c);
                }
            }
        }
        assert_eq!(best, (0, 0), "peak must sit at the nearest valid window");
    }

    #[test]
    fn refine_rejects_oversized_window() {
        let map = PriorityMap::new(Tensor::<f64>::full(&[2, 2], 0.25), Resolution::FeatureGrid)
            .unwrap();
        assert!(refine_priority(&map, (8, 8), (9, 8)).is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_n_zero_is_empty() {
        let field = Tensor::<f64>::full(&[16, 16], 1.0);
        let map = pooled_map(field, (4, 4));
        let a = sample_fixations(&map, &params(4, 9)).unwrap();
        let b = sample_fixations(&map, &params(4, 9)).unwrap();
        assert_eq!(a.points, b.points);
        let none = sample_fixations(&map, &params(0, 9)).unwrap();
        assert!(none.points.is_empty());
    }

    #[test]
    fn delta_peak_is_always_hit_first() {
        let mut field = Tensor::<f64>::zeros(&[32, 32]);
        field.set(&[20, 11], 1.0);
        let map = pooled_map(field, (0, 0));
        for seed in 0..1000 {
            let fs = sample_fixations(&map, &params(1, seed)).unwrap();
            assert_eq!(fs.points[0], (20.0, 11.0));
        }
    }

    #[test]
    fn suppression_scales_sampled_cell_exactly() {
        let mut field = Tensor::<f64>::zeros(&[16, 16]);
        field.set(&[5, 7], 1.0);
        let map = pooled_map(field, (0, 0));
        let mut p = params(1, 3);
        p.nms_sigma = 2.0;
        let fs = sample_fixations_traced(&map, &p).unwrap();
        assert_eq!(fs.snapshots.len(), 2);
        let before = fs.snapshots[0].at(&[5, 7]);
        let after = fs.snapshots[1].at(&[5, 7]);
        // kernel value at the sampled cell is exactly 1
        assert_eq!(after, before * (1.0 - 0.95));
    }

    #[test]
    fn two_far_peaks_both_found_with_nms() {
        let mut field = Tensor::<f64>::zeros(&[64, 64]);
        field.set(&[8, 8], 0.5);
        field.set(&[55, 55], 0.5);
        let mut p = params(2, 0);
        p.nms_sigma = 8.0; // separation ~66 cells > 6 sigma
        let map = pooled_map(field, (0, 0));
        for seed in 0..100 {
            p.seed = seed;
            let fs = sample_fixations(&map, &p).unwrap();
            let mut pts = fs.points.clone();
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(pts, vec![(8.0, 8.0), (55.0, 55.0)], "seed {seed}");
        }
    }

    #[test]
    fn without_nms_equal_peaks_repeat() {
        let mut field = Tensor::<f64>::zeros(&[64, 64]);
        field.set(&[8, 8], 0.5);
        field.set(&[55, 55], 0.5);
        let map = pooled_map(field, (0, 0));
        let mut p = params(2, 0);
        p.nms_strength = 0.0;
        let mut repeats = 0;
        let trials = 400;
        for seed in 0..trials {
            p.seed = seed;
            let fs = sample_fixations(&map, &p).unwrap();
            if fs.points[0] == fs.points[1] {
                repeats += 1;
            }
        }
        assert!(
            repeats as f64 / trials as f64 > 0.25,
            "same-peak-twice rate {repeats}/{trials}"
        );
    }

    #[test]
    fn all_zero_map_falls_back_to_uniform() {
        // zero mass map cannot pass PriorityMap validation, so drive the
        // sampler into the degenerate state via total suppression of a
        // single-cell mass with strength close to 1
        let mut field = Tensor::<f64>::zeros(&[4, 4]);
        field.set(&[1, 1], 1.0);
        let map = pooled_map(field, (0, 0));
        let mut p = params(3, 1);
        p.nms_strength = 0.999999;
        p.nms_sigma = 100.0; // flat kernel: everything suppressed at once
        let fs = sample_fixations(&map, &p).unwrap();
        assert_eq!(fs.points.len(), 3);
        // after repeated suppression the remaining mass underflows to ~0 but
        // stays positive, so fallback only triggers if it hits exact zero;
        // either way the draw count is honored
        assert!(fs.points.iter().all(|p| p.0 < 4.0 && p.1 < 4.0));
    }

    #[test]
    fn points_keep_windows_inside_source() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let h = rng.random_range(3..20);
            let w = rng.random_range(3..20);
            let mut field = Tensor::<f64>::zeros(&[h, w]);
            for v in field.data_mut() {
                *v = rng.random::<f64>();
            }
            let window = (6, 4);
            let source = (h + window.0 - 1, w + window.1 - 1);
            let map = pooled_map(field, window);
            let fs = sample_fixations(&map, &params(4, rng.random())).unwrap();
            for (r, c) in fs.points {
                assert!(r >= window.0 as f64 / 2.0 && r <= source.0 as f64 - window.0 as f64 / 2.0);
                assert!(c >= window.1 as f64 / 2.0 && c <= source.1 as f64 - window.1 as f64 / 2.0);
            }
        }
    }

    #[test]
    fn nms_spreads_fixations_on_uniform_map() {
        let field = Tensor::<f64>::full(&[64, 64], 1.0);
        let map = pooled_map(field, (0, 0));
        let mean_pairwise = |nms: f64| -> f64 {
            let mut total = 0.0;
            let mut count = 0usize;
            for seed in 0..200 {
                let mut p = params(4, seed);
                p.nms_sigma = 8.0;
                p.nms_strength = nms;
                let fs = sample_fixations(&map, &p).unwrap();
                for i in 0..fs.points.len() {
                    for j in (i + 1)..fs.points.len() {
                        let (a, b) = (fs.points[i], fs.points[j]);
                        total += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                        count += 1;
                    }
                }
            }
            total / count as f64
        };
        let with = mean_pairwise(0.95);
        let without = mean_pairwise(0.0);
        assert!(with > without, "NMS {with} vs none {without}");
    }

    #[test]
    fn extract_full_window_center_is_identity() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut img = Tensor::<f32>::zeros(&[2, 6, 8]);
        for v in img.data_mut() {
            *v = rng.random::<f32>();
        }
        let out = extract_patch(&img, (3.0, 4.0), (6, 8)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn extract_integer_aligned_equals_slicing() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut img = Tensor::<f32>::zeros(&[1, 16, 16]);
        for v in img.data_mut() {
            *v = rng.random::<f32>();
        }
        for _ in 0..100 {
            let top = rng.random_range(0..12);
            let left = rng.random_range(0..12);
            let window = (4, 4);
            let center = (top as f64 + 2.0, left as f64 + 2.0);
            let patch = extract_patch(&img, center, window).unwrap();
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(patch.at(&[0, y, x]), img.at(&[0, top + y, left + x]));
                }
            }
        }
    }

    #[test]
    fn extract_constant_image_gives_constant_patch() {
        let img = Tensor::<f64>::full(&[1, 10, 10], 0.4);
        let patch = extract_patch(&img, (5.3, 4.7), (4, 4)).unwrap();
        assert!(patch.data().iter().all(|v| (*v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn extract_rejects_out_of_bounds_center() {
        let img = Tensor::<f64>::zeros(&[1, 10, 10]);
        assert!(extract_patch(&img, (1.0, 5.0), (4, 4)).is_err());
        assert!(extract_patch(&img, (5.0, 8.5), (4, 4)).is_err());
        assert!(extract_patch(&img, (5.0, 5.0), (11, 4)).is_err());
    }

    #[test]
    fn extract_scaled_zoom_out_gathers_context() {
        // a zoomed-out crop of a constant image is still constant
        let img = Tensor::<f64>::full(&[1, 20, 20], 0.9);
        let patch = extract_patch_scaled(&img, (10.0, 10.0), (8, 8), 1.5).unwrap();
        assert_eq!(patch.shape(), &[1, 8, 8]);
        assert!(patch.data().iter().all(|v| (*v - 0.9).abs() < 1e-12));
        // but the scaled span must fit
        assert!(extract_patch_scaled(&img, (10.0, 10.0), (8, 8), 3.0).is_err());
    }

    #[test]
    fn progression_counts_and_mass_decrease() {
        let mut field = Tensor::<f64>::zeros(&[16, 16]);
        field.set(&[4, 4], 0.6);
        field.set(&[12, 12], 0.4);
        let map = pooled_map(field, (0, 0));
        let mut p = params(1, 2);
        p.nms_sigma = 2.0;
        let fs = sample_fixations_traced(&map, &p).unwrap();
        assert_eq!(fs.snapshots.len(), 2);
        let (r, c) = (fs.points[0].0 as usize, fs.points[0].1 as usize);
        // mass in a 3x3 neighborhood of the fixation strictly drops
        let local = |t: &Tensor<f64>| -> f64 {
            let mut s = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = (r as i64 + dr).clamp(0, 15) as usize;
                    let cc = (c as i64 + dc).clamp(0, 15) as usize;
                    s += t.at(&[rr, cc]);
                }
            }
            s
        };
        assert!(local(&fs.snapshots[1]) < local(&fs.snapshots[0]));

        assert!(render_priority_progression(&[]).is_empty());
        let rendered = render_priority_progression(&fs.snapshots);
        assert_eq!(rendered.len(), 2);
        for m in rendered {
            assert!(m.max_value() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn untraced_sampling_keeps_no_snapshots() {
        let field = Tensor::<f64>::full(&[8, 8], 1.0);
        let map = pooled_map(field, (2, 2));
        let fs = sample_fixations(&map, &params(3, 0)).unwrap();
        assert!(fs.snapshots.is_empty());
        assert_eq!(fs.points.len(), 3);
    }

    #[test]
    fn rejects_invalid_params() {
        let field = Tensor::<f64>::full(&[8, 8], 1.0);
        let map = pooled_map(field, (2, 2));
        let mut p = params(1, 0);
        p.temperature = 0.0;
        assert!(sample_fixations(&map, &p).is_err());
        let mut p = params(1, 0);
        p.nms_strength = 1.0;
        assert!(sample_fixations(&map, &p).is_err());
        let mut p = params(1, 0);
        p.nms_sigma = -1.0;
        assert!(sample_fixations(&map, &p).is_err());
    }
}
