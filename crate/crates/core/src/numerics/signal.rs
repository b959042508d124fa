//! Grid and signal kernels: stable softmax over arbitrary axes, GELU,
//! layer normalization, bilinear resizing, stride-1 average pooling, and
//! Gaussian penalty/mask fields.
//!
//! These are the plain (non-recording) kernels; the graph ops in
//! [`super::graph`] call into them for their forward passes.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Iterator plan over the flat-index groups of a reduction: every group
/// holds the indices sharing the same coordinates on the non-reduced axes.
#[derive(Clone, Debug)]
pub(crate) struct AxisGroups {
    /// (stride, extent) of each non-reduced axis.
    outer: Vec<(usize, usize)>,
    /// (stride, extent) of each reduced axis.
    inner: Vec<(usize, usize)>,
    group_size: usize,
    group_count: usize,
}

impl AxisGroups {
    pub(crate) fn new(shape: &[usize], axes: &[usize]) -> Self {
        let mut strides = vec![1usize; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            reduced[a] = true;
        }
        let mut outer = Vec::new();
        let mut inner = Vec::new();
        for (axis, (&stride, &extent)) in strides.iter().zip(shape).enumerate() {
            if reduced[axis] {
                inner.push((stride, extent));
            } else {
                outer.push((stride, extent));
            }
        }
        let group_size = inner.iter().map(|&(_, e)| e).product();
        let group_count = outer.iter().map(|&(_, e)| e).product::<usize>().max(1);
        Self {
            outer,
            inner,
            group_size,
            group_count,
        }
    }

    /// Invokes `f` once per group with that group's flat indices.
    pub(crate) fn for_each(&self, mut f: impl FnMut(&[usize])) {
        let mut indices = vec![0usize; self.group_size];
        let mut outer_coords = vec![0usize; self.outer.len()];
        for _ in 0..self.group_count {
            let base: usize = outer_coords
                .iter()
                .zip(&self.outer)
                .map(|(&c, &(s, _))| c * s)
                .sum();
            // odometer over the reduced axes
            let mut inner_coords = vec![0usize; self.inner.len()];
            for slot in indices.iter_mut() {
                let off: usize = inner_coords
                    .iter()
                    .zip(&self.inner)
                    .map(|(&c, &(s, _))| c * s)
                    .sum();
                *slot = base + off;
                for k in (0..self.inner.len()).rev() {
                    inner_coords[k] += 1;
                    if inner_coords[k] < self.inner[k].1 {
                        break;
                    }
                    inner_coords[k] = 0;
                }
            }
            f(&indices);
            for k in (0..self.outer.len()).rev() {
                outer_coords[k] += 1;
                if outer_coords[k] < self.outer[k].1 {
                    break;
                }
                outer_coords[k] = 0;
            }
        }
    }
}

fn validate_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    if axes.is_empty() {
        return Err(Error::InvalidArgument {
            op: "softmax_over",
            detail: "empty axis set".into(),
        });
    }
    let mut seen = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::InvalidArgument {
                op: "softmax_over",
                detail: format!("axis {a} out of range for rank {}", shape.len()),
            });
        }
        if seen[a] {
            return Err(Error::InvalidArgument {
                op: "softmax_over",
                detail: format!("axis {a} repeated"),
            });
        }
        seen[a] = true;
    }
    Ok(())
}

/// Softmax over the named axes at the given temperature, with
/// max-subtraction for stability. Sums accumulate in f64 so each group
/// normalizes to 1 within 1e-6 even for extreme input magnitudes.
pub fn softmax_over<T: Real>(t: &Tensor<T>, axes: &[usize], temperature: T) -> Result<Tensor<T>> {
    validate_axes(t.shape(), axes)?;
    if temperature <= T::zero() {
        return Err(Error::InvalidArgument {
            op: "softmax_over",
            detail: format!("temperature must be positive, got {temperature}"),
        });
    }
    let mut out = vec![T::zero(); t.len()];
    let inv_t = 1.0 / temperature.tof();
    let groups = AxisGroups::new(t.shape(), axes);
    let mut exps = vec![0.0f64; groups.group_size];
    groups.for_each(|group| {
        let max = group
            .iter()
            .map(|&i| t.data()[i].tof())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        for (slot, &i) in exps.iter_mut().zip(group) {
            let e = ((t.data()[i].tof() - max) * inv_t).exp();
            *slot = e;
            sum += e;
        }
        for (&i, &e) in group.iter().zip(exps.iter()) {
            out[i] = T::fromf(e / sum);
        }
    });
    Tensor::new(t.shape().to_vec(), out)
}

pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::fromf(0.5);
    let inv_sqrt2 = T::fromf(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

/// Derivative of GELU: Phi(x) + x * phi(x), with the exact-erf CDF.
pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::fromf(0.5);
    let inv_sqrt2 = T::fromf(std::f64::consts::FRAC_1_SQRT_2);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = T::fromf((-0.5 * x.tof() * x.tof()).exp() / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Elementwise GELU, exact-erf variant: `x * Phi(x)` with `Phi` the standard
/// normal CDF (not the tanh approximation).
pub fn gelu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(gelu_scalar)
}

/// Per-row (last axis) normalization to zero mean and unit variance with
/// epsilon 1e-5, followed by the affine `scale * x + shift`.
pub fn layer_norm<T: Real>(t: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    let width = *t.shape().last().ok_or(Error::InvalidArgument {
        op: "layer_norm",
        detail: "zero-rank input".into(),
    })?;
    if scale.len() != width || shift.len() != width {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            detail: format!(
                "normalized width {width}, scale {} shift {}",
                scale.len(),
                shift.len()
            ),
        });
    }
    let eps = LAYER_NORM_EPS;
    let rows = t.len() / width;
    let mut out = vec![T::zero(); t.len()];
    for r in 0..rows {
        let row = &t.data()[r * width..(r + 1) * width];
        let mean = row.iter().map(|v| v.tof()).sum::<f64>() / width as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.tof() - mean;
                d * d
            })
            .sum::<f64>()
            / width as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for c in 0..width {
            let xhat = (row[c].tof() - mean) * inv_std;
            out[r * width + c] = T::fromf(xhat) * scale.data()[c] + shift.data()[c];
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// One output cell's source contributions: up to four (flat index, weight).
pub(crate) type ResizeContrib = [(usize, f64); 4];

/// Plans are pure functions of the four extents; training re-resamples the
/// same shapes thousands of times, so they are memoized process-wide.
pub(crate) fn resize_plan(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> std::sync::Arc<Vec<ResizeContrib>> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};
    type Cache = Mutex<HashMap<(usize, usize, usize, usize), Arc<Vec<ResizeContrib>>>>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (in_h, in_w, out_h, out_w);
    if let Some(plan) = cache.lock().unwrap().get(&key) {
        return Arc::clone(plan);
    }
    let plan = Arc::new(build_resize_plan(in_h, in_w, out_h, out_w));
    cache.lock().unwrap().insert(key, Arc::clone(&plan));
    plan
}

/// Bilinear resampling plan between two 2-D grids, align-corners-false:
/// source coordinate = (dst + 0.5) * (in/out) - 0.5, edge-clamped.
fn build_resize_plan(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<ResizeContrib> {
    let mut plan = Vec::with_capacity(out_h * out_w);
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = fx - x0 as f64;
            plan.push([
                (y0 * in_w + x0, (1.0 - wy) * (1.0 - wx)),
                (y0 * in_w + x1, (1.0 - wy) * wx),
                (y1 * in_w + x0, wy * (1.0 - wx)),
                (y1 * in_w + x1, wy * wx),
            ]);
        }
    }
    plan
}

pub(crate) fn apply_resize_plan<T: Real>(plan: &[ResizeContrib], src: &[T]) -> Vec<T> {
    plan.iter()
        .map(|contribs| {
            let mut acc = 0.0f64;
            for &(idx, w) in contribs {
                acc += src[idx].tof() * w;
            }
            T::fromf(acc)
        })
        .collect()
}

/// Bilinear resize of a 2-D field (align-corners-false). Constant fields map
/// to constant fields; a 1x1 field broadcasts.
pub fn bilinear_resize<T: Real>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if t.rank() != 2 {
        return Err(Error::InvalidArgument {
            op: "bilinear_resize",
            detail: format!("expected 2-D field, got rank {}", t.rank()),
        });
    }
    if t.is_empty() || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument {
            op: "bilinear_resize",
            detail: "zero-sized input or output".into(),
        });
    }
    let plan = resize_plan(t.dim(0), t.dim(1), out_h, out_w);
    Tensor::new(vec![out_h, out_w], apply_resize_plan(&plan, t.data()))
}

/// Stride-1 average pooling with a `kh x kw` kernel; output shape
/// `(H-kh+1) x (W-kw+1)`. Uses a summed-area table and clamps the result to
/// the global input range so each cell is a true window mean.
pub fn avg_pool_stride1<T: Real>(t: &Tensor<T>, kh: usize, kw: usize) -> Result<Tensor<T>> {
    if t.rank() != 2 {
        return Err(Error::InvalidArgument {
            op: "avg_pool_stride1",
            detail: format!("expected 2-D field, got rank {}", t.rank()),
        });
    }
    let (h, w) = (t.dim(0), t.dim(1));
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(Error::InvalidArgument {
            op: "avg_pool_stride1",
            detail: format!("kernel {kh}x{kw} does not fit field {h}x{w}"),
        });
    }
    let integral = summed_area(t);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let norm = 1.0 / (kh * kw) as f64;
    let lo = t.min_value();
    let hi = t.max_value();
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let s = window_sum(&integral, w, r, c, kh, kw);
            out.push(T::fromf(s * norm).max(lo).min(hi));
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// (H+1) x (W+1) inclusive prefix sums in f64.
fn summed_area<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    let (h, w) = (t.dim(0), t.dim(1));
    let mut s = vec![0.0f64; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row_acc = 0.0;
        for c in 0..w {
            row_acc += t.data()[r * w + c].tof();
            s[(r + 1) * (w + 1) + (c + 1)] = s[r * (w + 1) + (c + 1)] + row_acc;
        }
    }
    s
}

fn window_sum(integral: &[f64], w: usize, r: usize, c: usize, kh: usize, kw: usize) -> f64 {
    let stride = w + 1;
    integral[(r + kh) * stride + (c + kw)] + integral[r * stride + c]
        - integral[r * stride + (c + kw)]
        - integral[(r + kh) * stride + c]
}

/// Adjoint of stride-1 average pooling: scatter each upstream cell back over
/// its window, scaled by 1/(kh*kw).
pub(crate) fn avg_pool_adjoint<T: Real>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
) -> Tensor<T> {
    let (oh, ow) = (grad_out.dim(0), grad_out.dim(1));
    let norm = 1.0 / (kh * kw) as f64;
    let mut acc = vec![0.0f64; in_h * in_w];
    for r in 0..oh {
        for c in 0..ow {
            let g = grad_out.data()[r * ow + c].tof() * norm;
            for dr in 0..kh {
                for dc in 0..kw {
                    acc[(r + dr) * in_w + (c + dc)] += g;
                }
            }
        }
    }
    Tensor::new(
        vec![in_h, in_w],
        acc.into_iter().map(T::fromf).collect(),
    )
    .expect("adjoint shape")
}

/// Gaussian field with value 1 at `center` (fractional cell coordinates
/// allowed), evaluated at integer cell positions.
///
/// `squared = false` uses `exp(-d / (2 sigma^2))` with `d` the Euclidean
/// distance — the penalty kernel as printed in the sampling algorithm.
/// `squared = true` uses the conventional `exp(-d^2 / (2 sigma^2))`.
pub fn gaussian_field<T: Real>(
    center: (f64, f64),
    shape: (usize, usize),
    sigma: f64,
    squared: bool,
) -> Tensor<T> {
    assert!(sigma > 0.0, "gaussian_field requires sigma > 0");
    let (h, w) = shape;
    let denom = 2.0 * sigma * sigma;
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let dr = r as f64 - center.0;
            let dc = c as f64 - center.1;
            let d2 = dr * dr + dc * dc;
            let arg = if squared { d2 } else { d2.sqrt() };
            data.push(T::fromf((-arg / denom).exp()));
        }
    }
    Tensor::new(vec![h, w], data).expect("gaussian shape")
}
