//! Gradient verification against central finite differences.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::{Real, Tensor};

/// Compares the analytic gradient of a scalar-valued function against
/// central finite differences at the given input.
///
/// `f` rebuilds the computation on a fresh graph each call; the numeric side
/// of the comparison never touches the backward pass, so it stays an
/// independent oracle for it. Returns the maximum over coordinates of
/// `|analytic - central| / (|analytic| + 1e-8)`.
pub fn finite_difference_check<T, F>(f: F, input: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&Graph<T>, Var) -> Var,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "finite_difference_check",
            detail: format!("step must be positive, got {h}"),
        });
    }
    let graph = Graph::new();
    let x = graph.param(input.clone());
    let out = f(&graph, x);
    if graph.shape(out).iter().product::<usize>() != 1 {
        return Err(Error::InvalidArgument {
            op: "finite_difference_check",
            detail: format!("f must be scalar-valued, got shape {:?}", graph.shape(out)),
        });
    }
    let grads = graph.backward(out);
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |probe: &Tensor<T>| -> f64 {
        let g = Graph::new();
        let v = g.constant(probe.clone());
        g.scalar_value(f(&g, v)).tof()
    };

    let mut max_err = 0.0f64;
    for i in 0..input.len() {
        let base = input.data()[i].tof();
        let mut plus = input.clone();
        plus.data_mut()[i] = T::fromf(base + h);
        let mut minus = input.clone();
        minus.data_mut()[i] = T::fromf(base - h);
        let central = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic.data()[i].tof();
        let err = (a - central).abs() / (a.abs() + 1e-8);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_exactly() {
        let input = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = finite_difference_check(
            |g, x| {
                let sq = g.mul(x, x);
                g.sum_all(sq)
            },
            &input,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let input = Tensor::<f64>::from_f64(&[3], &[0.3, -1.0, 2.0]).unwrap();
        let err = finite_difference_check(
            |g, x| {
                let zero = g.scale(x, 0.0);
                let s = g.sum_all(zero);
                g.add_const(s, 5.0)
            },
            &input,
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softmax_cross_entropy_within_tolerance() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let target = Tensor::<f64>::from_f64(&[4], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let err = finite_difference_check(
            |g, x| g.cross_entropy_logits(x, &target),
            &input,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "err = {err}");
    }

    #[test]
    fn rejects_non_scalar_output() {
        let input = Tensor::<f64>::zeros(&[2]);
        let res = finite_difference_check(|g, x| g.scale(x, 2.0), &input, 1e-4);
        assert!(res.is_err());
    }

    #[test]
    fn rejects_non_positive_step() {
        let input = Tensor::<f64>::zeros(&[1]);
        assert!(finite_difference_check(|g, x| g.sum_all(x), &input, 0.0).is_err());
    }
}
