use super::{Graph, Tensor, TensorError, Var};
use crate::Scalar;

/// Compares the taped gradient of `f` at `x` against central differences.
///
/// `f` records a computation on a fresh graph, starting from the variable
/// holding `x`, and returns the scalar root. The result is the maximum over
/// coordinates of `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<f64, TensorError>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var, TensorError>,
{
    if !(h > T::zero()) {
        return Err(TensorError::InvalidStep);
    }
    let mut g = Graph::new();
    let mut leaf = x.detached();
    leaf.set_requires_grad(true);
    let xv = g.leaf(leaf);
    let root = f(&mut g, xv)?;
    g.backward(root)?;
    let analytic: Vec<T> = match g.grad(xv) {
        Some(gr) => gr.to_vec(),
        None => vec![T::zero(); x.numel()],
    };

    let mut eval = |probe: Tensor<T>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let r = f(&mut g, v)?;
        Ok(g.value(r).data()[0].to_f64().unwrap_or(f64::NAN))
    };

    let mut worst = 0f64;
    for i in 0..x.numel() {
        let mut plus = x.detached();
        let mut minus = x.detached();
        plus.data_mut()[i] = x.data()[i] + h;
        minus.data_mut()[i] = x.data()[i] - h;
        // the realized step after rounding, not the nominal one
        let span = (plus.data()[i] - minus.data()[i]).to_f64().unwrap_or(f64::NAN);
        let fp = eval(plus)?;
        let fm = eval(minus)?;
        let numeric = (fp - fm) / span;
        let a = analytic[i].to_f64().unwrap_or(f64::NAN);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f32>::new(&[5], vec![0.3, -0.2, 0.9, -1.0, 0.5], false).unwrap();
        let err = finite_difference_check(|g, v| g.sum_all(v), &x, 1e-3).unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn sum_of_squares_within_tolerance() {
        let x = Tensor::<f32>::new(&[6], vec![0.1, -0.7, 0.33, 0.92, -0.41, 0.05], false).unwrap();
        let err = finite_difference_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum_all(sq)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "err = {err}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let x = Tensor::<f32>::scalar(1.0);
        assert_eq!(
            finite_difference_check(|g, v| g.sum_all(v), &x, 0.0),
            Err(TensorError::InvalidStep)
        );
    }
}
