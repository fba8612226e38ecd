//! Central-difference gradient checking.

use super::{Tape, Tensor, TensorError, TensorResult};

/// Compare tape gradients of a scalar-valued function against central finite
/// differences, returning the worst elementwise relative error.
///
/// `f` is called with a fresh tape and a tape-registered copy of `x`; it must
/// return a scalar. The relative error for element `i` is
/// `|g_i - fd_i| / max(|g_i|, |fd_i|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> TensorResult<f64>
where
    F: Fn(&mut Tape, &Tensor) -> TensorResult<Tensor>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(TensorError::Contract(format!(
            "finite_diff_check step h={h} outside (0, 1e-2]"
        )));
    }

    let mut tape = Tape::new();
    let xt = tape.leaf(x);
    let y = f(&mut tape, &xt)?;
    if !y.is_scalar() {
        return Err(TensorError::NotScalar { shape: y.shape().to_vec() });
    }
    let grads = tape.backward(&y)?;
    let analytic = grads
        .for_tensor(&xt)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |data: Vec<f64>| -> TensorResult<f64> {
        let probe = Tensor::from_vec(x.shape(), data)?;
        let mut t = Tape::new();
        let p = t.constant(&probe);
        let out = f(&mut t, &p)?;
        if !out.is_scalar() {
            return Err(TensorError::NotScalar { shape: out.shape().to_vec() });
        }
        Ok(out.item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let g = analytic.data()[i];
        let denom = g.abs().max(fd.abs()).max(1e-8);
        worst = worst.max((g - fd).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        // Binary-exact inputs and a power-of-two step keep every finite
        // difference of a linear map exact in f64.
        let x = Tensor::from_vec(&[3], vec![0.5, 1.0, 2.0]).unwrap();
        let h = (2.0f64).powi(-16);
        let err = finite_diff_check(|t, x| t.sum(x), &x, h).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn composite_nonlinear_function_checks_out() {
        let x = Tensor::from_vec(&[2, 4], vec![0.3, -0.8, 1.2, 0.05, -1.4, 0.6, 0.9, -0.2]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let g = t.gelu(x)?;
                let sm = t.softmax(&g, 1)?;
                let sq = t.mul(&sm, &sm)?;
                t.sum(&sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn layer_norm_gradient_checks_out() {
        let x = Tensor::from_vec(&[2, 3], vec![0.9, -0.1, 0.4, 2.0, -1.0, 0.3]).unwrap();
        let gain = Tensor::from_vec(&[3], vec![1.1, 0.9, 1.3]).unwrap();
        let bias = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.0]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let g = t.constant(&gain);
                let b = t.constant(&bias);
                let y = t.layer_norm(x, &g, &b, 1e-5)?;
                let sq = t.mul(&y, &y)?;
                t.sum(&sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn matmul_and_cross_entropy_check_out() {
        let w = Tensor::from_vec(&[3, 2], vec![0.4, -0.6, 0.2, 0.8, -0.5, 0.1]).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![0.3, 0.9, -1.1, 0.7, 0.0, 0.25]).unwrap();
        let err = finite_diff_check(
            |t, w| {
                let xc = t.constant(&x);
                let logits = t.matmul(&xc, w)?;
                t.cross_entropy_logits(&logits, &[1, 0])
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(|t, x| t.sum(x), &x, 0.0).is_err());
        assert!(finite_diff_check(|t, x| t.sum(x), &x, 0.5).is_err());
    }

    #[test]
    fn rejects_vector_valued_function() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let err = finite_diff_check(|t, x| t.scale(x, 2.0), &x, 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }
}
