use super::{Element, Tensor};

/// Central-difference gradient of a scalar function at every element of `x`.
pub fn finite_diff_grad<F, E, Fun>(f: Fun, x: &Tensor<F>, eps: F) -> Result<Tensor<F>, E>
where
    F: Element,
    Fun: FnMut(&Tensor<F>) -> Result<F, E>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    let vals = finite_diff_grad_at(f, x, eps, &all)?;
    Ok(Tensor::new(x.shape().to_vec(), vals).expect("one derivative per element"))
}

/// Central differences at selected flat indices only; used when a full
/// sweep over a large parameter would be too slow.
pub fn finite_diff_grad_at<F, E, Fun>(mut f: Fun, x: &Tensor<F>, eps: F, indices: &[usize]) -> Result<Vec<F>, E>
where
    F: Element,
    Fun: FnMut(&Tensor<F>) -> Result<F, E>,
{
    let mut probe = x.clone();
    let two = F::one() + F::one();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (two * eps));
    }
    Ok(out)
}

/// Largest elementwise disagreement, relative to the larger of the two
/// gradients' max-magnitudes. Zero when both are identically zero.
pub fn max_relative_error<F: Element>(analytic: &[F], numeric: &[F]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.f64().abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a.f64() - n.f64()).abs())
        .fold(0.0, f64::max)
        / scale
}
