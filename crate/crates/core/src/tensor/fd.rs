use super::{Tensor, TensorError};

/// Central-difference gradient estimate of a scalar function.
///
/// Component `i` is `(f(x + h e_i) - f(x - h e_i)) / 2h`. The input is used
/// tape-free; `f` sees plain tensors.
pub fn finite_difference<F, E>(f: F, x: &Tensor, h: f64) -> std::result::Result<Tensor, E>
where
    F: Fn(&Tensor) -> std::result::Result<f64, E>,
    E: From<TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::Invalid {
            op: "finite_difference",
            msg: format!("step must be positive, got {h}"),
        }
        .into());
    }
    let base = x.to_vec();
    let mut out = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = base[i] - h;
        let minus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = base[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

#[cfg(test)]
fn fd_plain(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> super::Result<Tensor> {
    finite_difference(|t| Ok::<_, TensorError>(f(t)), x, h)
}
