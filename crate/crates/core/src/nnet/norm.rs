use super::{NnError, Scalar, Tensor};

/// Norms at or below this are rejected.
pub const MIN_NORM: f64 = 1e-12;

fn norm<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>, NnError> {
    let n = norm(v);
    if !(n > MIN_NORM) {
        return Err(NnError::ZeroVector(n));
    }
    Ok(v.iter().map(|x| T::from_f64(x.as_f64() / n)).collect())
}

/// Per-sample L2 normalization layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct L2Normalize;

impl L2Normalize {
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let len = x.sample_len();
        let mut data = Vec::with_capacity(x.data().len());
        for i in 0..x.batch() {
            data.extend(l2_normalize(x.sample(i))?);
        }
        debug_assert_eq!(data.len(), x.batch() * len);
        Tensor::from_vec(x.shape(), data)
    }

    /// `dx = (dy - y (y . dy)) / |x|`
    pub fn backward<T: Scalar>(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut dx = Vec::with_capacity(x.data().len());
        for i in 0..x.batch() {
            let xs = x.sample(i);
            let n = norm(xs);
            if !(n > MIN_NORM) {
                return Err(NnError::ZeroVector(n));
            }
            let g = dy.sample(i);
            let dot: f64 = xs.iter().zip(g).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / n;
            dx.extend(
                xs.iter()
                    .zip(g)
                    .map(|(a, b)| T::from_f64((b.as_f64() - a.as_f64() / n * dot) / n)),
            );
        }
        Tensor::from_vec(x.shape(), dx)
    }
}
