use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{shape_err, NnError, Scalar, Tensor};

/// Fully connected layer over the flattened per-sample input; output shape
/// is `(n, out_features, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out_features, in_features)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn init_he<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let std = (2.0 / self.in_features as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        self.weight
            .iter_mut()
            .for_each(|w| *w = T::from_f64(normal.sample(rng)));
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    fn check(&self, x: &Tensor<T>) -> Result<(), NnError> {
        if x.sample_len() != self.in_features {
            return Err(shape_err(format!(
                "linear layer expects {} features, got {}",
                self.in_features,
                x.sample_len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.check(x)?;
        let (n, fi, fo) = (x.batch(), self.in_features, self.out_features);
        let mut data: Vec<T> = (0..n).flat_map(|_| self.bias.iter().copied()).collect();
        // y (n x fo) += x (n x fi) * W^T (fi x fo)
        T::gemm(n, fi, fo, T::one(), x.data(), fi as isize, 1, &self.weight, 1, fi as isize, T::one(), &mut data, fo as isize, 1);
        Tensor::from_vec([n, fo, 1, 1], data)
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Vec<T>]) -> Result<Tensor<T>, NnError> {
        self.check(x)?;
        let (n, fi, fo) = (x.batch(), self.in_features, self.out_features);
        if dy.shape() != [n, fo, 1, 1] {
            return Err(shape_err("linear gradient shape mismatch"));
        }
        let [gw, gb] = grads else {
            return Err(NnError::State("linear expects two gradient buffers".into()));
        };
        // dW (fo x fi) += dy^T (fo x n) * x (n x fi)
        T::gemm(fo, n, fi, T::one(), dy.data(), 1, fo as isize, x.data(), fi as isize, 1, T::one(), gw, fi as isize, 1);
        for row in dy.data().chunks(fo) {
            for (b, &g) in gb.iter_mut().zip(row) {
                *b = *b + g;
            }
        }
        // dx (n x fi) = dy (n x fo) * W (fo x fi)
        let mut dx = vec![T::zero(); n * fi];
        T::gemm(n, fo, fi, T::one(), dy.data(), fo as isize, 1, &self.weight, fi as isize, 1, T::zero(), &mut dx, fi as isize, 1);
        Tensor::from_vec(x.shape(), dx)
    }
}

/// Affine map `W x + b` for a single vector.
pub fn fully_connected<T: Scalar>(input: &[T], weights: &[T], bias: &[T]) -> Result<Vec<T>, NnError> {
    let fo = bias.len();
    if fo == 0 || weights.len() != fo * input.len() {
        return Err(shape_err(format!(
            "weights of length {} do not map {} inputs to {} outputs",
            weights.len(),
            input.len(),
            fo
        )));
    }
    let layer = Linear {
        in_features: input.len(),
        out_features: fo,
        weight: weights.to_vec(),
        bias: bias.to_vec(),
    };
    let x = Tensor::from_vec([1, input.len(), 1, 1], input.to_vec())?;
    Ok(layer.forward(&x)?.into_vec())
}
