use super::{shape_err, NnError, Scalar, Tensor};

/// Parametric ReLU with one learned slope per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PRelu<T> {
    pub slopes: Vec<T>,
}

impl<T: Scalar> PRelu<T> {
    pub fn new(channels: usize, slope: T) -> Self {
        Self {
            slopes: vec![slope; channels],
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<(), NnError> {
        if x.channels() != self.slopes.len() {
            return Err(shape_err(format!(
                "prelu has {} slopes, input has {} channels",
                self.slopes.len(),
                x.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.check(x)?;
        let [_, c, h, w] = x.shape();
        let plane = h * w;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if *v < T::zero() {
                *v = *v * self.slopes[(i / plane) % c];
            }
        }
        Ok(out)
    }

    /// Returns the input gradient and accumulates the slope gradient.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Vec<T>]) -> Result<Tensor<T>, NnError> {
        self.check(x)?;
        if dy.shape() != x.shape() {
            return Err(shape_err("prelu gradient shape mismatch"));
        }
        let [gs] = grads else {
            return Err(NnError::State("prelu expects one gradient buffer".into()));
        };
        let [_, c, h, w] = x.shape();
        let plane = h * w;
        let mut dx = dy.clone();
        for (i, (g, &xv)) in dx.data_mut().iter_mut().zip(x.data()).enumerate() {
            if xv < T::zero() {
                let ch = (i / plane) % c;
                gs[ch] = gs[ch] + *g * xv;
                *g = *g * self.slopes[ch];
            }
        }
        Ok(dx)
    }
}

pub fn prelu<T: Scalar>(input: &Tensor<T>, slopes: &[T]) -> Result<Tensor<T>, NnError> {
    PRelu {
        slopes: slopes.to_vec(),
    }
    .forward(input)
}
