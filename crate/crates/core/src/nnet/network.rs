use super::{ChannelShuffle, Conv2d, L2Normalize, Linear, NnError, PRelu, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Shuffle(ChannelShuffle),
    PRelu(PRelu<T>),
    Linear(Linear<T>),
    L2Normalize(L2Normalize),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Shuffle(l) => l.forward(x),
            Layer::PRelu(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::L2Normalize(l) => l.forward(x),
        }
    }

    /// Returns the input gradient and accumulates parameter gradients into `grads`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Vec<T>]) -> Result<Tensor<T>, NnError> {
        match self {
            Layer::Conv(l) => l.backward(x, dy, grads),
            Layer::Shuffle(l) => l.backward(dy),
            Layer::PRelu(l) => l.backward(x, dy, grads),
            Layer::Linear(l) => l.backward(x, dy, grads),
            Layer::L2Normalize(l) => l.backward(x, dy),
        }
    }

    pub fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::PRelu(l) => vec![&l.slopes],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Shuffle(_) | Layer::L2Normalize(_) => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::PRelu(l) => vec![&mut l.slopes],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Shuffle(_) | Layer::L2Normalize(_) => vec![],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
        match self {
            Layer::Conv(l) => Layer::Conv(Conv2d {
                spec: l.spec,
                weight: c(&l.weight),
                bias: c(&l.bias),
            }),
            Layer::Shuffle(l) => Layer::Shuffle(*l),
            Layer::PRelu(l) => Layer::PRelu(PRelu { slopes: c(&l.slopes) }),
            Layer::Linear(l) => Layer::Linear(Linear {
                in_features: l.in_features,
                out_features: l.out_features,
                weight: c(&l.weight),
                bias: c(&l.bias),
            }),
            Layer::L2Normalize(l) => Layer::L2Normalize(*l),
        }
    }
}

/// A fixed sequence of layers. Training passes cache each layer's input so
/// the following `backward` call can reuse them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Network<T> {
    pub layers: Vec<Layer<T>>,
    cache: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers, cache: None }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.cache = None;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let next = layer.forward(&cur)?;
            inputs.push(std::mem::replace(&mut cur, next));
        }
        self.cache = Some(inputs);
        Ok(cur)
    }

    /// Backpropagates `grad_output` through the cached forward pass, returning
    /// one gradient buffer per parameter tensor in [`Network::params`] order.
    pub fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Vec<Vec<T>>, NnError> {
        let inputs = self
            .cache
            .take()
            .ok_or_else(|| NnError::State("backward called without a cached forward pass".into()))?;
        let mut per_layer: Vec<Vec<Vec<T>>> = self
            .layers
            .iter()
            .map(|l| l.params().iter().map(|p| vec![T::zero(); p.len()]).collect())
            .collect();
        let mut grad = grad_output.clone();
        for ((layer, x), grads) in self.layers.iter().zip(&inputs).zip(&mut per_layer).rev() {
            grad = layer.backward(x, &grad, grads)?;
        }
        Ok(per_layer.into_iter().flatten().collect())
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network::new(self.layers.iter().map(Layer::cast).collect())
    }
}
