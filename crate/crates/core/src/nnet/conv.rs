use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{shape_err, NnError, Scalar, Tensor};

/// Geometry of a grouped 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        let ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            ..
        } = *self;
        if in_channels == 0 || out_channels == 0 || groups == 0 || stride == 0 {
            return Err(NnError::Config(format!("zero-sized convolution {self:?}")));
        }
        if kernel[0] == 0 || kernel[1] == 0 {
            return Err(NnError::Config(format!("empty kernel {kernel:?}")));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(NnError::Config(format!(
                "groups={groups} must divide in_channels={in_channels} and out_channels={out_channels}"
            )));
        }
        Ok(())
    }

    /// Weights per output channel.
    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel[0] * self.kernel[1]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.fan_in() + self.out_channels
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel[0] || pw < self.kernel[1] {
            return Err(shape_err(format!(
                "{h}x{w} input (padding {}) smaller than kernel {:?}",
                self.padding, self.kernel
            )));
        }
        Ok((
            (ph - self.kernel[0]) / self.stride + 1,
            (pw - self.kernel[1]) / self.stride + 1,
        ))
    }
}

/// Grouped convolution; output group `g` reads only input channels
/// `[g * in/groups, (g + 1) * in/groups)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub spec: ConvSpec,
    /// `(out_channels, in_channels / groups, kh, kw)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(spec: ConvSpec) -> Result<Self, NnError> {
        spec.validate()?;
        Ok(Self {
            spec,
            weight: vec![T::zero(); spec.out_channels * spec.fan_in()],
            bias: vec![T::zero(); spec.out_channels],
        })
    }

    pub fn from_parts(spec: ConvSpec, weight: Vec<T>, bias: Vec<T>) -> Result<Self, NnError> {
        let mut layer = Self::zeros(spec)?;
        if weight.len() != layer.weight.len() || bias.len() != layer.bias.len() {
            return Err(shape_err(format!(
                "conv weights need {} + {} values, got {} + {}",
                layer.weight.len(),
                layer.bias.len(),
                weight.len(),
                bias.len()
            )));
        }
        layer.weight = weight;
        layer.bias = bias;
        Ok(layer)
    }

    /// He-normal weights, zero bias.
    pub fn init_he<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let std = (2.0 / self.spec.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        self.weight
            .iter_mut()
            .for_each(|w| *w = T::from_f64(normal.sample(rng)));
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize), NnError> {
        if x.channels() != self.spec.in_channels {
            return Err(shape_err(format!(
                "convolution expects {} input channels, got {}",
                self.spec.in_channels,
                x.channels()
            )));
        }
        let [_, _, h, w] = x.shape();
        self.spec.output_hw(h, w)
    }

    /// Unfolds one group of one sample into a `(icg * kh * kw) x (oh * ow)` matrix.
    fn im2col(&self, sample: &[T], hw: (usize, usize), group: usize, out_hw: (usize, usize), col: &mut [T]) {
        let s = &self.spec;
        let icg = s.in_channels / s.groups;
        let (h, w) = hw;
        let (oh, ow) = out_hw;
        let [kh, kw] = s.kernel;
        let pad = s.padding as isize;
        let mut row = 0;
        for ci in 0..icg {
            let plane = &sample[(group * icg + ci) * h * w..][..h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let dst = &mut col[row * oh * ow..][..oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s.stride + ki) as isize - pad;
                        let dst_row = &mut dst[oy * ow..][..ow];
                        if iy < 0 || iy >= h as isize {
                            dst_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..][..w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * s.stride + kj) as isize - pad;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adds a column matrix back onto the image positions it was read from.
    fn col2im(&self, col: &[T], hw: (usize, usize), group: usize, out_hw: (usize, usize), grad: &mut [T]) {
        let s = &self.spec;
        let icg = s.in_channels / s.groups;
        let (h, w) = hw;
        let (oh, ow) = out_hw;
        let [kh, kw] = s.kernel;
        let pad = s.padding as isize;
        let mut row = 0;
        for ci in 0..icg {
            let plane = &mut grad[(group * icg + ci) * h * w..][..h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let src = &col[row * oh * ow..][..oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..][..w];
                        for (ox, &v) in src[oy * ow..][..ow].iter().enumerate() {
                            let ix = (ox * s.stride + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (oh, ow) = self.check_input(x)?;
        let s = &self.spec;
        let [n, _, h, w] = x.shape();
        let (ocg, k, ohw) = (s.out_channels / s.groups, s.fan_in(), oh * ow);
        let mut out = Tensor::zeros([n, s.out_channels, oh, ow]);
        let mut col = vec![T::zero(); k * ohw];
        let out_len = s.out_channels * ohw;
        for i in 0..n {
            let sample = x.sample(i);
            let out_sample = &mut out.data_mut()[i * out_len..][..out_len];
            for g in 0..s.groups {
                self.im2col(sample, (h, w), g, (oh, ow), &mut col);
                let wg = &self.weight[g * ocg * k..][..ocg * k];
                let og = &mut out_sample[g * ocg * ohw..][..ocg * ohw];
                T::gemm(ocg, k, ohw, T::one(), wg, k as isize, 1, &col, ohw as isize, 1, T::zero(), og, ohw as isize, 1);
            }
            for (oc, b) in self.bias.iter().enumerate() {
                out_sample[oc * ohw..][..ohw].iter_mut().for_each(|v| *v = *v + *b);
            }
        }
        Ok(out)
    }

    /// Returns the input gradient and accumulates `[weight, bias]` gradients.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Vec<T>]) -> Result<Tensor<T>, NnError> {
        let (oh, ow) = self.check_input(x)?;
        let s = &self.spec;
        let [n, _, h, w] = x.shape();
        if dy.shape() != [n, s.out_channels, oh, ow] {
            return Err(shape_err(format!(
                "convolution output gradient has shape {:?}, expected {:?}",
                dy.shape(),
                [n, s.out_channels, oh, ow]
            )));
        }
        let (ocg, k, ohw) = (s.out_channels / s.groups, s.fan_in(), oh * ow);
        let (gw, gb) = match grads {
            [gw, gb] => (gw, gb),
            _ => return Err(NnError::State("convolution expects two gradient buffers".into())),
        };
        let mut dx = Tensor::zeros(x.shape());
        let mut col = vec![T::zero(); k * ohw];
        let mut dcol = vec![T::zero(); k * ohw];
        let in_len = x.sample_len();
        for i in 0..n {
            let sample = x.sample(i);
            let dys = dy.sample(i);
            let dxs = &mut dx.data_mut()[i * in_len..][..in_len];
            for g in 0..s.groups {
                self.im2col(sample, (h, w), g, (oh, ow), &mut col);
                let dyg = &dys[g * ocg * ohw..][..ocg * ohw];
                let wg = &self.weight[g * ocg * k..][..ocg * k];
                let gwg = &mut gw[g * ocg * k..][..ocg * k];
                T::gemm(ocg, ohw, k, T::one(), dyg, ohw as isize, 1, &col, 1, ohw as isize, T::one(), gwg, k as isize, 1);
                T::gemm(k, ocg, ohw, T::one(), wg, 1, k as isize, dyg, ohw as isize, 1, T::zero(), &mut dcol, ohw as isize, 1);
                self.col2im(&dcol, (h, w), g, (oh, ow), dxs);
            }
            for (oc, b) in gb.iter_mut().enumerate() {
                *b = *b + dys[oc * ohw..][..ohw].iter().copied().sum::<T>();
            }
        }
        Ok(dx)
    }
}

pub fn conv2d_grouped<T: Scalar>(input: &Tensor<T>, layer: &Conv2d<T>) -> Result<Tensor<T>, NnError> {
    layer.forward(input)
}
