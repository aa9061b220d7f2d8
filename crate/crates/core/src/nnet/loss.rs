use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{l2_normalize, NnError, Scalar};

/// Additive-margin softmax head: scale `s`, margin `m`, and one unit-norm
/// weight row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig<T> {
    pub scale: T,
    pub margin: T,
    pub classes: usize,
    pub dim: usize,
    /// `(classes, dim)`, row-major, each row unit norm.
    pub class_weights: Vec<T>,
}

impl<T: Scalar> LossConfig<T> {
    pub fn new(scale: T, margin: T, dim: usize, class_weights: Vec<T>) -> Result<Self, NnError> {
        if !(scale > T::zero()) {
            return Err(NnError::Config(format!("scale must be positive, got {scale:?}")));
        }
        if !(margin >= T::zero() && margin < T::one()) {
            return Err(NnError::Config(format!("margin must lie in [0, 1), got {margin:?}")));
        }
        if dim == 0 || class_weights.is_empty() || !class_weights.len().is_multiple_of(dim) {
            return Err(NnError::Shape(format!(
                "{} class weights do not form rows of width {dim}",
                class_weights.len()
            )));
        }
        let mut cfg = Self {
            scale,
            margin,
            classes: class_weights.len() / dim,
            dim,
            class_weights,
        };
        cfg.renormalize()?;
        Ok(cfg)
    }

    /// Random unit-norm class weights.
    pub fn random<R: Rng + ?Sized>(
        scale: T,
        margin: T,
        classes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let w = (0..classes * dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::from_f64(v)
            })
            .collect();
        Self::new(scale, margin, dim, w)
    }

    pub fn row(&self, class: usize) -> &[T] {
        &self.class_weights[class * self.dim..][..self.dim]
    }

    /// Projects every class-weight row back onto the unit sphere.
    pub fn renormalize(&mut self) -> Result<(), NnError> {
        for row in self.class_weights.chunks_mut(self.dim) {
            let unit = l2_normalize(row)?;
            row.copy_from_slice(&unit);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    /// Same layout as the embeddings.
    pub grad_embeddings: Vec<T>,
    /// Same layout as the class weights.
    pub grad_weights: Vec<T>,
}

/// Mean additive-margin softmax loss over a batch of `dim`-wide embeddings.
///
/// Logits are `s * <e, W_j>` with the margin subtracted from the target
/// cosine before scaling; the maximum logit is subtracted before
/// exponentiation.
pub fn am_softmax_loss<T: Scalar>(
    embeddings: &[T],
    labels: &[usize],
    cfg: &LossConfig<T>,
) -> Result<LossOutput<T>, NnError> {
    let dim = cfg.dim;
    if embeddings.len() != labels.len() * dim || labels.is_empty() {
        return Err(NnError::Shape(format!(
            "{} embedding values for {} labels of width {dim}",
            embeddings.len(),
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(NnError::Label {
            label,
            classes: cfg.classes,
        });
    }
    let (s, m) = (cfg.scale.as_f64(), cfg.margin.as_f64());
    let n = labels.len() as f64;
    let w: Vec<f64> = cfg.class_weights.iter().map(|v| v.as_f64()).collect();
    let mut grad_e = vec![0.0f64; embeddings.len()];
    let mut grad_w = vec![0.0f64; w.len()];
    let mut total = 0.0;
    let mut logits = vec![0.0f64; cfg.classes];
    for (i, &y) in labels.iter().enumerate() {
        let e: Vec<f64> = embeddings[i * dim..][..dim].iter().map(|v| v.as_f64()).collect();
        for (j, z) in logits.iter_mut().enumerate() {
            let cos: f64 = w[j * dim..][..dim].iter().zip(&e).map(|(a, b)| a * b).sum();
            *z = if j == y { s * (cos - m) } else { s * cos };
        }
        let (top, max) = logits
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, z)| if z > acc.1 { (j, z) } else { acc });
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top)
            .map(|(_, z)| (z - max).exp())
            .sum();
        let sum = 1.0 + rest;
        total += (max - logits[y]) + rest.ln_1p();
        for (j, &z) in logits.iter().enumerate() {
            let p = (z - max).exp() / sum;
            let dz = (p - if j == y { 1.0 } else { 0.0 }) / n * s;
            if dz == 0.0 {
                continue;
            }
            let wj = &w[j * dim..][..dim];
            for ((ge, gw), (&wv, &ev)) in grad_e[i * dim..][..dim]
                .iter_mut()
                .zip(&mut grad_w[j * dim..][..dim])
                .zip(wj.iter().zip(&e))
            {
                *ge += dz * wv;
                *gw += dz * ev;
            }
        }
    }
    Ok(LossOutput {
        loss: T::from_f64(total / n),
        grad_embeddings: grad_e.into_iter().map(T::from_f64).collect(),
        grad_weights: grad_w.into_iter().map(T::from_f64).collect(),
    })
}
