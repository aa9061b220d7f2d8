use super::{shape_err, NnError, Scalar, Tensor};

/// Source channel for every output channel: with `n = channels / groups`,
/// output `j * groups + k` reads input `k * n + j`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>, NnError> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(shape_err(format!(
            "shuffle groups {groups} must divide {channels} channels"
        )));
    }
    let n = channels / groups;
    let mut perm = vec![0; channels];
    for k in 0..groups {
        for j in 0..n {
            perm[j * groups + k] = k * n + j;
        }
    }
    Ok(perm)
}

fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize], inverse: bool) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        let src = x.sample(b);
        let dst = &mut out.data_mut()[b * c * plane..][..c * plane];
        for (o, &i) in perm.iter().enumerate() {
            let (from, to) = if inverse { (o, i) } else { (i, o) };
            dst[to * plane..][..plane].copy_from_slice(&src[from * plane..][..plane]);
        }
    }
    out
}

pub fn channel_shuffle<T: Scalar>(input: &Tensor<T>, groups: usize) -> Result<Tensor<T>, NnError> {
    let perm = shuffle_permutation(input.channels(), groups)?;
    Ok(permute(input, &perm, false))
}

/// Parameter-free channel shuffle layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelShuffle {
    pub groups: usize,
}

impl ChannelShuffle {
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        channel_shuffle(x, self.groups)
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let perm = shuffle_permutation(dy.channels(), self.groups)?;
        Ok(permute(dy, &perm, true))
    }
}
