//! Independent reference implementations and randomized oracle checks.
//!
//! Each `*_oracle` function runs a batch of randomized comparisons and
//! returns a one-line summary on success or the first discrepancy on failure,
//! so the same checks serve the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::f64::consts::PI;

use primid_core::align::{
    compute_landmark_template, fit_similarity, solve_similarity, CanvasGeometry, LandmarkSet, LandmarkTemplate, Point,
    SimilarityParams, TemplateNormalization,
};
use primid_core::embedding::Embedding;
use primid_core::eval::{
    closed_set_rank1, open_set_dir, tar_at_far, trial_probes, verification_scores, LabeledEmbedding, ScoreSet, Subject,
    FAR_01, FAR_1,
};
use primid_core::model::{build_primnet, PrimNetConfig, StageSpec};
use primid_core::nnet::{
    am_softmax_loss, channel_shuffle, shuffle_permutation, ChannelShuffle, Conv2d, ConvSpec, L2Normalize, Layer,
    Linear, LossConfig, PRelu, Scalar, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------- alignment

/// Similarity transform written out from its definition.
pub fn apply_similarity(s: f64, theta: f64, m: Point, p: Point) -> Point {
    let (c, sn) = (theta.cos(), theta.sin());
    [s * (c * p[0] - sn * p[1]) + m[0], s * (sn * p[0] + c * p[1]) + m[1]]
}

pub fn invert_similarity(s: f64, theta: f64, m: Point, q: Point) -> Point {
    let (dx, dy) = (q[0] - m[0], q[1] - m[1]);
    let (c, sn) = (theta.cos(), theta.sin());
    [(c * dx + sn * dy) / s, (-sn * dx + c * dy) / s]
}

/// `Aᵀ(b − Ax)` for the stacked least-squares system of a similarity fit.
pub fn normal_residual(src: &[Point], dst: &[Point], p: &SimilarityParams) -> [f64; 4] {
    let x = [p.a, p.b, p.m_x, p.m_y];
    let mut out = [0.0; 4];
    for (&[sx, sy], &[tx, ty]) in src.iter().zip(dst) {
        for (row, rhs) in [([sx, -sy, 1.0, 0.0], tx), ([sy, sx, 0.0, 1.0], ty)] {
            let r = rhs - row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            for k in 0..4 {
                out[k] += row[k] * r;
            }
        }
    }
    out
}

fn random_triple<R: Rng>(rng: &mut R) -> [Point; 3] {
    loop {
        let pts: [Point; 3] = std::array::from_fn(|_| [rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)]);
        if LandmarkSet::new("r", pts[0], pts[1], pts[2]).is_ok() {
            let area = ((pts[1][0] - pts[0][0]) * (pts[2][1] - pts[0][1])
                - (pts[2][0] - pts[0][0]) * (pts[1][1] - pts[0][1]))
                .abs();
            if area > 100.0 {
                return pts;
            }
        }
    }
}

fn rel_close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs().max(1.0)
}

/// Recovers known transforms from exact correspondences, both through the
/// raw point fit and through a landmark template, and checks residual
/// orthogonality on noisy correspondences.
pub fn alignment_oracle(cases: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let geometry = CanvasGeometry::default();
    let mut worst_param = 0.0f64;
    let mut worst_ortho = 0.0f64;
    for case in 0..cases {
        let s = rng.random_range(0.5..2.0);
        let theta = rng.random_range(-PI..PI);
        let m = loop {
            let m: Point = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
            if m[0].hypot(m[1]) <= 50.0 {
                break m;
            }
        };
        let want = [s * theta.cos(), s * theta.sin(), m[0], m[1]];

        let src = random_triple(&mut rng);
        let dst = src.map(|p| apply_similarity(s, theta, m, p));
        let fit = fit_similarity(&src, &dst).map_err(|e| format!("case {case}: {e}"))?;

        let tpl = if case % 2 == 0 {
            LandmarkTemplate::canonical()
        } else {
            let sets: Vec<LandmarkSet> = (0..3)
                .map(|_| {
                    let mut j = |x: f64, y: f64| [x + rng.random_range(-8.0..8.0), y + rng.random_range(-8.0..8.0)];
                    let (l, r, mo) = (j(30.0, 40.0), j(70.0, 40.0), j(50.0, 80.0));
                    LandmarkSet::new("t", l, r, mo).unwrap()
                })
                .collect();
            compute_landmark_template(&sets, &geometry, TemplateNormalization::SquaredNorm)
                .map_err(|e| format!("case {case}: {e}"))?
        };
        let [l, r, mo] = tpl.target_points().map(|q| invert_similarity(s, theta, m, q));
        let lm = LandmarkSet::new("src", l, r, mo).map_err(|e| format!("case {case}: {e}"))?;
        let solved = solve_similarity(&lm, &tpl).map_err(|e| format!("case {case}: {e}"))?;

        for p in [fit, solved] {
            let got = [p.a, p.b, p.m_x, p.m_y];
            for (g, w) in got.iter().zip(&want) {
                worst_param = worst_param.max((g - w).abs() / w.abs().max(1.0));
                if !rel_close(*g, *w, 1e-6) {
                    return Err(format!("case {case}: recovered {got:?}, expected {want:?}"));
                }
            }
            if !rel_close(p.scale(), s, 1e-6) {
                return Err(format!("case {case}: scale {} vs {s}", p.scale()));
            }
        }

        let noisy = dst.map(|[x, y]| [x + rng.random_range(-3.0..3.0), y + rng.random_range(-3.0..3.0)]);
        let p = fit_similarity(&src, &noisy).map_err(|e| format!("case {case}: {e}"))?;
        let ortho = normal_residual(&src, &noisy, &p);
        let worst = ortho.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        worst_ortho = worst_ortho.max(worst);
        if worst > 1e-6 {
            return Err(format!("case {case}: Aᵀr = {ortho:?}"));
        }
    }
    Ok(format!(
        "{cases} transforms, max relative parameter error {worst_param:.1e}, max |Aᵀr| {worst_ortho:.1e}"
    ))
}

// ---------------------------------------------------------------- convolution

/// Direct seven-loop grouped convolution.
pub fn naive_conv(x: &[f64], shape: [usize; 4], weight: &[f64], bias: &[f64], s: &ConvSpec) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = shape;
    let [kh, kw] = s.kernel;
    let oh = (h + 2 * s.padding - kh) / s.stride + 1;
    let ow = (w + 2 * s.padding - kw) / s.stride + 1;
    let cin_g = c / s.groups;
    let cout_g = s.out_channels / s.groups;
    let mut out = vec![0.0; n * s.out_channels * oh * ow];
    for ni in 0..n {
        for o in 0..s.out_channels {
            let g = o / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for ci in 0..cin_g {
                        let ic = g * cin_g + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                                let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ic) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((o * cin_g + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * s.out_channels + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, s.out_channels, oh, ow])
}

pub fn random_conv_case<R: Rng>(rng: &mut R) -> (ConvSpec, [usize; 4]) {
    let groups = rng.random_range(1..=4);
    let kernel = [rng.random_range(1..=3), rng.random_range(1..=3)];
    let spec = ConvSpec {
        in_channels: groups * rng.random_range(1..=4),
        out_channels: groups * rng.random_range(1..=4),
        kernel,
        stride: rng.random_range(1..=3),
        padding: rng.random_range(0..=2),
        groups,
    };
    let shape = [
        rng.random_range(1..=3),
        spec.in_channels,
        rng.random_range(kernel[0]..=kernel[0] + 9),
        rng.random_range(kernel[1]..=kernel[1] + 9),
    ];
    (spec, shape)
}

fn random_conv<T: Scalar, R: Rng>(rng: &mut R, spec: ConvSpec) -> Conv2d<T> {
    let weight = normal_vec(rng, spec.param_count() - spec.out_channels);
    let bias = normal_vec(rng, spec.out_channels);
    Conv2d::from_parts(spec, cast(&weight), cast(&bias)).expect("valid parts")
}

fn cast<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Grouped convolution against the direct loop (f32 and f64) and against
/// per-group convolutions on channel slices.
pub fn conv_oracle(cases: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (spec, shape) = random_conv_case(&mut rng);
        let x = normal_vec(&mut rng, shape.iter().product());
        let layer: Conv2d<f64> = random_conv(&mut rng, spec);
        let (want, want_shape) = naive_conv(&x, shape, &layer.weight, &layer.bias, &spec);

        let x64 = Tensor::from_vec(shape, x.clone()).unwrap();
        let got64 = layer.forward(&x64).map_err(|e| format!("case {case}: {e}"))?;
        let layer32 = Conv2d::<f32>::from_parts(spec, cast(&layer.weight), cast(&layer.bias)).unwrap();
        let got32 = layer32.forward(&Tensor::from_vec(shape, cast(&x)).unwrap()).unwrap();
        if got64.shape() != want_shape || got32.shape() != want_shape {
            return Err(format!("case {case}: shape {:?} vs {want_shape:?} for {spec:?}", got64.shape()));
        }
        for (i, w) in want.iter().enumerate() {
            let e64 = (got64.data()[i] - w).abs();
            let e32 = (f64::from(got32.data()[i]) - w).abs() / w.abs().max(1.0);
            worst = worst.max(e32);
            if e64 > 1e-10 || e32 > 1e-5 {
                return Err(format!("case {case}: {spec:?} output {i}: f64 err {e64:e}, f32 err {e32:e}"));
            }
        }

        let [n, c, h, w] = shape;
        let cin_g = c / spec.groups;
        let cout_g = spec.out_channels / spec.groups;
        let [_, _, oh, ow] = want_shape;
        let wlen = cin_g * spec.kernel[0] * spec.kernel[1];
        for g in 0..spec.groups {
            let sub_spec = ConvSpec {
                in_channels: cin_g,
                out_channels: cout_g,
                groups: 1,
                ..spec
            };
            let sub = Conv2d::<f64>::from_parts(
                sub_spec,
                layer.weight[g * cout_g * wlen..(g + 1) * cout_g * wlen].to_vec(),
                layer.bias[g * cout_g..(g + 1) * cout_g].to_vec(),
            )
            .unwrap();
            let mut xs = Vec::with_capacity(n * cin_g * h * w);
            for ni in 0..n {
                xs.extend_from_slice(&x[(ni * c + g * cin_g) * h * w..(ni * c + (g + 1) * cin_g) * h * w]);
            }
            let ys = sub.forward(&Tensor::from_vec([n, cin_g, h, w], xs).unwrap()).unwrap();
            for ni in 0..n {
                let full = &got64.data()
                    [(ni * spec.out_channels + g * cout_g) * oh * ow..(ni * spec.out_channels + (g + 1) * cout_g) * oh * ow];
                let part = &ys.data()[ni * cout_g * oh * ow..(ni + 1) * cout_g * oh * ow];
                if full.iter().zip(part).any(|(a, b)| (a - b).abs() > 1e-12) {
                    return Err(format!("case {case}: group {g} slice differs for {spec:?}"));
                }
            }
        }
    }
    Ok(format!("{cases} random grouped convolutions, max f32 relative error {worst:.1e}"))
}

/// Channel shuffle against the explicit table `out[j·g + k] = in[k·n + j]`
/// and its backward pass as the inverse permutation.
pub fn shuffle_oracle(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut cases = 0;
    for groups in 1..=6 {
        for per in 1..=6 {
            let c = groups * per;
            let perm = shuffle_permutation(c, groups).map_err(|e| e.to_string())?;
            for j in 0..per {
                for k in 0..groups {
                    if perm[j * groups + k] != k * per + j {
                        return Err(format!("c={c} g={groups}: perm[{}] = {}", j * groups + k, perm[j * groups + k]));
                    }
                }
            }
            let shape = [2, c, 3, 2];
            let x = Tensor::<f64>::from_vec(shape, normal_vec(&mut rng, 2 * c * 6)).unwrap();
            let y = channel_shuffle(&x, groups).unwrap();
            for ni in 0..2 {
                for (out_c, &in_c) in perm.iter().enumerate() {
                    let a = &y.data()[(ni * c + out_c) * 6..][..6];
                    let b = &x.data()[(ni * c + in_c) * 6..][..6];
                    if a != b {
                        return Err(format!("c={c} g={groups}: channel {out_c} is not input {in_c}"));
                    }
                }
            }
            let layer = ChannelShuffle { groups };
            if layer.backward(&y).unwrap() != x {
                return Err(format!("c={c} g={groups}: backward does not invert forward"));
            }
            if channel_shuffle(&y, per).unwrap() != x {
                return Err(format!("c={c} g={groups}: shuffling by n = c/g does not invert"));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} channel/group combinations match the permutation table and invert"))
}

// ---------------------------------------------------------------- gradients

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero gradients
/// from turning rounding noise into large relative errors.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Central difference of `f` with respect to coordinate `i` of `point`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, point: &[f64], i: usize) -> f64 {
    let mut p = point.to_vec();
    p[i] = point[i] + FD_EPS;
    let up = f(&p);
    p[i] = point[i] - FD_EPS;
    let down = f(&p);
    (up - down) / (2.0 * FD_EPS)
}

/// Compares `analytic` against central differences at `indices`, returning
/// the largest relative error.
pub fn grad_check(
    name: &str,
    analytic: &[f64],
    point: &[f64],
    indices: &[usize],
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for &i in indices {
        let numeric = central_diff(f, point, i);
        let e = rel_err(analytic[i], numeric);
        worst = worst.max(e);
        if e >= GRAD_TOL {
            return Err(format!("{name}[{i}]: analytic {} vs numeric {numeric} (rel {e:.2e})", analytic[i]));
        }
    }
    Ok(worst)
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn sample_indices<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return all(n);
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// Checks one layer: loss is `Σ dy ⊙ layer(x)`, differentiated with respect
/// to the input and every parameter tensor.
fn layer_check<R: Rng>(name: &str, layer: &Layer<f64>, x: &[f64], shape: [usize; 4], rng: &mut R) -> Result<f64, String> {
    let xt = Tensor::from_vec(shape, x.to_vec()).unwrap();
    let y = layer.forward(&xt).map_err(|e| e.to_string())?;
    let dy_vals = normal_vec(rng, y.data().len());
    let dy = Tensor::from_vec(y.shape(), dy_vals.clone()).unwrap();
    let mut grads: Vec<Vec<f64>> = layer.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let dx = layer.backward(&xt, &dy, &mut grads).map_err(|e| e.to_string())?;
    let dot = |t: &Tensor<f64>| t.data().iter().zip(&dy_vals).map(|(a, b)| a * b).sum::<f64>();

    let idx = sample_indices(rng, x.len(), 60);
    let mut worst = grad_check(&format!("{name} input"), dx.data(), x, &idx, &mut |p| {
        dot(&layer.forward(&Tensor::from_vec(shape, p.to_vec()).unwrap()).unwrap())
    })?;
    for (k, g) in grads.iter().enumerate() {
        let point = layer.params()[k].to_vec();
        let idx = sample_indices(rng, point.len(), 60);
        let e = grad_check(&format!("{name} param {k}"), g, &point, &idx, &mut |p| {
            let mut l = layer.clone();
            l.params_mut()[k].copy_from_slice(p);
            dot(&l.forward(&xt).unwrap())
        })?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Values bounded away from zero so the PReLU kink is never crossed.
fn away_from_zero<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Every layer's backward pass, the AM-Softmax gradient, and a small
/// four-stage network against 64-bit central finite differences.
pub fn gradient_oracle(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    let mut checked = Vec::new();

    for case in 0..6 {
        let (spec, shape) = random_conv_case(&mut rng);
        let layer = Layer::Conv(random_conv::<f64, _>(&mut rng, spec));
        let x = normal_vec(&mut rng, shape.iter().product());
        worst = worst.max(layer_check(&format!("conv case {case}"), &layer, &x, shape, &mut rng)?);
    }
    checked.push("conv");

    let shape = [2, 4, 3, 3];
    let slopes = normal_vec(&mut rng, 4);
    let layer = Layer::PRelu(PRelu { slopes });
    let x = away_from_zero(&mut rng, 72);
    worst = worst.max(layer_check("prelu", &layer, &x, shape, &mut rng)?);
    checked.push("prelu");

    let shape = [3, 2, 2, 3];
    let mut lin = Linear::<f64>::zeros(12, 5);
    lin.weight = normal_vec(&mut rng, 60);
    lin.bias = normal_vec(&mut rng, 5);
    let x = normal_vec(&mut rng, 36);
    worst = worst.max(layer_check("linear", &Layer::Linear(lin), &x, shape, &mut rng)?);
    checked.push("linear");

    let shape = [3, 6, 1, 1];
    let x = normal_vec(&mut rng, 18);
    worst = worst.max(layer_check("l2norm", &Layer::L2Normalize(L2Normalize), &x, shape, &mut rng)?);
    checked.push("l2norm");

    let shape = [2, 6, 2, 2];
    let x = normal_vec(&mut rng, 48);
    worst = worst.max(layer_check("shuffle", &Layer::Shuffle(ChannelShuffle { groups: 3 }), &x, shape, &mut rng)?);
    checked.push("shuffle");

    for (scale, margin) in [(30.0, 0.35), (4.0, 0.2), (1.0, 0.0)] {
        let (classes, dim, batch) = (5, 6, 4);
        let cfg = LossConfig::random(scale, margin, classes, dim, &mut rng).unwrap();
        let emb: Vec<f64> = (0..batch)
            .flat_map(|_| primid_core::nnet::l2_normalize(&normal_vec(&mut rng, dim)).unwrap())
            .collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let out = am_softmax_loss(&emb, &labels, &cfg).unwrap();
        let e = grad_check("am-softmax embeddings", &out.grad_embeddings, &emb, &all(emb.len()), &mut |p| {
            am_softmax_loss(p, &labels, &cfg).unwrap().loss
        })?;
        worst = worst.max(e);
        let e = grad_check(
            "am-softmax weights",
            &out.grad_weights,
            &cfg.class_weights,
            &all(cfg.class_weights.len()),
            &mut |p| {
                let mut c = cfg.clone();
                c.class_weights.copy_from_slice(p);
                am_softmax_loss(&emb, &labels, &c).unwrap().loss
            },
        )?;
        worst = worst.max(e);
    }
    checked.push("am-softmax");

    let cfg = PrimNetConfig {
        input: [3, 16, 12],
        stages: vec![StageSpec::new(4, 1), StageSpec::new(8, 2), StageSpec::new(8, 2), StageSpec::new(4, 2)],
        embed_dim: 6,
        ..Default::default()
    };
    let mut net = build_primnet(&cfg).map_err(|e| e.to_string())?.network().cast::<f64>();
    let head = LossConfig::random(8.0, 0.35, 3, 6, &mut rng).unwrap();
    let labels = [0usize, 2];
    let x = Tensor::from_vec([2, 3, 16, 12], normal_vec(&mut rng, 2 * 3 * 16 * 12)).unwrap();
    let out = net.forward_train(&x).unwrap();
    let loss = am_softmax_loss(out.data(), &labels, &head).unwrap();
    let grads = net.backward(&Tensor::from_vec(out.shape(), loss.grad_embeddings).unwrap()).unwrap();
    let flat_grads: Vec<f64> = grads.concat();
    let flat_params: Vec<f64> = net.params().concat();
    let idx = sample_indices(&mut rng, flat_params.len(), 20);
    let e = grad_check("network params", &flat_grads, &flat_params, &idx, &mut |p| {
        let mut n = net.clone();
        let mut offset = 0;
        for t in n.params_mut() {
            t.copy_from_slice(&p[offset..offset + t.len()]);
            offset += t.len();
        }
        am_softmax_loss(n.forward(&x).unwrap().data(), &labels, &head).unwrap().loss
    })?;
    worst = worst.max(e);
    checked.push("4-stage network");

    Ok(format!(
        "{} match central differences, max relative error {worst:.1e}",
        checked.join(", ")
    ))
}

// ---------------------------------------------------------------- metrics

/// Exact rational FAR `1/den`.
#[derive(Clone, Copy, Debug)]
pub struct Far {
    pub den: usize,
}

impl Far {
    pub fn value(self) -> f64 {
        1.0 / self.den as f64
    }
}

/// Scans every observed score in ascending order and returns the first at
/// which at most `far` of the negatives are accepted; if none qualifies, the
/// next float above the maximum.
pub fn brute_threshold(negatives: &[f32], positives: &[f32], far: Far) -> Option<f32> {
    if negatives.len() < far.den {
        return None;
    }
    let mut candidates: Vec<f32> = negatives.iter().chain(positives).copied().collect();
    candidates.sort_by(f32::total_cmp);
    for &c in &candidates {
        let accepted = negatives.iter().filter(|&&s| s >= c).count();
        if accepted * far.den <= negatives.len() {
            return Some(c);
        }
    }
    Some(candidates.last().unwrap().next_up())
}

pub fn brute_tar(scores: &ScoreSet, far: Far) -> Option<(f64, f32)> {
    let t = brute_threshold(&scores.impostor, &scores.genuine, far)?;
    let hits = scores.genuine.iter().filter(|&&g| g >= t).count();
    Some((hits as f64 / scores.genuine.len() as f64, t))
}

pub fn brute_cosine(a: &Embedding, b: &Embedding) -> f32 {
    let mut dot = 0.0f64;
    for i in 0..a.dim() {
        dot += f64::from(a.as_slice()[i]) * f64::from(b.as_slice()[i]);
    }
    dot.clamp(-1.0, 1.0) as f32 + 0.0
}

fn brute_template(probe: &Embedding, template: &[&Embedding]) -> f32 {
    let mut best = f32::NEG_INFINITY;
    for e in template {
        let s = brute_cosine(probe, e);
        if s > best {
            best = s;
        }
    }
    best
}

/// Trial gallery: every image except the trial's probe for each individual.
fn trial_gallery<'a>(subjects: &[&'a Subject], probes: &[usize]) -> Vec<(&'a str, Vec<&'a Embedding>)> {
    subjects
        .iter()
        .zip(probes)
        .map(|(s, &p)| {
            let t = s.images.iter().enumerate().filter(|(i, _)| *i != p).map(|(_, e)| &e.embedding).collect();
            (s.id.as_str(), t)
        })
        .collect()
}

/// Nearest template by exhaustive comparison; ties go to the smaller id.
fn brute_top1<'a>(probe: &Embedding, gallery: &[(&'a str, Vec<&Embedding>)]) -> (&'a str, f32) {
    let mut best: Option<(&str, f32)> = None;
    for (id, t) in gallery {
        let s = brute_template(probe, t);
        best = match best {
            Some((bid, bs)) if bs > s || (bs == s && bid < *id) => Some((bid, bs)),
            _ => Some((id, s)),
        };
    }
    best.unwrap()
}

fn eligible(test: &[Subject]) -> Vec<&Subject> {
    test.iter().filter(|s| s.images.len() >= 2).collect()
}

pub fn brute_closed_set(test: &[Subject], trials: usize, seed: u64) -> f64 {
    let subjects = eligible(test);
    let sizes: Vec<usize> = subjects.iter().map(|s| s.images.len()).collect();
    let mut total = 0.0;
    for trial in 0..trials {
        let probes = trial_probes(seed, trial, &sizes);
        let gallery = trial_gallery(&subjects, &probes);
        let correct = subjects
            .iter()
            .zip(&probes)
            .filter(|(s, &p)| brute_top1(&s.images[p].embedding, &gallery).0 == s.id)
            .count();
        total += correct as f64 / subjects.len() as f64;
    }
    total / trials as f64
}

/// Two passes per trial: calibrate on distractor top-1 scores, then count
/// mated probes that are rank-1 correct at or above the threshold.
pub fn brute_open_set(test: &[Subject], distractors: &[Subject], far: Far, trials: usize, seed: u64) -> Option<f64> {
    let subjects = eligible(test);
    let sizes: Vec<usize> = subjects.iter().map(|s| s.images.len()).collect();
    let mut total = 0.0;
    for trial in 0..trials {
        let probes = trial_probes(seed, trial, &sizes);
        let gallery = trial_gallery(&subjects, &probes);
        let negatives: Vec<f32> = distractors
            .iter()
            .flat_map(|d| &d.images)
            .map(|d| brute_top1(&d.embedding, &gallery).1)
            .collect();
        let mated: Vec<(bool, f32)> = subjects
            .iter()
            .zip(&probes)
            .map(|(s, &p)| {
                let (id, score) = brute_top1(&s.images[p].embedding, &gallery);
                (id == s.id, score)
            })
            .collect();
        let positives: Vec<f32> = mated.iter().map(|m| m.1).collect();
        let t = brute_threshold(&negatives, &positives, far)?;
        total += mated.iter().filter(|&&(ok, s)| ok && s >= t).count() as f64 / mated.len() as f64;
    }
    Some(total / trials as f64)
}

pub fn random_embedding<R: Rng>(rng: &mut R, dim: usize) -> Embedding {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(e) = Embedding::normalized(&v) {
            return e;
        }
    }
}

fn random_scores<R: Rng>(rng: &mut R, n: usize, lo: f32, quantize: bool) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(lo..=1.0);
            if quantize {
                (v * 20.0).round() / 20.0
            } else {
                v
            }
        })
        .collect()
}

/// Clustered individuals with occasional single-image individuals and
/// embeddings copied across identities to force score ties.
pub fn random_subjects<R: Rng>(rng: &mut R, prefix: &str, count: usize, max_images: usize, dim: usize) -> Vec<Subject> {
    let mut pool: Vec<Embedding> = Vec::new();
    (0..count)
        .map(|s| {
            let centre = random_embedding(rng, dim);
            let n = rng.random_range(1..=max_images);
            let images = (0..n)
                .map(|i| {
                    let embedding = if !pool.is_empty() && rng.random_bool(0.15) {
                        pool[rng.random_range(0..pool.len())].clone()
                    } else {
                        let noisy: Vec<f32> = centre
                            .as_slice()
                            .iter()
                            .map(|c| c + rng.random_range(-0.6..0.6))
                            .collect();
                        Embedding::normalized(&noisy).unwrap_or_else(|_| centre.clone())
                    };
                    pool.push(embedding.clone());
                    LabeledEmbedding {
                        image_ref: format!("{prefix}{s}_{i}"),
                        embedding,
                    }
                })
                .collect();
            Subject {
                id: format!("{prefix}{s:02}"),
                images,
            }
        })
        .collect()
}

/// `tar_at_far`, `closed_set_rank1` and `open_set_dir` against their
/// brute-force counterparts on random instances, plus TAR monotonicity in
/// the FAR target.
pub fn metric_oracle(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let far1 = Far { den: 100 };
    let far01 = Far { den: 1000 };
    for case in 0..instances {
        let quantize = rng.random_bool(0.5);
        let n_imp = rng.random_range(100..=900);
        let n_gen = rng.random_range(1..=100);
        let scores = ScoreSet {
            genuine: random_scores(&mut rng, n_gen, -0.2, quantize),
            impostor: random_scores(&mut rng, n_imp, -1.0, quantize),
        };
        let got = tar_at_far(&scores, FAR_1).map_err(|e| format!("case {case}: {e}"))?;
        let want = brute_tar(&scores, far1).unwrap();
        if (got.tar, got.threshold) != want {
            return Err(format!("case {case}: tar_at_far {got:?} vs brute force {want:?}"));
        }
        if tar_at_far(&scores, FAR_01).is_ok() {
            return Err(format!("case {case}: {n_imp} impostors accepted at 0.1% FAR"));
        }

        let (n_gen, n_imp) = (rng.random_range(1..=50), rng.random_range(1000..=1200));
        let big = ScoreSet {
            genuine: random_scores(&mut rng, n_gen, -0.2, quantize),
            impostor: random_scores(&mut rng, n_imp, -1.0, quantize),
        };
        let t1 = tar_at_far(&big, FAR_1).unwrap();
        let t01 = tar_at_far(&big, FAR_01).unwrap();
        if (t01.tar, t01.threshold) != brute_tar(&big, far01).unwrap() {
            return Err(format!("case {case}: 0.1% FAR disagrees with brute force"));
        }
        if t1.tar < t01.tar {
            return Err(format!("case {case}: TAR@1% {} < TAR@0.1% {}", t1.tar, t01.tar));
        }

        let dim = rng.random_range(3..=8);
        let individuals = rng.random_range(2..=7);
        let test = random_subjects(&mut rng, "g", individuals, 5, dim);
        let trials = 5;
        let trial_seed = rng.random();
        if eligible(&test).is_empty() {
            if closed_set_rank1(&test, trials, trial_seed).is_ok() {
                return Err(format!("case {case}: closed set accepted a gallery without eligible individuals"));
            }
            continue;
        }
        let got = closed_set_rank1(&test, trials, trial_seed).map_err(|e| format!("case {case}: {e}"))?;
        let want = brute_closed_set(&test, trials, trial_seed);
        if got.mean != want {
            return Err(format!("case {case}: closed-set {} vs brute force {want}", got.mean));
        }

        let (far, count) = if rng.random_bool(0.5) {
            (far1, rng.random_range(100..=160))
        } else {
            (Far { den: 10 }, rng.random_range(10..=40))
        };
        let mut distractors = random_subjects(&mut rng, "d", count, 1, dim);
        distractors.iter_mut().for_each(|d| d.images.truncate(1));
        let got = open_set_dir(&test, &distractors, far.value(), trials, trial_seed)
            .map_err(|e| format!("case {case}: {e}"))?;
        let want = brute_open_set(&test, &distractors, far, trials, trial_seed).unwrap();
        if got.dir.mean != want {
            return Err(format!("case {case}: open-set DIR {} vs brute force {want}", got.dir.mean));
        }
    }
    Ok(format!(
        "{instances} random instances each: tar_at_far, closed_set_rank1 and open_set_dir equal brute force; TAR@1% >= TAR@0.1%"
    ))
}

// ---------------------------------------------------------------- protocol

/// 25 individuals with 25 distinct images each.
pub fn synthetic_fold<R: Rng>(rng: &mut R, individuals: usize, images: usize) -> Vec<Subject> {
    (0..individuals)
        .map(|s| Subject {
            id: format!("ind{s:02}"),
            images: (0..images)
                .map(|i| LabeledEmbedding {
                    image_ref: format!("ind{s:02}_{i:02}.png"),
                    embedding: random_embedding(rng, 16),
                })
                .collect(),
        })
        .collect()
}

pub fn protocol_counts_check(seed: u64) -> Check {
    let mut rng = rng(seed);
    let fold = synthetic_fold(&mut rng, 25, 25);
    let run = verification_scores(&fold).map_err(|e| e.to_string())?;
    let (g, i) = (run.scores.genuine.len(), run.scores.impostor.len());
    if g != 625 || i != 625 * 24 {
        return Err(format!("{g} genuine / {i} impostor scores, expected 625 / 15000"));
    }
    Ok(format!("25x25 fold: {g} genuine, {i} impostor (= 625 x 24)"))
}
