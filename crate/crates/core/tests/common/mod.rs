//! Independent oracles and random-instance builders shared by the
//! integration and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use sgconv::grouping::FilterGroups;
use sgconv::model::{Activation, Layer, Model};
use sgconv::pruning::PruneMask;
use sgconv::tensor::{ConvWeights, FcWeights, Tensor};

/// Random assignment of `n` filters to `g` non-empty groups.
pub fn random_groups(rng: &mut impl Rng, n: usize, g: usize) -> FilterGroups {
    let g = g.clamp(1, n);
    let mut assignment: Vec<usize> = (0..n).map(|i| if i < g { i } else { rng.random_range(0..g) }).collect();
    for i in (1..n).rev() {
        assignment.swap(i, rng.random_range(0..=i));
    }
    FilterGroups::new(g, assignment).unwrap()
}

/// Mask dead at `(f, j)` for whole groups, each group-channel pair dying with probability `p`.
pub fn random_group_mask(rng: &mut impl Rng, groups: &FilterGroups, c_in: usize, p: f64) -> PruneMask {
    let n = groups.num_filters();
    let dead: Vec<bool> = (0..groups.num_groups() * c_in).map(|_| rng.random_bool(p)).collect();
    let kept = (0..n * c_in)
        .map(|k| !dead[groups.group_of(k / c_in) * c_in + k % c_in])
        .collect();
    PruneMask::from_kept(n, c_in, kept).unwrap()
}

/// Dead connections counted one by one.
pub fn count_dead(mask: &PruneMask) -> usize {
    let mut dead = 0;
    for f in 0..mask.rows() {
        for j in 0..mask.cols() {
            if !mask.is_kept(f, j) {
                dead += 1;
            }
        }
    }
    dead
}

/// Six-loop f64 convolution `[N, C, H, W]` with stride and zero padding.
pub fn naive_conv_f64(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    w: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let (n, c, h, wd) = dims;
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wd + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; n * c_out * oh * ow];
    for b in 0..n {
        for f in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((f * c + ci) * k + ky) * k + kx]
                                    * x[((b * c + ci) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((b * c_out + f) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `|analytic - numeric| <= tol * max(1, |numeric|)`.
pub fn close_rel(analytic: f64, numeric: f64, tol: f64) -> bool {
    (analytic - numeric).abs() <= tol * numeric.abs().max(1.0)
}

/// Central finite difference of `f` at `x[i]`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let up = f(&p);
    p[i] -= 2.0 * h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

pub fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random CNN of 1..=4 layers with at most 32 channels, every compressible
/// layer pruned at group granularity. Returns the model and its input shape.
pub fn random_pruned_model(rng: &mut impl Rng) -> (Model, Vec<usize>) {
    let depth = rng.random_range(1..=4usize);
    let mut c = rng.random_range(1..=8usize);
    let mut h = rng.random_range(5..=9usize);
    let input = vec![c, h, h];
    let mut layers = Vec::new();
    let with_fc = depth == 1 || rng.random_bool(0.5);
    let convs = if with_fc { depth - 1 } else { depth };
    for i in 0..convs {
        let c_out = rng.random_range(1..=32usize);
        let k = if h >= 3 && rng.random_bool(0.7) { 3 } else { 1 };
        let padding = if k == 3 { rng.random_range(0..=1) } else { 0 };
        let stride = if h > 4 { rng.random_range(1..=2) } else { 1 };
        let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Identity };
        let w = random_tensor(rng, vec![c_out, c, k, k]);
        let bias = rng.random_bool(0.7).then(|| random_tensor(rng, vec![c_out]));
        let layer = Layer::conv(format!("conv{i}"), ConvWeights::new(w, stride, padding).unwrap(), bias, act);
        layers.push(layer.with_compress(i > 0));
        h = (h + 2 * padding - k) / stride + 1;
        c = c_out;
    }
    if with_fc {
        let c_in = c * h * h;
        let c_out = rng.random_range(1..=32usize);
        let w = random_tensor(rng, vec![c_out, c_in]);
        let bias = rng.random_bool(0.7).then(|| random_tensor(rng, vec![c_out]));
        layers.push(Layer::fc("fc", FcWeights::new(w).unwrap(), bias, Activation::Identity));
    }
    for l in layers.iter_mut().filter(|l| l.is_compressible()) {
        let (c_out, c_in, _) = l.connection_dims().unwrap();
        let g = rng.random_range(1..=c_out.min(6));
        let groups = random_groups(rng, c_out, g);
        let p = rng.random_range(0.0..0.9);
        *l.mask_mut().unwrap() = random_group_mask(rng, &groups, c_in, p);
        l.groups = Some(groups);
        l.apply_mask();
    }
    (Model::new(layers, Some(input.clone())).unwrap(), input)
}

/// Brute-force minimum of the within-group sum of Euclidean distances to
/// the group mean over every partition of the rows into two non-empty groups.
pub fn brute_force_two_groups(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let d = rows[0].len();
    let mut best = f64::INFINITY;
    // fixing row 0 in group 0 enumerates each unordered partition once
    for bits in 0u32..(1 << (n - 1)) {
        let labels: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { ((bits >> (i - 1)) & 1) as usize }).collect();
        if labels.iter().all(|&l| l == 0) {
            continue;
        }
        let mut total = 0.0;
        for g in 0..2 {
            let members: Vec<&Vec<f64>> = rows.iter().zip(&labels).filter(|(_, &l)| l == g).map(|(r, _)| r).collect();
            let mean: Vec<f64> = (0..d)
                .map(|j| members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64)
                .collect();
            total += members
                .iter()
                .map(|r| r.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .sum::<f64>();
        }
        best = best.min(total);
    }
    best
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Step and relative tolerance of the finite-difference gradient checks.
pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

/// Compare `conv2d_backward` on one random instance with central finite
/// differences of `sum(R * conv(x, w) + R * b)` evaluated in f64. Returns the
/// first mismatch.
pub fn conv_gradcheck(rng: &mut impl Rng) -> Result<(), String> {
    let n = rng.random_range(1..=2usize);
    let c = rng.random_range(1..=4usize);
    let c_out = rng.random_range(1..=5usize);
    let k = [1usize, 2, 3][rng.random_range(0..3)];
    let h = rng.random_range(k..=k + 4);
    let stride = rng.random_range(1..=2usize);
    let padding = rng.random_range(0..=1usize);
    let x = random_tensor(rng, vec![n, c, h, h]);
    let w = ConvWeights::new(random_tensor(rng, vec![c_out, c, k, k]), stride, padding).unwrap();
    let (oh, ow) = w.output_hw(h, h).unwrap();
    let r = random_tensor(rng, vec![n, c_out, oh, ow]);
    let grads = sgconv::tensor::conv2d_backward(&r, &x, &w).unwrap();

    let rd = to_f64(r.data());
    let xd = to_f64(x.data());
    let wd = to_f64(w.values.data());
    let dims = (n, c, h, h);
    let loss_w = |wv: &[f64]| {
        let (y, _, _) = naive_conv_f64(&xd, dims, wv, c_out, k, stride, padding);
        y.iter().zip(&rd).map(|(a, b)| a * b).sum::<f64>()
    };
    let loss_x = |xv: &[f64]| {
        let (y, _, _) = naive_conv_f64(xv, dims, &wd, c_out, k, stride, padding);
        y.iter().zip(&rd).map(|(a, b)| a * b).sum::<f64>()
    };
    let plane = oh * ow;
    let loss_b = |bv: &[f64]| {
        rd.iter().enumerate().map(|(i, r)| r * bv[(i / plane) % c_out]).sum::<f64>()
    };
    for (name, f, at, analytic) in [
        ("weight", &loss_w as &dyn Fn(&[f64]) -> f64, wd.clone(), grads.weight.data()),
        ("input", &loss_x, xd.clone(), grads.input.data()),
        ("bias", &loss_b, vec![0.0; c_out], grads.bias.data()),
    ] {
        for i in 0..at.len() {
            let num = central_diff(f, &at, i, FD_STEP);
            if !close_rel(analytic[i] as f64, num, FD_TOL) {
                return Err(format!("conv {name}[{i}]: analytic {} vs numeric {num}", analytic[i]));
            }
        }
    }
    Ok(())
}

/// Same check for `fc_backward` with `sum(R * (x W^T + b))`.
pub fn fc_gradcheck(rng: &mut impl Rng) -> Result<(), String> {
    let n = rng.random_range(1..=4usize);
    let c_in = rng.random_range(1..=12usize);
    let c_out = rng.random_range(1..=6usize);
    let x = random_tensor(rng, vec![n, c_in]);
    let w = FcWeights::new(random_tensor(rng, vec![c_out, c_in])).unwrap();
    let r = random_tensor(rng, vec![n, c_out]);
    let grads = sgconv::tensor::fc_backward(&r, &x, &w).unwrap();

    let rd = to_f64(r.data());
    let xd = to_f64(x.data());
    let wd = to_f64(w.values.data());
    let loss = |xv: &[f64], wv: &[f64], bv: &[f64]| {
        let mut s = 0.0;
        for b in 0..n {
            for o in 0..c_out {
                let y: f64 = (0..c_in).map(|i| xv[b * c_in + i] * wv[o * c_in + i]).sum::<f64>() + bv[o];
                s += y * rd[b * c_out + o];
            }
        }
        s
    };
    let zero_b = vec![0.0; c_out];
    let loss_w = |wv: &[f64]| loss(&xd, wv, &zero_b);
    let loss_x = |xv: &[f64]| loss(xv, &wd, &zero_b);
    let loss_b = |bv: &[f64]| loss(&xd, &wd, bv);
    for (name, f, at, analytic) in [
        ("weight", &loss_w as &dyn Fn(&[f64]) -> f64, wd.clone(), grads.weight.data()),
        ("input", &loss_x, xd.clone(), grads.input.data()),
        ("bias", &loss_b, zero_b.clone(), grads.bias.data()),
    ] {
        for i in 0..at.len() {
            let num = central_diff(f, &at, i, FD_STEP);
            if !close_rel(analytic[i] as f64, num, FD_TOL) {
                return Err(format!("fc {name}[{i}]: analytic {} vs numeric {num}", analytic[i]));
            }
        }
    }
    Ok(())
}
