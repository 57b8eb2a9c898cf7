//! Dense f32 tensors and the forward/backward kernels for regular convolution,
//! fully-connected and diverse group convolution layers.
//!
//! Convolution weights are stored `(C_out, C_in, k, k)` so that one
//! (filter, input channel) connection is a contiguous `k * k` run. All
//! accumulation is f32, left to right over `(channel, ky, kx)`, starting from
//! zero, with the bias added last.

use crate::deploy::GroupConvPlan;
use crate::error::{Error, Result};

/// Row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret the same data under a new shape with equal element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub(crate) fn dims4(&self, context: &str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                context,
                format!("expected rank-4 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub(crate) fn dims2(&self, context: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, f] => Ok((n, f)),
            _ => Err(Error::shape(
                context,
                format!("expected rank-2 tensor, got shape {:?}", self.shape),
            )),
        }
    }
}

/// Convolution filter bank `(C_out, C_in, k, k)` with stride and zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub values: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvWeights {
    pub fn new(values: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c_out, c_in, kh, kw) = values.dims4("ConvWeights")?;
        if c_out == 0 || c_in == 0 || kh == 0 || kh != kw {
            return Err(Error::shape(
                "ConvWeights",
                format!("need C_out, C_in >= 1 and square k >= 1, got {:?}", values.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("convolution stride must be >= 1".into()));
        }
        Ok(Self {
            values,
            stride,
            padding,
        })
    }

    pub fn c_out(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.values.shape()[2]
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        conv_output_hw(h, w, self.kernel(), self.stride, self.padding)
    }
}

pub(crate) fn conv_output_hw(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let ph = h + 2 * padding;
    let pw = w + 2 * padding;
    if ph < k || pw < k {
        return Err(Error::shape(
            "convolution",
            format!("input {h}x{w} with padding {padding} is smaller than kernel {k}"),
        ));
    }
    Ok(((ph - k) / stride + 1, (pw - k) / stride + 1))
}

/// Fully-connected weight matrix `(C_out, C_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcWeights {
    pub values: Tensor,
}

impl FcWeights {
    pub fn new(values: Tensor) -> Result<Self> {
        let (c_out, c_in) = values.dims2("FcWeights")?;
        if c_out == 0 || c_in == 0 {
            return Err(Error::shape(
                "FcWeights",
                format!("need C_out, C_in >= 1, got {:?}", values.shape()),
            ));
        }
        Ok(Self { values })
    }

    pub fn c_out(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.values.shape()[1]
    }
}

fn check_bias(bias: Option<&Tensor>, c_out: usize, context: &str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape(
                context,
                format!("bias shape {:?}, expected [{c_out}]", b.shape()),
            ));
        }
    }
    Ok(())
}

/// Geometry shared by the dense and grouped convolution kernels.
#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

/// Direct convolution of one batch element restricted to `channels`.
///
/// `weights` holds `filters` blocks of `channels.len() * k * k` values.
/// `emit(f, pos, acc)` receives the raw accumulation for local filter `f` at
/// flat output position `pos`.
fn conv_core(
    sample: &[f32],
    geom: ConvGeom,
    channels: &[usize],
    weights: &[f32],
    filters: usize,
    mut emit: impl FnMut(usize, usize, f32),
) {
    let ConvGeom {
        h,
        w,
        k,
        stride,
        padding,
        oh,
        ow,
        ..
    } = geom;
    let kk = k * k;
    let block = channels.len() * kk;
    for f in 0..filters {
        let wf = &weights[f * block..(f + 1) * block];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for (ci, &c) in channels.iter().enumerate() {
                    let plane = &sample[c * h * w..(c + 1) * h * w];
                    let wk = &wf[ci * kk..(ci + 1) * kk];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wk[ky * k + kx] * row[ix as usize];
                        }
                    }
                }
                emit(f, oy * ow + ox, acc);
            }
        }
    }
}

/// Regular 2-D convolution `[N, C_in, H, W] -> [N, C_out, H', W']`.
pub fn conv2d_forward(input: &Tensor, w: &ConvWeights, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, c, h, wd) = input.dims4("conv2d_forward input")?;
    if c != w.c_in() {
        return Err(Error::shape(
            "conv2d_forward",
            format!("input has {c} channels, weights expect C_in = {}", w.c_in()),
        ));
    }
    check_bias(bias, w.c_out(), "conv2d_forward")?;
    let (oh, ow) = w.output_hw(h, wd)?;
    let geom = ConvGeom {
        h,
        w: wd,
        k: w.kernel(),
        stride: w.stride,
        padding: w.padding,
        oh,
        ow,
    };
    let c_out = w.c_out();
    let channels: Vec<usize> = (0..c).collect();
    let mut out = vec![0.0f32; n * c_out * oh * ow];
    let bias = bias.map(Tensor::data);
    for b in 0..n {
        let sample = &input.data()[b * c * h * wd..(b + 1) * c * h * wd];
        let dst = &mut out[b * c_out * oh * ow..(b + 1) * c_out * oh * ow];
        conv_core(sample, geom, &channels, w.values.data(), c_out, |f, pos, acc| {
            dst[f * oh * ow + pos] = acc + bias.map_or(0.0, |bv| bv[f]);
        });
    }
    Tensor::new(vec![n, c_out, oh, ow], out)
}

/// Gradients returned by the backward kernels.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Backward pass of [`conv2d_forward`] for upstream gradient `grad_out`.
pub fn conv2d_backward(grad_out: &Tensor, input: &Tensor, w: &ConvWeights) -> Result<Gradients> {
    let (n, c, h, wd) = input.dims4("conv2d_backward input")?;
    if c != w.c_in() {
        return Err(Error::shape(
            "conv2d_backward",
            format!("input has {c} channels, weights expect C_in = {}", w.c_in()),
        ));
    }
    let (oh, ow) = w.output_hw(h, wd)?;
    let c_out = w.c_out();
    if grad_out.shape() != [n, c_out, oh, ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream gradient {:?}, expected {:?}",
                grad_out.shape(),
                [n, c_out, oh, ow]
            ),
        ));
    }
    let k = w.kernel();
    let (stride, pad) = (w.stride as isize, w.padding as isize);
    let wv = w.values.data();
    let go = grad_out.data();
    let x = input.data();
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; wv.len()];
    let mut db = vec![0.0f32; c_out];
    for b in 0..n {
        for f in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = go[((b * c_out + f) * oh + oy) * ow + ox];
                    db[f] += g;
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = oy as isize * stride + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox as isize * stride + kx as isize - pad;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * c + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((f * c + ci) * k + ky) * k + kx;
                                dw[wi] += g * x[xi];
                                dx[xi] += g * wv[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Gradients {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weight: Tensor::new(w.values.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![c_out], db)?,
    })
}

/// Fully-connected layer `y = W x (+ b)` over a `[N, C_in]` batch.
pub fn fc_forward(input: &Tensor, w: &FcWeights, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, f) = input.dims2("fc_forward input")?;
    let (c_out, c_in) = (w.c_out(), w.c_in());
    if f != c_in {
        return Err(Error::shape(
            "fc_forward",
            format!("input width {f}, weights expect C_in = {c_in}"),
        ));
    }
    check_bias(bias, c_out, "fc_forward")?;
    let wv = w.values.data();
    let x = input.data();
    let mut out = Vec::with_capacity(n * c_out);
    for b in 0..n {
        let xb = &x[b * c_in..(b + 1) * c_in];
        for o in 0..c_out {
            let row = &wv[o * c_in..(o + 1) * c_in];
            let mut acc = 0.0f32;
            for (wi, xi) in row.iter().zip(xb) {
                acc += wi * xi;
            }
            out.push(acc + bias.map_or(0.0, |bv| bv.data()[o]));
        }
    }
    Tensor::new(vec![n, c_out], out)
}

/// Backward pass of [`fc_forward`].
pub fn fc_backward(grad_out: &Tensor, input: &Tensor, w: &FcWeights) -> Result<Gradients> {
    let (n, f) = input.dims2("fc_backward input")?;
    let (c_out, c_in) = (w.c_out(), w.c_in());
    if f != c_in || grad_out.shape() != [n, c_out] {
        return Err(Error::shape(
            "fc_backward",
            format!(
                "input {:?}, upstream {:?}, weights {:?}",
                input.shape(),
                grad_out.shape(),
                w.values.shape()
            ),
        ));
    }
    let wv = w.values.data();
    let x = input.data();
    let go = grad_out.data();
    let mut dx = vec![0.0f32; n * c_in];
    let mut dw = vec![0.0f32; c_out * c_in];
    let mut db = vec![0.0f32; c_out];
    for b in 0..n {
        for o in 0..c_out {
            let g = go[b * c_out + o];
            db[o] += g;
            for j in 0..c_in {
                dw[o * c_in + j] += g * x[b * c_in + j];
                dx[b * c_in + j] += g * wv[o * c_in + j];
            }
        }
    }
    Ok(Gradients {
        input: Tensor::new(vec![n, c_in], dx)?,
        weight: Tensor::new(vec![c_out, c_in], dw)?,
        bias: Tensor::new(vec![c_out], db)?,
    })
}

/// Diverse group convolution: each plan group gathers its input channels,
/// convolves them with its own dense block, and scatters the results back to
/// the original filter positions.
///
/// `blocks[i]` has shape `(|filters_i|, |channels_i|, k, k)`. Rank-2 inputs are
/// treated as `[N, C, 1, 1]` (the fully-connected case) and produce a rank-2
/// output.
pub fn group_conv_forward(
    input: &Tensor,
    plan: &GroupConvPlan,
    blocks: &[Tensor],
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    plan.validate()?;
    if blocks.len() != plan.groups.len() {
        return Err(Error::shape(
            "group_conv_forward",
            format!("{} blocks for {} groups", blocks.len(), plan.groups.len()),
        ));
    }
    for (i, (g, blk)) in plan.groups.iter().zip(blocks).enumerate() {
        let want = [g.filters.len(), g.channels.len(), plan.kernel, plan.kernel];
        if blk.shape() != want {
            return Err(Error::shape(
                "group_conv_forward",
                format!("block {i} has shape {:?}, expected {want:?}", blk.shape()),
            ));
        }
    }
    check_bias(bias, plan.c_out, "group_conv_forward")?;
    if stride == 0 {
        return Err(Error::InvalidArgument("convolution stride must be >= 1".into()));
    }

    let flat = input.rank() == 2;
    let (n, c, h, wd) = if flat {
        let (n, f) = input.dims2("group_conv_forward input")?;
        (n, f, 1, 1)
    } else {
        input.dims4("group_conv_forward input")?
    };
    if c != plan.c_in {
        return Err(Error::shape(
            "group_conv_forward",
            format!("input has {c} channels, plan expects C_in = {}", plan.c_in),
        ));
    }
    let (oh, ow) = conv_output_hw(h, wd, plan.kernel, stride, padding)?;
    let geom = ConvGeom {
        h,
        w: wd,
        k: plan.kernel,
        stride,
        padding,
        oh,
        ow,
    };
    let c_out = plan.c_out;
    let bias = bias.map(Tensor::data);
    let mut out = vec![0.0f32; n * c_out * oh * ow];
    for b in 0..n {
        let sample = &input.data()[b * c * h * wd..(b + 1) * c * h * wd];
        let dst = &mut out[b * c_out * oh * ow..(b + 1) * c_out * oh * ow];
        let mut slot = 0;
        for (g, blk) in plan.groups.iter().zip(blocks) {
            let base = slot;
            conv_core(sample, geom, &g.channels, blk.data(), g.filters.len(), |f, pos, acc| {
                let orig = plan.output_perm[base + f];
                dst[orig * oh * ow + pos] = acc + bias.map_or(0.0, |bv| bv[orig]);
            });
            slot += g.filters.len();
        }
    }
    let shape = if flat {
        vec![n, c_out]
    } else {
        vec![n, c_out, oh, ow]
    };
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deploy::{GroupConvPlan, PlanGroup};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Six nested loops straight from the convolution definition.
    fn naive_conv(x: &Tensor, w: &ConvWeights, bias: Option<&Tensor>) -> Vec<f32> {
        let (n, c, h, wd) = x.dims4("").unwrap();
        let (co, k, s, p) = (w.c_out(), w.kernel(), w.stride as i64, w.padding as i64);
        let (oh, ow) = w.output_hw(h, wd).unwrap();
        let mut out = vec![0.0f32; n * co * oh * ow];
        for b in 0..n {
            for f in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as i64 * s + ky as i64 - p;
                                    let ix = ox as i64 * s + kx as i64 - p;
                                    if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                        continue;
                                    }
                                    let xv = x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.values.data()[((f * c + ci) * k + ky) * k + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        let bv = bias.map_or(0.0, |t| t.data()[f] as f64);
                        out[((b * co + f) * oh + oy) * ow + ox] = (acc + bv) as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let w = ConvWeights::new(Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap(), 1, 0).unwrap();
        let y = conv2d_forward(&x, &w, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn conv_of_zero_input_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = ConvWeights::new(random(vec![3, 2, 3, 3], &mut rng), 1, 1).unwrap();
        let y = conv2d_forward(&Tensor::zeros(vec![2, 2, 4, 4]), &w, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(vec![1, 3, 5, 5], &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let w = ConvWeights::new(random(vec![4, 3, 3, 3], &mut rng), stride, pad).unwrap();
            let b = random(vec![4], &mut rng);
            let y = conv2d_forward(&x, &w, Some(&b)).unwrap();
            let oracle = naive_conv(&x, &w, Some(&b));
            for (a, o) in y.data().iter().zip(&oracle) {
                assert!((a - o).abs() <= 1e-6, "{a} vs {o}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let w = ConvWeights::new(Tensor::zeros(vec![2, 3, 3, 3]), 1, 0).unwrap();
        let err = conv2d_forward(&Tensor::zeros(vec![1, 2, 5, 5]), &w, None).unwrap_err();
        assert!(err.to_string().contains("C_in = 3"), "{err}");
    }

    #[test]
    fn fc_identity_and_hand_case() {
        let eye = FcWeights::new(
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        )
        .unwrap();
        let x = Tensor::new(vec![1, 3], vec![1., 2., 3.]).unwrap();
        assert_eq!(fc_forward(&x, &eye, None).unwrap().data(), &[1., 2., 3.]);

        let w = FcWeights::new(Tensor::new(vec![2, 2], vec![1., 1., 1., -1.]).unwrap()).unwrap();
        let x = Tensor::new(vec![1, 2], vec![2., 3.]).unwrap();
        assert_eq!(fc_forward(&x, &w, None).unwrap().data(), &[5., -1.]);
    }

    #[test]
    fn fc_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = FcWeights::new(random(vec![8, 16], &mut rng)).unwrap();
        let x = random(vec![4, 16], &mut rng);
        let y = fc_forward(&x, &w, None).unwrap();
        for b in 0..4 {
            for o in 0..8 {
                let mut acc = 0.0f64;
                for j in 0..16 {
                    acc += w.values.data()[o * 16 + j] as f64 * x.data()[b * 16 + j] as f64;
                }
                assert!((y.data()[b * 8 + o] as f64 - acc).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn fc_backward_hand_derivative() {
        let w = FcWeights::new(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap()).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1., 2.]).unwrap();
        let up = Tensor::new(vec![1, 2], vec![1.0; 2]).unwrap();
        let g = fc_backward(&up, &x, &w).unwrap();
        assert_eq!(g.weight.data(), &[1., 2., 1., 2.]);
        assert_eq!(g.input.data(), &[2., 2.]);
        assert_eq!(g.bias.data(), &[1., 1.]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = ConvWeights::new(random(vec![3, 2, 3, 3], &mut rng), 1, 1).unwrap();
        let x = random(vec![1, 2, 4, 4], &mut rng);
        let g = conv2d_backward(&Tensor::zeros(vec![1, 3, 4, 4]), &x, &w).unwrap();
        for t in [&g.input, &g.weight, &g.bias] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_group_plan_is_exactly_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = ConvWeights::new(random(vec![5, 3, 3, 3], &mut rng), 1, 1).unwrap();
        let b = random(vec![5], &mut rng);
        let x = random(vec![2, 3, 6, 6], &mut rng);
        let plan = GroupConvPlan {
            c_out: 5,
            c_in: 3,
            kernel: 3,
            groups: vec![PlanGroup {
                filters: (0..5).collect(),
                channels: (0..3).collect(),
            }],
            output_perm: (0..5).collect(),
        };
        let dense = conv2d_forward(&x, &w, Some(&b)).unwrap();
        let grouped = group_conv_forward(&x, &plan, &[w.values.clone()], Some(&b), 1, 1).unwrap();
        assert_eq!(dense, grouped);
    }

    #[test]
    fn regular_two_group_structure_matches_block_diagonal_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let blocks = [random(vec![2, 2, 3, 3], &mut rng), random(vec![2, 2, 3, 3], &mut rng)];
        // block-diagonal dense equivalent: filters 0,1 see channels 0,1; filters 2,3 see 2,3
        let mut dense = vec![0.0f32; 4 * 4 * 9];
        for (gi, blk) in blocks.iter().enumerate() {
            for f in 0..2 {
                for c in 0..2 {
                    for kk in 0..9 {
                        dense[((gi * 2 + f) * 4 + gi * 2 + c) * 9 + kk] = blk.data()[(f * 2 + c) * 9 + kk];
                    }
                }
            }
        }
        let w = ConvWeights::new(Tensor::new(vec![4, 4, 3, 3], dense).unwrap(), 1, 0).unwrap();
        let plan = GroupConvPlan {
            c_out: 4,
            c_in: 4,
            kernel: 3,
            groups: vec![
                PlanGroup { filters: vec![0, 1], channels: vec![0, 1] },
                PlanGroup { filters: vec![2, 3], channels: vec![2, 3] },
            ],
            output_perm: vec![0, 1, 2, 3],
        };
        let x = random(vec![3, 4, 5, 5], &mut rng);
        let a = conv2d_forward(&x, &w, None).unwrap();
        let b = group_conv_forward(&x, &plan, &blocks, None, 1, 0).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
    }

    #[test]
    fn group_conv_rejects_bad_plans() {
        let blk = Tensor::zeros(vec![1, 1, 1, 1]);
        let x = Tensor::zeros(vec![1, 2]);
        let out_of_range = GroupConvPlan {
            c_out: 2,
            c_in: 2,
            kernel: 1,
            groups: vec![
                PlanGroup { filters: vec![0], channels: vec![5] },
                PlanGroup { filters: vec![1], channels: vec![0] },
            ],
            output_perm: vec![0, 1],
        };
        assert!(matches!(
            group_conv_forward(&x, &out_of_range, &[blk.clone(), blk.clone()], None, 1, 0),
            Err(Error::Index { .. })
        ));
        let overlap = GroupConvPlan {
            c_out: 2,
            c_in: 2,
            kernel: 1,
            groups: vec![
                PlanGroup { filters: vec![0], channels: vec![0] },
                PlanGroup { filters: vec![0], channels: vec![1] },
            ],
            output_perm: vec![0, 0],
        };
        assert!(matches!(
            group_conv_forward(&x, &overlap, &[blk.clone(), blk], None, 1, 0),
            Err(Error::Index { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn conv_is_linear(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = ConvWeights::new(random(vec![3, 2, 3, 3], &mut rng), 1, 1).unwrap();
                let x1 = random(vec![1, 2, 5, 5], &mut rng);
                let x2 = random(vec![1, 2, 5, 5], &mut rng);
                let mix = Tensor::from_fn(vec![1, 2, 5, 5], |i| a * x1.data()[i] + b * x2.data()[i]);
                let lhs = conv2d_forward(&mix, &w, None).unwrap();
                let y1 = conv2d_forward(&x1, &w, None).unwrap();
                let y2 = conv2d_forward(&x2, &w, None).unwrap();
                for i in 0..lhs.len() {
                    let rhs = a * y1.data()[i] + b * y2.data()[i];
                    prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-5);
                }
            }

            #[test]
            fn fc_is_linear(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = FcWeights::new(random(vec![5, 7], &mut rng)).unwrap();
                let x1 = random(vec![2, 7], &mut rng);
                let x2 = random(vec![2, 7], &mut rng);
                let mix = Tensor::from_fn(vec![2, 7], |i| a * x1.data()[i] + b * x2.data()[i]);
                let lhs = fc_forward(&mix, &w, None).unwrap();
                let y1 = fc_forward(&x1, &w, None).unwrap();
                let y2 = fc_forward(&x2, &w, None).unwrap();
                for i in 0..lhs.len() {
                    let rhs = a * y1.data()[i] + b * y2.data()[i];
                    prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-5);
                }
            }
        }
    }
}
