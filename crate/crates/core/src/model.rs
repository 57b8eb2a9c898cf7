//! Layered model container: dense conv/fc layers with prune masks, deployed
//! group-convolution layers, and frozen per-channel affine layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deploy::GroupConvPlan;
use crate::error::{Error, Result};
use crate::grouping::FilterGroups;
use crate::importance::{importance_conv, importance_fc, ImportanceMatrix};
use crate::pruning::{apply_mask, PruneMask};
use crate::tensor::{
    conv2d_backward, conv2d_forward, conv_output_hw, fc_backward, fc_forward, group_conv_forward,
    ConvWeights, FcWeights, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, t: &mut Tensor) {
        if self == Activation::Relu {
            for v in t.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "conv2d")]
    Conv2d,
    #[serde(rename = "fc")]
    Fc,
    #[serde(rename = "groupconv")]
    GroupConv,
    #[serde(rename = "affine_passthrough")]
    AffinePassthrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weights: ConvWeights,
    pub bias: Option<Tensor>,
    pub mask: PruneMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub weights: FcWeights,
    pub bias: Option<Tensor>,
    pub mask: PruneMask,
}

/// Deployed diverse group convolution. `from_fc` layers flatten rank-4 input
/// and treat each feature as a 1x1 channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupConvLayer {
    pub plan: GroupConvPlan,
    pub blocks: Vec<Tensor>,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub from_fc: bool,
}

/// Frozen per-channel `x * scale + shift` (e.g. folded batch norm).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv2d(ConvLayer),
    Fc(FcLayer),
    GroupConv(GroupConvLayer),
    Affine(AffineLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
    pub activation: Activation,
    /// Whether the pruning pipeline may touch this layer.
    pub compress: bool,
    /// Filter grouping from the last clustering pass, if any.
    pub groups: Option<FilterGroups>,
}

fn flatten(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        2 => Ok(x.clone()),
        4 => {
            let n = x.shape()[0];
            let f = x.len() / n.max(1);
            x.clone().reshape(vec![n, f])
        }
        _ => Err(Error::shape("flatten", format!("cannot flatten shape {:?}", x.shape()))),
    }
}

fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl Layer {
    pub fn conv(name: impl Into<String>, weights: ConvWeights, bias: Option<Tensor>, activation: Activation) -> Self {
        let mask = PruneMask::all_kept(weights.c_out(), weights.c_in());
        Self {
            name: name.into(),
            op: LayerOp::Conv2d(ConvLayer { weights, bias, mask }),
            activation,
            compress: true,
            groups: None,
        }
    }

    pub fn fc(name: impl Into<String>, weights: FcWeights, bias: Option<Tensor>, activation: Activation) -> Self {
        let mask = PruneMask::all_kept(weights.c_out(), weights.c_in());
        Self {
            name: name.into(),
            op: LayerOp::Fc(FcLayer { weights, bias, mask }),
            activation,
            compress: true,
            groups: None,
        }
    }

    pub fn affine(name: impl Into<String>, scale: Vec<f32>, shift: Vec<f32>, activation: Activation) -> Result<Self> {
        if scale.len() != shift.len() || scale.is_empty() {
            return Err(Error::shape(
                "affine layer",
                format!("scale has {} entries, shift {}", scale.len(), shift.len()),
            ));
        }
        Ok(Self {
            name: name.into(),
            op: LayerOp::Affine(AffineLayer { scale, shift }),
            activation,
            compress: false,
            groups: None,
        })
    }

    /// He-uniform initialised conv layer with zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_random(
        name: impl Into<String>,
        c_out: usize,
        c_in: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = kaiming_uniform(vec![c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng);
        Ok(Self::conv(
            name,
            ConvWeights::new(w, stride, padding)?,
            Some(Tensor::zeros(vec![c_out])),
            activation,
        ))
    }

    /// He-uniform initialised fc layer with zero bias.
    pub fn fc_random(name: impl Into<String>, c_out: usize, c_in: usize, activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        let w = kaiming_uniform(vec![c_out, c_in], c_in, rng);
        Ok(Self::fc(name, FcWeights::new(w)?, Some(Tensor::zeros(vec![c_out])), activation))
    }

    pub fn with_compress(mut self, compress: bool) -> Self {
        self.compress = compress;
        self
    }

    pub fn kind(&self) -> LayerKind {
        match self.op {
            LayerOp::Conv2d(_) => LayerKind::Conv2d,
            LayerOp::Fc(_) => LayerKind::Fc,
            LayerOp::GroupConv(_) => LayerKind::GroupConv,
            LayerOp::Affine(_) => LayerKind::AffinePassthrough,
        }
    }

    /// Conv2d or fc layer eligible for pruning.
    pub fn is_compressible(&self) -> bool {
        self.compress && matches!(self.kind(), LayerKind::Conv2d | LayerKind::Fc)
    }

    pub fn mask(&self) -> Option<&PruneMask> {
        match &self.op {
            LayerOp::Conv2d(c) => Some(&c.mask),
            LayerOp::Fc(f) => Some(&f.mask),
            _ => None,
        }
    }

    pub fn mask_mut(&mut self) -> Option<&mut PruneMask> {
        match &mut self.op {
            LayerOp::Conv2d(c) => Some(&mut c.mask),
            LayerOp::Fc(f) => Some(&mut f.mask),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match &self.op {
            LayerOp::Conv2d(c) => c.bias.as_ref(),
            LayerOp::Fc(f) => f.bias.as_ref(),
            LayerOp::GroupConv(g) => g.bias.as_ref(),
            LayerOp::Affine(_) => None,
        }
    }

    /// `(C_out, C_in, kernel)` of a conv, fc (kernel 1) or group-conv layer.
    pub fn connection_dims(&self) -> Option<(usize, usize, usize)> {
        match &self.op {
            LayerOp::Conv2d(c) => Some((c.weights.c_out(), c.weights.c_in(), c.weights.kernel())),
            LayerOp::Fc(f) => Some((f.weights.c_out(), f.weights.c_in(), 1)),
            LayerOp::GroupConv(g) => Some((g.plan.c_out, g.plan.c_in, g.plan.kernel)),
            LayerOp::Affine(_) => None,
        }
    }

    /// Weight buffer `(C_out, C_in, area)`, kernel area and mask of a dense layer.
    pub fn dense_parts(&self) -> Option<(&[f32], usize, &PruneMask)> {
        match &self.op {
            LayerOp::Conv2d(c) => {
                let k = c.weights.kernel();
                Some((c.weights.values.data(), k * k, &c.mask))
            }
            LayerOp::Fc(f) => Some((f.weights.values.data(), 1, &f.mask)),
            _ => None,
        }
    }

    pub fn dense_parts_mut(&mut self) -> Option<(&mut [f32], usize, &mut PruneMask)> {
        match &mut self.op {
            LayerOp::Conv2d(c) => {
                let k = c.weights.kernel();
                Some((c.weights.values.data_mut(), k * k, &mut c.mask))
            }
            LayerOp::Fc(f) => Some((f.weights.values.data_mut(), 1, &mut f.mask)),
            _ => None,
        }
    }

    /// Importance vectors of a dense layer, from its masked weights.
    pub fn importance(&self) -> Option<Result<ImportanceMatrix>> {
        match &self.op {
            LayerOp::Conv2d(c) => Some(importance_conv(&c.weights, &c.mask)),
            LayerOp::Fc(f) => Some(importance_fc(&f.weights, &f.mask)),
            _ => None,
        }
    }

    /// Zero the kernels of all dead connections.
    pub fn apply_mask(&mut self) {
        if let Some((w, area, mask)) = self.dense_parts_mut() {
            let mask = mask.clone();
            apply_mask(w, area, &mask);
        }
    }

    /// Live weights plus biases (plus affine scale/shift).
    pub fn param_count(&self) -> usize {
        let bias = self.bias().map_or(0, Tensor::len);
        match &self.op {
            LayerOp::Conv2d(c) => {
                let k = c.weights.kernel();
                c.mask.live_count() * k * k + bias
            }
            LayerOp::Fc(f) => f.mask.live_count() + bias,
            LayerOp::GroupConv(g) => g.blocks.iter().map(Tensor::len).sum::<usize>() + bias,
            LayerOp::Affine(a) => a.scale.len() + a.shift.len(),
        }
    }

    /// Output of the linear part, before the activation.
    pub fn forward_linear(&self, x: &Tensor) -> Result<Tensor> {
        let with_name = |e: Error| match e {
            Error::Shape { context, detail } => Error::Shape {
                context: format!("layer `{}` ({context})", self.name),
                detail,
            },
            other => other,
        };
        match &self.op {
            LayerOp::Conv2d(c) => conv2d_forward(x, &c.weights, c.bias.as_ref()).map_err(with_name),
            LayerOp::Fc(f) => fc_forward(&flatten(x)?, &f.weights, f.bias.as_ref()).map_err(with_name),
            LayerOp::GroupConv(g) => {
                let input = if g.from_fc { flatten(x)? } else { x.clone() };
                group_conv_forward(&input, &g.plan, &g.blocks, g.bias.as_ref(), g.stride, g.padding)
                    .map_err(with_name)
            }
            LayerOp::Affine(a) => affine_forward(x, a).map_err(with_name),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.forward_linear(x)?;
        self.activation.apply(&mut y);
        Ok(y)
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |detail: String| Error::shape(format!("layer `{}`", self.name), detail);
        let features: usize = input.iter().product();
        match &self.op {
            LayerOp::Conv2d(c) => match *input {
                [ch, h, w] if ch == c.weights.c_in() => {
                    let (oh, ow) = c.weights.output_hw(h, w)?;
                    Ok(vec![c.weights.c_out(), oh, ow])
                }
                _ => Err(bad(format!("input {input:?} does not fit C_in = {}", c.weights.c_in()))),
            },
            LayerOp::Fc(f) if features == f.weights.c_in() => Ok(vec![f.weights.c_out()]),
            LayerOp::Fc(f) => Err(bad(format!("input {input:?} does not flatten to {}", f.weights.c_in()))),
            LayerOp::GroupConv(g) if g.from_fc => {
                if features == g.plan.c_in {
                    Ok(vec![g.plan.c_out])
                } else {
                    Err(bad(format!("input {input:?} does not flatten to {}", g.plan.c_in)))
                }
            }
            LayerOp::GroupConv(g) => match *input {
                [ch, h, w] if ch == g.plan.c_in => {
                    let (oh, ow) = conv_output_hw(h, w, g.plan.kernel, g.stride, g.padding)?;
                    Ok(vec![g.plan.c_out, oh, ow])
                }
                _ => Err(bad(format!("input {input:?} does not fit C_in = {}", g.plan.c_in))),
            },
            LayerOp::Affine(a) => match input.first() {
                Some(&ch) if ch == a.scale.len() => Ok(input.to_vec()),
                _ => Err(bad(format!("input {input:?} does not have {} channels", a.scale.len()))),
            },
        }
    }
}

fn affine_forward(x: &Tensor, a: &AffineLayer) -> Result<Tensor> {
    let c = *x.shape().get(1).unwrap_or(&0);
    if x.rank() < 2 || c != a.scale.len() {
        return Err(Error::shape(
            "affine",
            format!("input {:?} needs {} channels", x.shape(), a.scale.len()),
        ));
    }
    let plane: usize = x.shape()[2..].iter().product();
    let mut y = x.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *v = *v * a.scale[ch] + a.shift[ch];
    }
    Ok(y)
}

/// Parameter gradients of one trainable layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Activations recorded by [`Model::forward_train`].
#[derive(Debug)]
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    outputs: Vec<Tensor>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        self.outputs.last().expect("non-empty model")
    }
}

/// Ordered stack of layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Model {
    pub layers: Vec<Layer>,
    /// Per-sample input shape (`[C, H, W]` or `[F]`), when known.
    pub input_shape: Option<Vec<usize>>,
}

impl Model {
    pub fn new(layers: Vec<Layer>, input_shape: Option<Vec<usize>>) -> Result<Self> {
        let m = Self { layers, input_shape };
        m.validate()?;
        Ok(m)
    }

    /// Structural checks: the first conv stays uncompressed, masks and
    /// groupings fit their layers, and shapes chain when the input is known.
    pub fn validate(&self) -> Result<()> {
        if let Some(first) = self.layers.iter().find(|l| l.kind() == LayerKind::Conv2d) {
            if first.compress {
                return Err(Error::InvalidArgument(format!(
                    "first conv layer `{}` must not be marked compressible",
                    first.name
                )));
            }
        }
        for l in &self.layers {
            if let (Some((c_out, c_in, _)), Some(mask)) = (l.connection_dims(), l.mask()) {
                if mask.rows() != c_out || mask.cols() != c_in {
                    return Err(Error::shape(
                        format!("layer `{}`", l.name),
                        format!("mask {}x{} vs weights {c_out}x{c_in}", mask.rows(), mask.cols()),
                    ));
                }
            }
            if let (Some(g), Some((c_out, _, _))) = (&l.groups, l.connection_dims()) {
                if g.num_filters() != c_out {
                    return Err(Error::shape(
                        format!("layer `{}`", l.name),
                        format!("grouping covers {} filters, layer has {c_out}", g.num_filters()),
                    ));
                }
            }
        }
        if let Some(shape) = &self.input_shape {
            self.shapes(shape)?;
        }
        Ok(())
    }

    /// Per-sample input shape of every layer followed by the final output shape.
    pub fn shapes(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![input_shape.to_vec()];
        for l in &self.layers {
            let next = l.output_shape(out.last().expect("seeded"))?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn output_width(&self) -> Option<usize> {
        self.layers.last().and_then(|l| l.connection_dims()).map(|d| d.0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn apply_masks(&mut self) {
        for l in &mut self.layers {
            l.apply_mask();
        }
    }

    pub fn compressible_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_compressible()).collect()
    }

    /// Forward pass that keeps every layer's input and activated output.
    pub fn forward_train(&self, x: &Tensor) -> Result<ForwardCache> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &self.layers {
            let y = l.forward(&cur)?;
            inputs.push(cur);
            cur = y.clone();
            outputs.push(y);
        }
        Ok(ForwardCache { inputs, outputs })
    }

    /// Backpropagate `grad_logits` through the cached pass. Entry `i` holds the
    /// gradients of layer `i` (`None` for parameter-free or frozen layers).
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Vec<Option<LayerGrads>>> {
        let mut grads: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];
        let mut g = grad_logits.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::Relu {
                for (gv, yv) in g.data_mut().iter_mut().zip(cache.outputs[i].data()) {
                    if *yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let input = &cache.inputs[i];
            g = match &l.op {
                LayerOp::Conv2d(c) => {
                    let r = conv2d_backward(&g, input, &c.weights)?;
                    grads[i] = Some(LayerGrads { weight: r.weight, bias: r.bias });
                    r.input
                }
                LayerOp::Fc(f) => {
                    let r = fc_backward(&g, &flatten(input)?, &f.weights)?;
                    grads[i] = Some(LayerGrads { weight: r.weight, bias: r.bias });
                    r.input.reshape(input.shape().to_vec())?
                }
                LayerOp::Affine(a) => {
                    let plane: usize = input.shape()[2..].iter().product();
                    let c = a.scale.len();
                    for (k, gv) in g.data_mut().iter_mut().enumerate() {
                        *gv *= a.scale[(k / plane) % c];
                    }
                    g
                }
                LayerOp::GroupConv(_) => {
                    return Err(Error::Unsupported(format!(
                        "backward through deployed group-conv layer `{}`",
                        l.name
                    )))
                }
            };
        }
        Ok(grads)
    }
}
