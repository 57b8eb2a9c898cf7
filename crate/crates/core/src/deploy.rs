//! Deployment: rewrite masked dense layers as explicit diverse group
//! convolutions and account for parameters and FLOPs.
//!
//! A converted layer computes `y = Q * blockdiag(W_1 .. W_g) * P * x`, where
//! `P` gathers each group's surviving input channels (a selection matrix:
//! reused channels appear in several groups, ignored channels in none), the
//! blocks are dense, and `Q` is the permutation scattering block outputs back
//! to the original filter order.
//!
//! FLOPs convention: one multiply-accumulate counts as 2 FLOPs. Only conv,
//! fc and group-conv layers contribute; bias adds, activations and affine
//! layers are not counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::FilterGroups;
use crate::model::{GroupConvLayer, Layer, LayerOp, Model};
use crate::pruning::{check_granularity, PruneMask};
use crate::tensor::Tensor;

/// Filters of one group and the input channels it gathers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanGroup {
    pub filters: Vec<usize>,
    pub channels: Vec<usize>,
}

/// Structure of a diverse group convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupConvPlan {
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub groups: Vec<PlanGroup>,
    /// `output_perm[p]` is the original filter index of block output `p`
    /// (block outputs are the groups' filters concatenated in order).
    pub output_perm: Vec<usize>,
}

impl GroupConvPlan {
    pub fn validate(&self) -> Result<()> {
        let ctx = "GroupConvPlan";
        let mut seen = vec![false; self.c_out];
        for (gi, g) in self.groups.iter().enumerate() {
            for &f in &g.filters {
                if f >= self.c_out {
                    return Err(Error::index(ctx, format!("group {gi} filter {f} >= C_out {}", self.c_out)));
                }
                if std::mem::replace(&mut seen[f], true) {
                    return Err(Error::index(ctx, format!("filter {f} assigned to more than one group")));
                }
            }
            if let Some(&c) = g.channels.iter().find(|&&c| c >= self.c_in) {
                return Err(Error::index(ctx, format!("group {gi} channel {c} >= C_in {}", self.c_in)));
            }
        }
        if let Some(f) = seen.iter().position(|s| !s) {
            return Err(Error::index(ctx, format!("filter {f} belongs to no group")));
        }
        let concat: Vec<usize> = self.groups.iter().flat_map(|g| g.filters.iter().copied()).collect();
        if self.output_perm != concat {
            return Err(Error::index(ctx, "output permutation does not match the group filter order"));
        }
        Ok(())
    }

    /// Total number of gathered channel slots (rows of the selection matrix).
    pub fn gathered_channels(&self) -> usize {
        self.groups.iter().map(|g| g.channels.len()).sum()
    }

    /// `C_out x C_out` 0/1 matrix mapping block outputs to original filters.
    pub fn permutation_matrix(&self) -> Vec<Vec<u8>> {
        let mut q = vec![vec![0u8; self.c_out]; self.c_out];
        for (p, &f) in self.output_perm.iter().enumerate() {
            q[f][p] = 1;
        }
        q
    }

    /// `gathered x C_in` 0/1 matrix selecting each group's input channels.
    pub fn selection_matrix(&self) -> Vec<Vec<u8>> {
        self.groups
            .iter()
            .flat_map(|g| g.channels.iter())
            .map(|&c| {
                let mut row = vec![0u8; self.c_in];
                row[c] = 1;
                row
            })
            .collect()
    }

    /// Dense `(C_out, C_in, k, k)` weights equivalent to the grouped layer.
    pub fn dense_equivalent(&self, blocks: &[Tensor]) -> Result<Tensor> {
        self.validate()?;
        let kk = self.kernel * self.kernel;
        let mut dense = vec![0.0f32; self.c_out * self.c_in * kk];
        for (g, blk) in self.groups.iter().zip(blocks) {
            if blk.len() != g.filters.len() * g.channels.len() * kk {
                return Err(Error::shape("dense_equivalent", "block size does not match its group"));
            }
            for (fi, &f) in g.filters.iter().enumerate() {
                for (ci, &c) in g.channels.iter().enumerate() {
                    let src = (fi * g.channels.len() + ci) * kk;
                    let dst = (f * self.c_in + c) * kk;
                    dense[dst..dst + kk].copy_from_slice(&blk.data()[src..src + kk]);
                }
            }
        }
        Tensor::new(vec![self.c_out, self.c_in, self.kernel, self.kernel], dense)
    }
}

/// Plan for one dense layer from its grouping and (granular) mask.
///
/// Groups follow cluster id order; filters within a group are ascending.
/// A group whose channels are all pruned is kept with an empty channel list.
pub fn build_group_plan(layer: &str, kernel: usize, groups: &FilterGroups, mask: &PruneMask) -> Result<GroupConvPlan> {
    check_granularity(groups, mask, layer)?;
    let plan_groups: Vec<PlanGroup> = (0..groups.num_groups())
        .map(|g| {
            let filters = groups.members(g);
            let channels = mask.kept_channels(filters[0]);
            PlanGroup { filters, channels }
        })
        .collect();
    let output_perm = plan_groups.iter().flat_map(|g| g.filters.iter().copied()).collect();
    let plan = GroupConvPlan {
        c_out: mask.rows(),
        c_in: mask.cols(),
        kernel,
        groups: plan_groups,
        output_perm,
    };
    plan.validate()?;
    Ok(plan)
}

fn gather_blocks(plan: &GroupConvPlan, weights: &[f32]) -> Result<Vec<Tensor>> {
    let kk = plan.kernel * plan.kernel;
    plan.groups
        .iter()
        .map(|g| {
            let mut data = Vec::with_capacity(g.filters.len() * g.channels.len() * kk);
            for &f in &g.filters {
                for &c in &g.channels {
                    let start = (f * plan.c_in + c) * kk;
                    data.extend_from_slice(&weights[start..start + kk]);
                }
            }
            Tensor::new(vec![g.filters.len(), g.channels.len(), plan.kernel, plan.kernel], data)
        })
        .collect()
}

/// Convert one dense conv/fc layer into a group-conv layer.
///
/// A layer without a grouping converts as a single group only when nothing
/// in it is pruned.
pub fn convert_layer(layer: &Layer) -> Result<Layer> {
    let (weights, _, mask) = layer
        .dense_parts()
        .ok_or_else(|| Error::Unsupported(format!("layer `{}` is not conv2d or fc", layer.name)))?;
    let groups = match &layer.groups {
        Some(g) => g.clone(),
        None if mask.is_all_kept() => FilterGroups::single(mask.rows()),
        None => return Err(Error::MissingGrouping(layer.name.clone())),
    };
    let (stride, padding, kernel, from_fc) = match &layer.op {
        LayerOp::Conv2d(c) => (c.weights.stride, c.weights.padding, c.weights.kernel(), false),
        _ => (1, 0, 1, true),
    };
    let plan = build_group_plan(&layer.name, kernel, &groups, mask)?;
    let blocks = gather_blocks(&plan, weights)?;
    Ok(Layer {
        name: layer.name.clone(),
        op: LayerOp::GroupConv(GroupConvLayer {
            plan,
            blocks,
            bias: layer.bias().cloned(),
            stride,
            padding,
            from_fc,
        }),
        activation: layer.activation,
        compress: layer.compress,
        groups: Some(groups),
    })
}

/// Replace every compressible dense layer with its group-conv form.
pub fn convert_model(model: &Model) -> Result<Model> {
    let layers = model
        .layers
        .iter()
        .map(|l| if l.is_compressible() { convert_layer(l) } else { Ok(l.clone()) })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        layers,
        input_shape: model.input_shape.clone(),
    })
}

/// Live weights plus biases.
pub fn count_params(model: &Model) -> usize {
    model.param_count()
}

/// FLOPs (2 per multiply-accumulate) of one forward pass of a single sample.
///
/// Dense layers are charged their full dense cost; group-conv layers only
/// their gathered channels.
pub fn count_flops(model: &Model, input_shape: &[usize]) -> Result<u64> {
    let shapes = model.shapes(input_shape)?;
    let mut macs: u64 = 0;
    for (l, out) in model.layers.iter().zip(&shapes[1..]) {
        let spatial: u64 = out.iter().skip(1).product::<usize>() as u64;
        macs += match &l.op {
            LayerOp::Conv2d(c) => {
                let k = c.weights.kernel() as u64;
                c.weights.c_out() as u64 * c.weights.c_in() as u64 * k * k * spatial
            }
            LayerOp::Fc(f) => f.weights.c_out() as u64 * f.weights.c_in() as u64,
            LayerOp::GroupConv(g) => {
                let kk = (g.plan.kernel * g.plan.kernel) as u64;
                let per_pos: u64 = g
                    .plan
                    .groups
                    .iter()
                    .map(|grp| (grp.filters.len() * grp.channels.len()) as u64 * kk)
                    .sum();
                per_pos * spatial
            }
            LayerOp::Affine(_) => 0,
        };
    }
    Ok(2 * macs)
}

/// Conversion of one layer with its measured deviation from the dense source.
#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub layer: String,
    pub max_deviation: f32,
}

/// Tolerance for dense-vs-grouped agreement (summation order only).
pub const EQUIVALENCE_TOLERANCE: f32 = 1e-5;

/// Compare the deployed model against its masked dense source on random
/// inputs, layer by layer (each converted layer is fed the dense model's own
/// activations) and end to end. Returns per-layer deviations, or an
/// [`Error::Equivalence`] naming the first layer beyond tolerance.
pub fn verify_equivalence(
    dense: &Model,
    deployed: &Model,
    input_shape: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<LayerCheck>> {
    if dense.layers.len() != deployed.layers.len() {
        return Err(Error::shape("verify_equivalence", "models have different depths"));
    }
    let mut masked = dense.clone();
    masked.apply_masks();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![samples];
    shape.extend_from_slice(input_shape);
    let x = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));

    let mut checks = Vec::new();
    let mut cur = x.clone();
    for (a, b) in masked.layers.iter().zip(&deployed.layers) {
        let ya = a.forward(&cur)?;
        let yb = b.forward(&cur)?;
        let dev = ya.max_abs_diff(&yb)?;
        checks.push(LayerCheck { layer: a.name.clone(), max_deviation: dev });
        if !(dev <= EQUIVALENCE_TOLERANCE) {
            return Err(Error::Equivalence {
                layer: a.name.clone(),
                max_deviation: dev,
                tolerance: EQUIVALENCE_TOLERANCE,
            });
        }
        cur = ya;
    }
    let end = masked.forward(&x)?.max_abs_diff(&deployed.forward(&x)?)?;
    checks.push(LayerCheck { layer: "<output>".into(), max_deviation: end });
    if !(end <= EQUIVALENCE_TOLERANCE) {
        return Err(Error::Equivalence {
            layer: "<output>".into(),
            max_deviation: end,
            tolerance: EQUIVALENCE_TOLERANCE,
        });
    }
    Ok(checks)
}

/// Closed-form conv cost helper: MACs of a dense conv with the given output size.
pub fn conv_macs(c_out: usize, c_in: usize, kernel: usize, out_h: usize, out_w: usize) -> u64 {
    (c_out * c_in * kernel * kernel * out_h * out_w) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use crate::tensor::{ConvWeights, FcWeights};

    fn conv_layer(c_out: usize, c_in: usize, seed: u64) -> Layer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Layer::conv_random("conv", c_out, c_in, 3, 1, 1, Activation::Relu, &mut rng).unwrap()
    }

    #[test]
    fn single_cluster_unpruned_is_identity_plan() {
        let mask = PruneMask::all_kept(4, 3);
        let plan = build_group_plan("l", 3, &FilterGroups::single(4), &mask).unwrap();
        assert_eq!(plan.groups.len(), 1);
        assert_eq!(plan.groups[0].filters, vec![0, 1, 2, 3]);
        assert_eq!(plan.groups[0].channels, vec![0, 1, 2]);
        assert_eq!(plan.output_perm, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ignored_and_reused_channels() {
        // clusters {0,2} keep channels {0,1}; {1} keeps {2}; channel 3 is ignored
        let groups = FilterGroups::new(2, vec![0, 1, 0]).unwrap();
        let mut mask = PruneMask::all_kept(3, 4);
        for f in [0, 2] {
            mask.kill(f, 2);
            mask.kill(f, 3);
        }
        for c in [0, 1, 3] {
            mask.kill(1, c);
        }
        let plan = build_group_plan("l", 1, &groups, &mask).unwrap();
        assert_eq!(plan.groups[0], PlanGroup { filters: vec![0, 2], channels: vec![0, 1] });
        assert_eq!(plan.groups[1], PlanGroup { filters: vec![1], channels: vec![2] });
        assert_eq!(plan.output_perm, vec![0, 2, 1]);
        let sel = plan.selection_matrix();
        assert!(sel.iter().all(|row| row[3] == 0));

        // shared channel 1
        mask.revive(1, 1);
        let plan = build_group_plan("l", 1, &groups, &mask).unwrap();
        assert_eq!(plan.groups[1].channels, vec![1, 2]);
        let sel = plan.selection_matrix();
        assert_eq!(sel.iter().filter(|row| row[1] == 1).count(), 2);
        for row in &sel {
            assert_eq!(row.iter().map(|&v| v as usize).sum::<usize>(), 1);
        }
    }

    #[test]
    fn permutation_matrix_is_bijection() {
        let groups = FilterGroups::new(3, vec![2, 0, 1, 0, 2]).unwrap();
        let plan = build_group_plan("l", 1, &groups, &PruneMask::all_kept(5, 2)).unwrap();
        let q = plan.permutation_matrix();
        for i in 0..5 {
            assert_eq!(q[i].iter().map(|&v| v as usize).sum::<usize>(), 1);
            assert_eq!(q.iter().map(|r| r[i] as usize).sum::<usize>(), 1);
        }
    }

    #[test]
    fn granularity_violation_is_rejected() {
        let groups = FilterGroups::new(1, vec![0, 0]).unwrap();
        let mut mask = PruneMask::all_kept(2, 2);
        mask.kill(0, 0);
        assert!(matches!(build_group_plan("bad", 1, &groups, &mask), Err(Error::Granularity { .. })));
    }

    #[test]
    fn starved_group_outputs_bias() {
        let mut layer = conv_layer(3, 2, 1);
        layer.groups = Some(FilterGroups::new(2, vec![0, 1, 0]).unwrap());
        let mask = layer.mask_mut().unwrap();
        mask.kill(1, 0);
        mask.kill(1, 1);
        layer.apply_mask();
        let g = convert_layer(&layer).unwrap();
        let LayerOp::GroupConv(gc) = &g.op else { panic!() };
        assert!(gc.plan.groups[1].channels.is_empty());
        let x = Tensor::from_fn(vec![1, 2, 4, 4], |i| i as f32 * 0.1);
        let dense = layer.forward(&x).unwrap();
        let grouped = g.forward(&x).unwrap();
        assert!(dense.max_abs_diff(&grouped).unwrap() <= EQUIVALENCE_TOLERANCE);
    }

    #[test]
    fn dense_equivalent_reproduces_masked_weights() {
        let mut layer = conv_layer(4, 3, 2);
        layer.groups = Some(FilterGroups::new(2, vec![1, 0, 1, 0]).unwrap());
        for f in [0, 2] {
            layer.mask_mut().unwrap().kill(f, 1);
        }
        layer.apply_mask();
        let g = convert_layer(&layer).unwrap();
        let LayerOp::GroupConv(gc) = &g.op else { panic!() };
        let LayerOp::Conv2d(c) = &layer.op else { panic!() };
        assert_eq!(gc.plan.dense_equivalent(&gc.blocks).unwrap(), c.weights.values);
    }

    #[test]
    fn missing_grouping_on_pruned_layer() {
        let mut layer = conv_layer(2, 2, 3);
        layer.mask_mut().unwrap().kill(0, 0);
        assert!(matches!(convert_layer(&layer), Err(Error::MissingGrouping(_))));
    }

    #[test]
    fn flop_and_param_formulas() {
        assert_eq!(conv_macs(8, 3, 3, 4, 4), 3456);
        let w = ConvWeights::new(Tensor::zeros(vec![8, 3, 3, 3]), 1, 0).unwrap();
        let m = Model::new(vec![Layer::conv("c", w, None, Activation::Relu).with_compress(false)], None).unwrap();
        assert_eq!(count_flops(&m, &[3, 6, 6]).unwrap(), 6912);

        let fc = FcWeights::new(Tensor::zeros(vec![10, 128])).unwrap();
        let m = Model::new(vec![Layer::fc("fc", fc, Some(Tensor::zeros(vec![10])), Activation::Identity)], None).unwrap();
        assert_eq!(count_params(&m), 1290);
        assert!(count_flops(&m, &[127]).is_err());
    }

    #[test]
    fn fc_converts_through_the_same_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layer = Layer::fc_random("fc", 4, 6, Activation::Identity, &mut rng).unwrap();
        layer.groups = Some(FilterGroups::new(2, vec![0, 1, 1, 0]).unwrap());
        for f in [1, 2] {
            for c in [0, 3, 4] {
                layer.mask_mut().unwrap().kill(f, c);
            }
        }
        layer.apply_mask();
        let g = convert_layer(&layer).unwrap();
        let x = Tensor::from_fn(vec![5, 6], |_| rng.random_range(-1.0..1.0));
        let d = layer.forward(&x).unwrap().max_abs_diff(&g.forward(&x).unwrap()).unwrap();
        assert!(d <= EQUIVALENCE_TOLERANCE);
    }
}
