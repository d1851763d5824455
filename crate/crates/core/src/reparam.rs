//! Inference-time compression passes.
//!
//! A multi-branch block `sum_i w_i * BN_i(conv_i(x))` collapses into one
//! convolution: each branch's batch norm is folded into its kernel and bias,
//! the `1 x k` / `k x 1` kernels are zero-embedded at the center of a `k x k`
//! kernel, and the kernels and biases are summed with their combine weights.
//! The identity is exact up to float reassociation because convolution is
//! linear in the kernel and padding is zeros.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchNormSpec, BranchBlock, ConvGeometry, ConvSpec, LayerGraph, Node, Op};
use crate::inference::{conv2d, conv2d_raw, run_branch_block, run_branch_block_raw, run_graph, Scalar};
use crate::tensor::{Rng, Shape, Tensor};

/// Single-layer tolerance for f32 passes on unit-scale data.
pub const LAYER_TOLERANCE: f32 = 1e-5;
/// End-to-end tolerance for f32 graphs on unit-scale data.
pub const GRAPH_TOLERANCE: f32 = 1e-4;

/// What merging one block changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub node: String,
    pub branches_before: usize,
    pub branches_after: usize,
    pub params_before: u64,
    pub params_after: u64,
    /// MACs of each original branch, in branch order.
    pub branch_macs: Vec<u64>,
    pub macs_before: u64,
    pub macs_after: u64,
    /// Max-abs deviation between the block and its merged conv on one seeded input.
    pub max_abs_deviation: f32,
}

impl MergeReport {
    pub fn macs_eliminated(&self) -> u64 {
        self.macs_before - self.macs_after
    }
}

fn fold_into<T: Scalar>(weight: &mut [T], bias: &mut [T], bn: &BatchNormSpec) {
    let per_oc = weight.len() / bias.len();
    for (oc, (taps, b)) in weight.chunks_mut(per_oc).zip(bias.iter_mut()).enumerate() {
        let scale = T::from_f32(bn.gamma[oc])
            / (T::from_f32(bn.running_var[oc]) + T::from_f32(bn.eps)).sqrt();
        for t in taps {
            *t = *t * scale;
        }
        *b = T::from_f32(bn.beta[oc]) + scale * (*b - T::from_f32(bn.running_mean[oc]));
    }
}

/// Absorbs a following batch norm into `conv`:
/// `K' = K * s`, `b' = beta + s * (b - mean)` with `s = gamma / sqrt(var + eps)`.
pub fn fold_bn(conv: &ConvSpec, bn: &BatchNormSpec) -> Result<ConvSpec> {
    if bn.channels() != conv.out_channels {
        return Err(Error::shape(
            "fold_bn",
            format!(
                "batch norm has {} channels, conv produces {}",
                bn.channels(),
                conv.out_channels
            ),
        ));
    }
    let mut out = conv.clone();
    let mut bias = conv.bias.clone().unwrap_or_else(|| vec![0.0; conv.out_channels]);
    fold_into(out.weight.data_mut(), &mut bias, bn);
    out.bias = Some(bias);
    Ok(out)
}

fn check_embed(kernel: (usize, usize), target: usize) -> Result<(usize, usize)> {
    if target.is_multiple_of(2) {
        return Err(Error::Alignment(format!(
            "target kernel {target}x{target} is even and has no center"
        )));
    }
    let (kh, kw) = kernel;
    if kh > target || kw > target {
        return Err(Error::Alignment(format!(
            "kernel {kh}x{kw} does not fit in {target}x{target}"
        )));
    }
    if !(target - kh).is_multiple_of(2) || !(target - kw).is_multiple_of(2) {
        return Err(Error::Alignment(format!(
            "kernel {kh}x{kw} cannot be centered in {target}x{target}"
        )));
    }
    Ok(((target - kh) / 2, (target - kw) / 2))
}

fn embed<T: Scalar>(src: &[T], planes: usize, kernel: (usize, usize), target: usize) -> Result<Vec<T>> {
    let (oy, ox) = check_embed(kernel, target)?;
    let (kh, kw) = kernel;
    let mut out = vec![T::zero(); planes * target * target];
    for p in 0..planes {
        for u in 0..kh {
            for v in 0..kw {
                out[(p * target + oy + u) * target + ox + v] = src[(p * kh + u) * kw + v];
            }
        }
    }
    Ok(out)
}

/// Zero-embeds a kernel tensor `(o, i, kh, kw)` at the spatial center of a
/// `target.0 x target.1` kernel: a `1 x k` row lands on row `(k - 1) / 2`,
/// a `k x 1` column on column `(k - 1) / 2`.
pub fn pad_kernel_to(kernel: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    if target.0 != target.1 {
        return Err(Error::Alignment(format!(
            "target {}x{} is not square",
            target.0, target.1
        )));
    }
    let s = kernel.shape();
    let data = embed(kernel.data(), s.n * s.c, (s.h, s.w), target.0)?;
    Tensor::from_vec(Shape::new(s.n, s.c, target.0, target.1)?, data)
}

/// Merged kernel of a block in arbitrary precision.
pub struct MergedKernel<T> {
    pub geometry: ConvGeometry,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

fn merge_generic<T: Scalar>(node: &str, block: &BranchBlock) -> Result<MergedKernel<T>> {
    let merge_err = |msg: String| Error::Merge {
        node: node.to_string(),
        msg,
    };
    let first = block
        .branches
        .first()
        .ok_or_else(|| merge_err("block has no branches".into()))?;
    let k = block.base_kernel;
    if k.is_multiple_of(2) {
        return Err(Error::Alignment(format!(
            "`{node}`: base kernel {k} is even; branches cannot be center-aligned"
        )));
    }
    let g0 = first.conv.geometry();
    let mut merged_padding = None;
    for (i, b) in block.branches.iter().enumerate() {
        let g = b.conv.geometry();
        if g.stride != g0.stride || g.groups != g0.groups {
            return Err(merge_err(format!(
                "branch {i} has stride {:?} / groups {}, branch 0 has {:?} / {}",
                g.stride, g.groups, g0.stride, g0.groups
            )));
        }
        if g.in_channels != g0.in_channels || g.out_channels != g0.out_channels || g.dilation != g0.dilation {
            return Err(merge_err(format!(
                "branch {i} disagrees with branch 0 on channels or dilation"
            )));
        }
        let (oy, ox) = check_embed(g.kernel, k).map_err(|e| match e {
            Error::Alignment(m) => Error::Alignment(format!("`{node}` branch {i}: {m}")),
            other => other,
        })?;
        // A centered tap at offset o reads the same pixel as the original under padding p + d*o.
        let pad = (g.padding.0 + g.dilation.0 * oy, g.padding.1 + g.dilation.1 * ox);
        match merged_padding {
            None => merged_padding = Some(pad),
            Some(p) if p != pad => {
                return Err(merge_err(format!(
                    "branch {i} is not center-aligned: needs padding {pad:?}, branch 0 needs {p:?}"
                )))
            }
            _ => {}
        }
    }
    let geometry = ConvGeometry {
        kernel: (k, k),
        padding: merged_padding.unwrap(),
        ..g0
    };
    let planes = g0.out_channels * g0.in_per_group();
    let mut weight = vec![T::zero(); planes * k * k];
    let has_bias = block.branches.iter().any(|b| b.conv.bias.is_some() || b.bn.is_some());
    let mut bias = vec![T::zero(); g0.out_channels];
    for b in &block.branches {
        let mut w: Vec<T> = b.conv.weight.data().iter().map(|&v| T::from_f32(v)).collect();
        let mut bb: Vec<T> = match &b.conv.bias {
            Some(v) => v.iter().map(|&x| T::from_f32(x)).collect(),
            None => vec![T::zero(); g0.out_channels],
        };
        if let Some(bn) = &b.bn {
            fold_into(&mut w, &mut bb, bn);
        }
        let w = embed(&w, planes, b.conv.kernel, k)?;
        let c = T::from_f32(b.combine_weight);
        for (d, s) in weight.iter_mut().zip(w) {
            *d = *d + c * s;
        }
        for (d, s) in bias.iter_mut().zip(bb) {
            *d = *d + c * s;
        }
    }
    Ok(MergedKernel {
        geometry,
        weight,
        bias: has_bias.then_some(bias),
    })
}

/// Collapses a block into one conv: `K = sum_i w_i * pad(K_i)`, `b = sum_i w_i * b_i`,
/// after folding each branch's batch norm into its kernel.
pub fn merge_branches(block: &BranchBlock) -> Result<ConvSpec> {
    merge_named("branch_block", block)
}

fn merge_named(node: &str, block: &BranchBlock) -> Result<ConvSpec> {
    let m = merge_generic::<f32>(node, block)?;
    let g = m.geometry;
    let weight = Tensor::from_vec(
        Shape::new(g.out_channels, g.in_per_group(), g.kernel.0, g.kernel.1)?,
        m.weight,
    )?;
    Ok(ConvSpec {
        in_channels: g.in_channels,
        out_channels: g.out_channels,
        kernel: g.kernel,
        stride: g.stride,
        padding: g.padding,
        dilation: g.dilation,
        groups: g.groups,
        weight,
        bias: m.bias,
    })
}

/// `f64` merge path; kernels, BN folding and sums are computed in double precision.
pub fn merge_branches_f64(block: &BranchBlock) -> Result<MergedKernel<f64>> {
    merge_generic("branch_block", block)
}

/// Max-abs deviation between the unmerged block and its `f64` merged kernel,
/// both evaluated in `f64`, on input `x`.
pub fn merge_deviation_f64(block: &BranchBlock, x: &Tensor) -> Result<f64> {
    let input: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let (shape_a, a) = run_branch_block_raw(&input, x.shape(), block)?;
    let m = merge_branches_f64(block)?;
    let (shape_b, b) = conv2d_raw(&input, x.shape(), &m.geometry, &m.weight, m.bias.as_deref())?;
    if shape_a != shape_b {
        return Err(Error::Structure(format!("{shape_a} vs {shape_b}")));
    }
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
}

/// Merges every branch block not named in `skip` and folds each conv that
/// feeds only a batch norm into that conv. Node order is preserved; a folded
/// batch norm disappears and its consumers read the conv instead.
pub fn compress_graph(graph: &LayerGraph, skip: &HashSet<String>) -> Result<(LayerGraph, Vec<MergeReport>)> {
    let shapes = graph.shape_infer()?;
    let mut reports = Vec::new();
    let mut merged: Vec<Node> = Vec::with_capacity(graph.nodes().len());
    for (i, node) in graph.nodes().iter().enumerate() {
        match &node.op {
            Op::BranchBlock(block) if !skip.contains(&node.name) => {
                let conv = merge_named(&node.name, block)?;
                let x_shape = graph
                    .shape_of(&shapes, &node.inputs[0])
                    .expect("validated graph resolves inputs");
                let out = shapes[i];
                let branch_macs: Vec<u64> = block
                    .branches
                    .iter()
                    .map(|b| b.conv.geometry().macs(out.h, out.w))
                    .collect();
                let mut rng = Rng::for_key(graph.seed(), &format!("{}.verify", node.name));
                let x = Tensor::random((1, x_shape.c, x_shape.h, x_shape.w), &mut rng, -1.0, 1.0)?;
                let deviation = run_branch_block(&x, block)?.max_abs_diff(&conv2d(&x, &conv)?)?;
                reports.push(MergeReport {
                    node: node.name.clone(),
                    branches_before: block.branches.len(),
                    branches_after: 1,
                    params_before: block.param_count(),
                    params_after: conv.param_count(),
                    macs_before: branch_macs.iter().sum(),
                    macs_after: conv.geometry().macs(out.h, out.w),
                    branch_macs,
                    max_abs_deviation: deviation,
                });
                merged.push(Node {
                    name: node.name.clone(),
                    inputs: node.inputs.clone(),
                    op: Op::Conv(conv),
                });
            }
            _ => merged.push(node.clone()),
        }
    }

    let mut consumers: HashMap<String, usize> = HashMap::new();
    for node in &merged {
        for r in &node.inputs {
            *consumers.entry(r.clone()).or_default() += 1;
        }
    }
    let mut output = graph.output().to_string();
    let mut renamed: HashMap<String, String> = HashMap::new();
    let mut folded: Vec<Node> = Vec::with_capacity(merged.len());
    for mut node in merged {
        for r in &mut node.inputs {
            if let Some(to) = renamed.get(r) {
                *r = to.clone();
            }
        }
        if let Op::BatchNorm(bn) = &node.op {
            let src = &node.inputs[0];
            let target = folded.iter().position(|n| &n.name == src);
            if let Some(t) = target {
                let only_consumer = consumers.get(src).copied() == Some(1);
                let foldable = matches!(folded[t].op, Op::Conv(_))
                    && only_consumer
                    && *src != output
                    && !skip.contains(src);
                if foldable {
                    let Op::Conv(conv) = &folded[t].op else { unreachable!() };
                    let conv = fold_bn(conv, bn).map_err(|e| match e {
                        Error::Shape { msg, .. } => Error::shape(&node.name, msg),
                        other => other,
                    })?;
                    folded[t].op = Op::Conv(conv);
                    let after = consumers.remove(&node.name).unwrap_or(0);
                    consumers.insert(src.clone(), after);
                    if output == node.name {
                        output = src.clone();
                    }
                    renamed.insert(node.name.clone(), src.clone());
                    continue;
                }
            }
        }
        folded.push(node);
    }
    let (c, h, w) = graph.input();
    let compressed = LayerGraph::new(graph.name(), (c, h, w), graph.seed(), folded, output)?;
    Ok((compressed, reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub max_abs_deviation: f32,
    pub trials: usize,
    pub tolerance: f32,
    pub passed: bool,
}

/// Runs both graphs on `trials` inputs uniform in `[-1, 1)`, trial `t` seeded
/// with `seed + t`, and reports the largest elementwise deviation.
pub fn verify_equivalence(
    a: &LayerGraph,
    b: &LayerGraph,
    trials: usize,
    seed: u64,
    tolerance: f32,
) -> Result<Verification> {
    if a.input() != b.input() {
        return Err(Error::Structure(format!(
            "input shapes differ: {:?} vs {:?}",
            a.input(),
            b.input()
        )));
    }
    let (c, h, w) = a.input();
    let mut worst = 0.0f32;
    for t in 0..trials {
        let mut rng = Rng::new(seed.wrapping_add(t as u64));
        let x = Tensor::random((1, c, h, w), &mut rng, -1.0, 1.0)?;
        let ya = run_graph(a, &x)?;
        let yb = run_graph(b, &x)?;
        worst = worst.max(ya.max_abs_diff(&yb)?);
    }
    Ok(Verification {
        max_abs_deviation: worst,
        trials,
        tolerance,
        passed: worst <= tolerance,
    })
}
