//! Reference CPU forward pass.
//!
//! Convolution is direct (no im2col, FFT or Winograd). Each output element is
//! accumulated from zero over `(input channel in group, kernel row, kernel
//! column)` in that order, then the bias is added; out-of-bounds taps are
//! skipped, which is the same as zero padding. That order is fixed, so results
//! are bit-reproducible and independent of the thread count: work is split
//! only across whole `(batch, output channel)` planes.

use std::collections::HashMap;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{
    Activation, BatchNormSpec, BranchBlock, ConvGeometry, ConvSpec, LayerGraph, Op, INPUT,
};
use crate::tensor::{Shape, Tensor};

/// Element types the convolution kernels run on: `f32` for inference, `f64`
/// for the high-precision check mode.
pub trait Scalar: Float + Send + Sync + std::fmt::Debug + 'static {
    fn from_f32(v: f32) -> Self;
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
}

/// Direct convolution over raw slices in `(n, c, h, w)` layout.
///
/// `weight` is `(out, in / groups, kh, kw)`; `bias`, when given, has one entry
/// per output channel.
pub fn conv2d_raw<T: Scalar>(
    input: &[T],
    shape: Shape,
    geom: &ConvGeometry,
    weight: &[T],
    bias: Option<&[T]>,
) -> Result<(Shape, Vec<T>)> {
    if shape.c != geom.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, conv expects {}", shape.c, geom.in_channels),
        ));
    }
    debug_assert_eq!(input.len(), shape.numel());
    debug_assert_eq!(weight.len(), geom.weight_len());
    let out = geom
        .output_shape(shape)
        .ok_or_else(|| Error::shape("conv2d", format!("kernel does not fit input {shape}")))?;
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let (dh, dw) = geom.dilation;
    let in_pg = geom.in_per_group();
    let out_pg = geom.out_per_group();
    let plane = out.plane();
    let mut data = vec![T::zero(); out.numel()];

    data.par_chunks_mut(plane).enumerate().for_each(|(idx, acc)| {
        let (n, oc) = (idx / out.c, idx % out.c);
        let group = oc / out_pg;
        for icg in 0..in_pg {
            let ic = group * in_pg + icg;
            let src = &input[shape.offset(n, ic, 0, 0)..][..shape.plane()];
            for u in 0..kh {
                for v in 0..kw {
                    let wv = weight[((oc * in_pg + icg) * kh + u) * kw + v];
                    let (x_lo, x_hi) = valid_range(out.w, shape.w, sw, v * dw, pw);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oy in 0..out.h {
                        let iy = (oy * sh + u * dh) as isize - ph as isize;
                        if iy < 0 || iy >= shape.h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * shape.w..][..shape.w];
                        let dst = &mut acc[oy * out.w..][..out.w];
                        let x0 = (x_lo * sw + v * dw) - pw;
                        if sw == 1 {
                            let run = x_hi - x_lo;
                            for (d, &s) in dst[x_lo..x_hi].iter_mut().zip(&row[x0..x0 + run]) {
                                *d = *d + wv * s;
                            }
                        } else {
                            for (j, d) in dst[x_lo..x_hi].iter_mut().enumerate() {
                                *d = *d + wv * row[x0 + j * sw];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bv = b[oc];
            for d in acc.iter_mut() {
                *d = *d + bv;
            }
        }
    });
    Ok((out, data))
}

/// Output columns `[lo, hi)` whose tap `ox * stride + offset - pad` lands inside `0..in_len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    // ox * stride + offset >= pad
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    // ox * stride + offset - pad <= in_len - 1
    let limit = in_len + pad;
    let hi = if offset >= limit {
        0
    } else {
        ((limit - offset - 1) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

pub fn conv2d(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (shape, data) = conv2d_raw(
        x.data(),
        x.shape(),
        &spec.geometry(),
        spec.weight.data(),
        spec.bias.as_deref(),
    )?;
    Tensor::from_vec(shape, data)
}

/// Convolution specialized to `1 x k` kernels: each output row is a 1-D
/// correlation of one input row. Same result, bit for bit, as [`conv2d`].
pub fn sparse_conv_1xk(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    if spec.kernel.0 != 1 {
        return Err(Error::Usage(format!(
            "sparse_conv_1xk needs a 1xk kernel, got {}x{}",
            spec.kernel.0, spec.kernel.1
        )));
    }
    let shape = x.shape();
    let g = spec.geometry();
    if shape.c != g.in_channels {
        return Err(Error::shape(
            "sparse_conv_1xk",
            format!("input has {} channels, conv expects {}", shape.c, g.in_channels),
        ));
    }
    let out = g
        .output_shape(shape)
        .ok_or_else(|| Error::shape("sparse_conv_1xk", format!("kernel does not fit input {shape}")))?;
    let k = g.kernel.1;
    let (in_pg, out_pg) = (g.in_per_group(), g.out_per_group());
    let input = x.data();
    let weight = spec.weight.data();
    let mut data = vec![0.0f32; out.numel()];
    for n in 0..out.n {
        for oc in 0..out.c {
            let group = oc / out_pg;
            let taps = &weight[oc * in_pg * k..][..in_pg * k];
            for oy in 0..out.h {
                let iy = (oy * g.stride.0) as isize - g.padding.0 as isize;
                let dst = &mut data[out.offset(n, oc, oy, 0)..][..out.w];
                if iy < 0 || iy >= shape.h as isize {
                    continue;
                }
                for icg in 0..in_pg {
                    let row = &input[shape.offset(n, group * in_pg + icg, iy as usize, 0)..][..shape.w];
                    for (v, &wv) in taps[icg * k..][..k].iter().enumerate() {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride.1 + v * g.dilation.1) as isize - g.padding.1 as isize;
                            if ix >= 0 && (ix as usize) < shape.w {
                                *d += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
            if let Some(b) = &spec.bias {
                for d in &mut data[out.offset(n, oc, 0, 0)..][..out.plane()] {
                    *d += b[oc];
                }
            }
        }
    }
    Tensor::from_vec(out, data)
}

/// Per-channel `(scale, shift)` with `bn(x) = (x - mean) * scale + beta`.
fn bn_scale<T: Scalar>(bn: &BatchNormSpec, c: usize) -> T {
    T::from_f32(bn.gamma[c]) / (T::from_f32(bn.running_var[c]) + T::from_f32(bn.eps)).sqrt()
}

pub(crate) fn batch_norm_raw<T: Scalar>(data: &mut [T], shape: Shape, bn: &BatchNormSpec) {
    for (i, plane) in data.chunks_mut(shape.plane()).enumerate() {
        let c = i % shape.c;
        let scale: T = bn_scale(bn, c);
        let mean = T::from_f32(bn.running_mean[c]);
        let beta = T::from_f32(bn.beta[c]);
        for v in plane {
            *v = (*v - mean) * scale + beta;
        }
    }
}

pub fn batch_norm(x: &Tensor, bn: &BatchNormSpec) -> Result<Tensor> {
    if x.shape().c != bn.channels() {
        return Err(Error::shape(
            "batch_norm",
            format!("input has {} channels, batch norm has {}", x.shape().c, bn.channels()),
        ));
    }
    let mut out = x.clone();
    batch_norm_raw(out.data_mut(), x.shape(), bn);
    Ok(out)
}

pub fn prelu(x: &Tensor, slopes: &[f32]) -> Result<Tensor> {
    let shape = x.shape();
    if slopes.len() != 1 && slopes.len() != shape.c {
        return Err(Error::shape(
            "prelu",
            format!("{} slopes for {} channels", slopes.len(), shape.c),
        ));
    }
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_mut(shape.plane()).enumerate() {
        let a = if slopes.len() == 1 { slopes[0] } else { slopes[i % shape.c] };
        for v in plane {
            if *v < 0.0 {
                *v *= a;
            }
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    out
}

pub fn add(inputs: &[&Tensor]) -> Result<Tensor> {
    let (first, rest) = inputs
        .split_first()
        .ok_or_else(|| Error::Usage("add needs at least one input".into()))?;
    let mut out = (*first).clone();
    for t in rest {
        if t.shape() != out.shape() {
            return Err(Error::shape(
                "add",
                format!("operands {} and {} differ", out.shape(), t.shape()),
            ));
        }
        for (d, s) in out.data_mut().iter_mut().zip(t.data()) {
            *d += s;
        }
    }
    Ok(out)
}

/// Bilinear resampling with half-pixel centers (`align_corners = false`):
/// source coordinate `(dst + 0.5) * in / out - 0.5`, clamped at zero, with
/// the upper neighbour clamped to the last row/column.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    let out = Shape::new(s.n, s.c, out_h, out_w)?;
    let axis = |in_len: usize, out_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = in_len as f32 / out_len as f32;
        (0..out_len)
            .map(|d| {
                let src = ((d as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let rows = axis(s.h, out_h);
    let cols = axis(s.w, out_w);
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for &(y0, y1, ly) in &rows {
                for &(x0, x1, lx) in &cols {
                    let top = (1.0 - lx) * src[y0 * s.w + x0] + lx * src[y0 * s.w + x1];
                    let bottom = (1.0 - lx) * src[y1 * s.w + x0] + lx * src[y1 * s.w + x1];
                    data.push((1.0 - ly) * top + ly * bottom);
                }
            }
        }
    }
    Tensor::from_vec(out, data)
}

/// Unmerged multi-branch semantics: `sum_i w_i * BN_i(conv_i(x))`, accumulated in branch order.
pub fn run_branch_block(x: &Tensor, block: &BranchBlock) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for branch in &block.branches {
        let mut y = conv2d(x, &branch.conv)?;
        if let Some(bn) = &branch.bn {
            let shape = y.shape();
            batch_norm_raw(y.data_mut(), shape, bn);
        }
        let w = branch.combine_weight;
        match &mut acc {
            None => {
                for v in y.data_mut() {
                    *v *= w;
                }
                acc = Some(y);
            }
            Some(a) => {
                if a.shape() != y.shape() {
                    return Err(Error::shape("branch_block", "branch outputs disagree"));
                }
                for (d, s) in a.data_mut().iter_mut().zip(y.data()) {
                    *d += w * s;
                }
            }
        }
    }
    acc.ok_or_else(|| Error::shape("branch_block", "block has no branches"))
}

/// Evaluates `block` in arbitrary precision on raw data, upcasting the stored weights.
pub fn run_branch_block_raw<T: Scalar>(input: &[T], shape: Shape, block: &BranchBlock) -> Result<(Shape, Vec<T>)> {
    let mut acc: Option<(Shape, Vec<T>)> = None;
    for branch in &block.branches {
        let weight: Vec<T> = branch.conv.weight.data().iter().map(|&v| T::from_f32(v)).collect();
        let bias: Option<Vec<T>> = branch
            .conv
            .bias
            .as_ref()
            .map(|b| b.iter().map(|&v| T::from_f32(v)).collect());
        let (out, mut y) = conv2d_raw(input, shape, &branch.conv.geometry(), &weight, bias.as_deref())?;
        if let Some(bn) = &branch.bn {
            batch_norm_raw(&mut y, out, bn);
        }
        let w = T::from_f32(branch.combine_weight);
        match &mut acc {
            None => acc = Some((out, y.into_iter().map(|v| w * v).collect())),
            Some((s, a)) => {
                if *s != out {
                    return Err(Error::shape("branch_block", "branch outputs disagree"));
                }
                for (d, v) in a.iter_mut().zip(y) {
                    *d = *d + w * v;
                }
            }
        }
    }
    acc.ok_or_else(|| Error::shape("branch_block", "block has no branches"))
}

/// Evaluates every node in order and returns the designated output.
///
/// `x` must have the declared `(c, h, w)`; any batch size is accepted.
pub fn run_graph(graph: &LayerGraph, x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = graph.input();
    let s = x.shape();
    if (s.c, s.h, s.w) != (c, h, w) {
        return Err(Error::shape(
            INPUT,
            format!("graph expects {c}x{h}x{w} inputs, got {s}"),
        ));
    }
    let nodes = graph.nodes();
    // Drop intermediates after their last consumer.
    let mut last_use: HashMap<&str, usize> = HashMap::new();
    for (i, node) in nodes.iter().enumerate() {
        for r in &node.inputs {
            last_use.insert(r.as_str(), i);
        }
    }
    let mut values: HashMap<&str, Tensor> = HashMap::new();
    for (i, node) in nodes.iter().enumerate() {
        let fetch = |r: &str| -> Result<&Tensor> {
            if r == INPUT {
                Ok(x)
            } else {
                values
                    .get(r)
                    .ok_or_else(|| Error::shape(&node.name, format!("`{r}` was not computed")))
            }
        };
        let first = fetch(&node.inputs[0])?;
        let at = |e: Error| match e {
            Error::Shape { msg, .. } => Error::shape(&node.name, msg),
            other => other,
        };
        let y = match &node.op {
            Op::Conv(spec) => conv2d(first, spec).map_err(at)?,
            Op::BatchNorm(bn) => batch_norm(first, bn).map_err(at)?,
            Op::Activation(Activation::Relu) => relu(first),
            Op::Activation(Activation::PRelu { slopes }) => prelu(first, slopes).map_err(at)?,
            Op::Sigmoid => sigmoid(first),
            Op::BranchBlock(block) => run_branch_block(first, block).map_err(at)?,
            Op::Resize { height, width } => bilinear_resize(first, *height, *width).map_err(at)?,
            Op::Add => {
                let operands = node
                    .inputs
                    .iter()
                    .map(|r| fetch(r))
                    .collect::<Result<Vec<_>>>()?;
                add(&operands).map_err(at)?
            }
        };
        for r in &node.inputs {
            if last_use.get(r.as_str()) == Some(&i) && r != graph.output() {
                values.remove(r.as_str());
            }
        }
        values.insert(&node.name, y);
    }
    values
        .remove(graph.output())
        .ok_or_else(|| Error::shape(graph.output(), "output was not computed"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_large_kernel_block, Node};
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn ones_conv(k: usize, p: usize) -> ConvSpec {
        let spec = ConvSpec::new(1, 1, (k, k), 1).unwrap().with_padding((p, p));
        let w = Tensor::new((1, 1, k, k), 1.0).unwrap();
        spec.with_weight(w).unwrap()
    }

    fn delta_conv(c: usize, k: usize) -> ConvSpec {
        let mut w = Tensor::zeros(Shape::new(c, 1, k, k).unwrap());
        for ch in 0..c {
            w.set(ch, 0, k / 2, k / 2, 1.0);
        }
        ConvSpec::new(c, c, (k, k), c)
            .unwrap()
            .with_same_padding()
            .with_weight(w)
            .unwrap()
    }

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        Tensor::random(shape, &mut Rng::new(seed), -1.0, 1.0).unwrap()
    }

    fn random_conv(
        in_c: usize,
        out_c: usize,
        k: (usize, usize),
        groups: usize,
        seed: u64,
    ) -> ConvSpec {
        let mut spec = ConvSpec::new(in_c, out_c, k, groups).unwrap();
        spec.bias = Some(vec![0.0; out_c]);
        spec.init_uniform(&mut Rng::new(seed), &mut Rng::new(seed + 1)).unwrap();
        spec
    }

    #[test]
    fn ones_kernel_counts_overlaps() {
        let x = Tensor::new((1, 1, 3, 3), 1.0).unwrap();
        let y = conv2d(&x, &ones_conv(3, 1)).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = random((2, 3, 9, 7), 5);
        for k in [1, 3, 5, 15] {
            let y = conv2d(&x, &delta_conv(3, k)).unwrap();
            assert_eq!(y, x, "k = {k}");
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::new((1, 2, 4, 4), 1.0).unwrap();
        assert!(matches!(conv2d(&x, &ones_conv(3, 1)), Err(Error::Shape { .. })));
    }

    #[test]
    fn strided_dilated_against_hand_values() {
        // 1x1x5x5 ramp, 2x2 ones kernel, stride 2, dilation 2, padding 1.
        let x = Tensor::from_vec(Shape::new(1, 1, 5, 5).unwrap(), (0..25).map(|v| v as f32).collect()).unwrap();
        let spec = ConvSpec::new(1, 1, (2, 2), 1)
            .unwrap()
            .with_stride((2, 2))
            .with_dilation((2, 2))
            .with_padding((1, 1))
            .with_weight(Tensor::new((1, 1, 2, 2), 1.0).unwrap())
            .unwrap();
        let y = conv2d(&x, &spec).unwrap();
        // out = floor((5 + 2 - 2 - 1) / 2) + 1 = 3; taps at rows/cols {-1, 1} + 2*o.
        assert_eq!(y.shape().dims(), [1, 1, 3, 3]);
        let at = |r: isize, c: isize| if (0..5).contains(&r) && (0..5).contains(&c) { (r * 5 + c) as f32 } else { 0.0 };
        for oy in 0..3isize {
            for ox in 0..3isize {
                let (r0, c0) = (2 * oy - 1, 2 * ox - 1);
                let expect = at(r0, c0) + at(r0, c0 + 2) + at(r0 + 2, c0) + at(r0 + 2, c0 + 2);
                assert_eq!(y.get(0, 0, oy as usize, ox as usize), expect);
            }
        }
    }

    #[test]
    fn sparse_row_kernel() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3).unwrap(), vec![1.0, 2.0, 3.0]).unwrap();
        let mut spec = ConvSpec::new(1, 1, (1, 3), 1).unwrap().with_padding((0, 1));
        spec.weight = Tensor::from_vec(Shape::new(1, 1, 1, 3).unwrap(), vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(sparse_conv_1xk(&x, &spec).unwrap().data(), &[3.0, 6.0, 5.0]);

        spec.weight = Tensor::from_vec(Shape::new(1, 1, 1, 3).unwrap(), vec![0.0, 1.0, 0.0]).unwrap();
        let x = random((2, 1, 4, 6), 3);
        assert_eq!(sparse_conv_1xk(&x, &spec).unwrap(), x);

        let square = ConvSpec::new(1, 1, (3, 3), 1).unwrap();
        assert!(matches!(sparse_conv_1xk(&x, &square), Err(Error::Usage(_))));
    }

    #[test]
    fn sparse_matches_conv2d_bitwise() {
        let x = random((2, 4, 5, 11), 8);
        for (groups, stride, dil) in [(1, 1, 1), (2, 2, 1), (4, 1, 2)] {
            let spec = random_conv(4, 4, (1, 3), groups, 17)
                .with_stride((1, stride))
                .with_dilation((1, dil))
                .with_padding((1, dil));
            let a = conv2d(&x, &spec).unwrap();
            let b = sparse_conv_1xk(&x, &spec).unwrap();
            assert_eq!(a.to_bytes(), b.to_bytes());
        }
    }

    #[test]
    fn grouped_equals_per_channel_slices() {
        let c = 3;
        let x = random((1, c, 6, 6), 21);
        let spec = random_conv(c, c, (3, 3), c, 4).with_same_padding();
        let y = conv2d(&x, &spec).unwrap();
        for ch in 0..c {
            let xs = Tensor::from_vec(Shape::new(1, 1, 6, 6).unwrap(), x.plane(0, ch).to_vec()).unwrap();
            let w = spec.weight.data()[ch * 9..(ch + 1) * 9].to_vec();
            let single = ConvSpec::new(1, 1, (3, 3), 1)
                .unwrap()
                .with_same_padding()
                .with_weight(Tensor::from_vec(Shape::new(1, 1, 3, 3).unwrap(), w).unwrap())
                .unwrap()
                .with_bias(vec![spec.bias.as_ref().unwrap()[ch]])
                .unwrap();
            let ys = conv2d(&xs, &single).unwrap();
            assert_eq!(ys.data(), y.plane(0, ch));
        }
    }

    #[test]
    fn branch_block_degenerate_cases() {
        let x = random((1, 2, 7, 7), 1);
        let mut block = build_large_kernel_block(2, 3, false).unwrap();
        block.branches[0].conv.init_uniform(&mut Rng::new(2), &mut Rng::new(3)).unwrap();
        let single = conv2d(&x, &block.branches[0].conv).unwrap();
        // Identity BN with eps: (v - 0) / sqrt(1 + 1e-5) is not exactly v, so drop BN.
        block.branches[0].bn = None;
        assert_eq!(run_branch_block(&x, &block).unwrap(), single);

        let mut twice = block.clone();
        twice.branches.push(block.branches[0].clone());
        for b in &mut twice.branches {
            b.combine_weight = 0.5;
        }
        let y = run_branch_block(&x, &twice).unwrap();
        assert!(y.max_abs_diff(&single).unwrap() <= 1e-6);
    }

    #[test]
    fn branch_block_is_sum_of_parts() {
        let x = random((2, 4, 10, 10), 9);
        let mut block = build_large_kernel_block(4, 5, true).unwrap();
        for (i, b) in block.branches.iter_mut().enumerate() {
            b.conv.init_uniform(&mut Rng::new(40 + i as u64), &mut Rng::new(0)).unwrap();
            b.bn.as_mut().unwrap().init_uniform(50 + i as u64, "bn");
            b.combine_weight = 0.5 + i as f32;
        }
        let y = run_branch_block(&x, &block).unwrap();
        let mut expect = Tensor::zeros(y.shape());
        for b in &block.branches {
            let part = batch_norm(&conv2d(&x, &b.conv).unwrap(), b.bn.as_ref().unwrap()).unwrap();
            for (d, s) in expect.data_mut().iter_mut().zip(part.data()) {
                *d += b.combine_weight * s;
            }
        }
        assert!(y.max_abs_diff(&expect).unwrap() <= 1e-6);
    }

    #[test]
    fn activations() {
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 2).unwrap(), vec![-2.0, 3.0, -4.0, 0.0]).unwrap();
        assert_eq!(prelu(&x, &[0.5, 0.25]).unwrap().data(), &[-1.0, 3.0, -1.0, 0.0]);
        assert_eq!(prelu(&x, &[1.0]).unwrap(), x);
        assert_eq!(relu(&x).data(), &[0.0, 3.0, 0.0, 0.0]);
        let s = sigmoid(&x);
        assert_eq!(s.data()[3], 0.5);
        assert!((s.data()[1] - 1.0 / (1.0 + (-3.0f32).exp())).abs() < 1e-7);
        assert!(prelu(&x, &[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn bilinear_cases() {
        let c = Tensor::new((1, 2, 3, 5), 0.75).unwrap();
        let up = bilinear_resize(&c, 7, 4).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.75));

        let x = random((1, 2, 5, 6), 2);
        assert_eq!(bilinear_resize(&x, 5, 6).unwrap(), x);

        // Source coords for 2 -> 4 are [0, 0.25, 0.75, 1] on both axes; value = 2y + x.
        let ramp = Tensor::from_vec(Shape::new(1, 1, 2, 2).unwrap(), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = bilinear_resize(&ramp, 4, 4).unwrap();
        let expect = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        assert_eq!(up.data(), &expect);
        assert!(bilinear_resize(&ramp, 0, 4).is_err());
    }

    #[test]
    fn graph_identity_cases() {
        let x = random((1, 3, 6, 6), 4);
        let g = LayerGraph::new("id", (3, 6, 6), 0, vec![Node::new("d", &[INPUT], Op::Conv(delta_conv(3, 3)))], "d").unwrap();
        assert_eq!(run_graph(&g, &x).unwrap(), x);

        let conv = random_conv(3, 2, (3, 3), 1, 6).with_same_padding();
        let g = LayerGraph::new(
            "p",
            (3, 6, 6),
            0,
            vec![
                Node::new("c", &[INPUT], Op::Conv(conv.clone())),
                Node::new("a", &["c"], Op::Activation(Activation::PRelu { slopes: vec![1.0, 1.0] })),
            ],
            "a",
        )
        .unwrap();
        assert_eq!(run_graph(&g, &x).unwrap(), conv2d(&x, &conv).unwrap());

        let wrong = random((1, 3, 5, 6), 4);
        assert!(matches!(run_graph(&g, &wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn graph_keeps_output_consumed_later() {
        let conv = random_conv(3, 3, (1, 1), 1, 6);
        let g = LayerGraph::new(
            "o",
            (3, 4, 4),
            0,
            vec![
                Node::new("c", &[INPUT], Op::Conv(conv.clone())),
                Node::new("s", &["c", "c"], Op::Add),
            ],
            "c",
        )
        .unwrap();
        let x = random((1, 3, 4, 4), 1);
        assert_eq!(run_graph(&g, &x).unwrap(), conv2d(&x, &conv).unwrap());
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let x = random((2, 6, 12, 12), 10);
        let spec = random_conv(6, 6, (5, 5), 2, 3).with_same_padding().with_stride((2, 1));
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| conv2d(&x, &spec).unwrap())
        };
        assert_eq!(run(1).to_bytes(), run(4).to_bytes());
    }

    #[test]
    fn valid_range_bounds() {
        // out 4, in 4, stride 1, tap offset 0, pad 1: ox=0 reads -1.
        assert_eq!(valid_range(4, 4, 1, 0, 1), (1, 4));
        assert_eq!(valid_range(4, 4, 1, 2, 1), (0, 3));
        assert_eq!(valid_range(2, 3, 2, 0, 0), (0, 2));
        assert_eq!(valid_range(3, 1, 1, 0, 5), (3, 3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn linearity(seed: u64, a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let x = random((1, 3, 8, 8), seed);
            let y = random((1, 3, 8, 8), seed ^ 1);
            let mut spec = random_conv(3, 4, (3, 3), 1, seed ^ 2).with_same_padding();
            spec.bias = None;
            let mut mix = x.clone();
            for (d, s) in mix.data_mut().iter_mut().zip(y.data()) {
                *d = a * *d + b * s;
            }
            let lhs = conv2d(&mix, &spec).unwrap();
            let cx = conv2d(&x, &spec).unwrap();
            let cy = conv2d(&y, &spec).unwrap();
            let dev = lhs.data().iter().zip(cx.data().iter().zip(cy.data()))
                .map(|(l, (p, q))| (l - (a * p + b * q)).abs())
                .fold(0.0f32, f32::max);
            prop_assert!(dev <= 1e-5, "deviation {dev}");
        }

        #[test]
        fn delta_identity_any_odd_k(half in 0usize..8, c in 1usize..4, seed: u64) {
            let k = 2 * half + 1;
            let x = random((1, c, 9, 9), seed);
            prop_assert_eq!(conv2d(&x, &delta_conv(c, k)).unwrap(), x);
        }

        #[test]
        fn outputs_finite(seed: u64) {
            let x = random((1, 2, 6, 6), seed);
            let spec = random_conv(2, 3, (3, 3), 1, seed).with_same_padding();
            let y = sigmoid(&bilinear_resize(&conv2d(&x, &spec).unwrap(), 11, 3).unwrap());
            prop_assert!(y.data().iter().all(|v| v.is_finite()));
        }
    }
}
