//! Layer descriptors, the layer graph and static shape inference.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Shape, Tensor};

/// Reserved reference naming the network input.
pub const INPUT: &str = "input";

/// Per-axis `(rows, columns)` pair.
pub type Pair = (usize, usize);

/// Stride, padding, dilation and grouping of a convolution, without weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Pair,
    pub stride: Pair,
    pub padding: Pair,
    pub dilation: Pair,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_per_group() * self.kernel.0 * self.kernel.1
    }

    /// Output `(h, w)` for an input plane, or `None` when the kernel does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<Pair> {
        let axis = |len: usize, k: usize, s: usize, p: usize, d: usize| {
            let span = d * (k - 1) + 1;
            let padded = len + 2 * p;
            (padded >= span).then(|| (padded - span) / s + 1)
        };
        Some((
            axis(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }

    pub fn output_shape(&self, input: Shape) -> Option<Shape> {
        let (h, w) = self.output_hw(input.h, input.w)?;
        Some(Shape {
            n: input.n,
            c: self.out_channels,
            h,
            w,
        })
    }

    /// Multiply-accumulates for one output of the given spatial size, per batch item.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (out_h * out_w * self.out_channels * self.in_per_group() * self.kernel.0 * self.kernel.1)
            as u64
    }

    fn check(&self) -> std::result::Result<(), String> {
        let g = self;
        if g.in_channels == 0 || g.out_channels == 0 || g.groups == 0 {
            return Err("channels and groups must be positive".into());
        }
        if g.kernel.0 == 0 || g.kernel.1 == 0 {
            return Err("kernel dims must be positive".into());
        }
        if g.stride.0 == 0 || g.stride.1 == 0 || g.dilation.0 == 0 || g.dilation.1 == 0 {
            return Err("stride and dilation must be positive".into());
        }
        if !g.in_channels.is_multiple_of(g.groups) || !g.out_channels.is_multiple_of(g.groups) {
            return Err(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                g.groups, g.in_channels, g.out_channels
            ));
        }
        Ok(())
    }
}

/// A 2-D convolution with its weights.
///
/// `weight` has shape `(out_channels, in_channels / groups, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Pair,
    pub stride: Pair,
    pub padding: Pair,
    pub dilation: Pair,
    pub groups: usize,
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

impl ConvSpec {
    /// Zero-weight convolution with stride 1, no padding and dilation 1.
    pub fn new(in_channels: usize, out_channels: usize, kernel: Pair, groups: usize) -> Result<Self> {
        let geometry = ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups,
        };
        geometry.check().map_err(Error::Dimension)?;
        let weight = Tensor::zeros(Shape::new(
            out_channels,
            in_channels / groups,
            kernel.0,
            kernel.1,
        )?);
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups,
            weight,
            bias: None,
        })
    }

    pub fn with_stride(mut self, stride: Pair) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: Pair) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: Pair) -> Self {
        self.dilation = dilation;
        self
    }

    /// Center-aligned padding `dilation * (k - 1) / 2` on each axis.
    pub fn with_same_padding(mut self) -> Self {
        self.padding = same_padding(self.kernel, self.dilation);
        self
    }

    pub fn with_weight(mut self, weight: Tensor) -> Result<Self> {
        self.weight = weight;
        self.check().map_err(Error::Dimension)?;
        Ok(self)
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Result<Self> {
        self.bias = Some(bias);
        self.check().map_err(Error::Dimension)?;
        Ok(self)
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
            groups: self.groups,
        }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.in_channels == self.out_channels
    }

    pub fn param_count(&self) -> u64 {
        (self.weight.data().len() + self.bias.as_ref().map_or(0, Vec::len)) as u64
    }

    /// Checks every structural invariant, including the weight shape.
    pub fn check(&self) -> std::result::Result<(), String> {
        let g = self.geometry();
        g.check()?;
        let expected = [g.out_channels, g.in_per_group(), g.kernel.0, g.kernel.1];
        if self.weight.shape().dims() != expected {
            return Err(format!(
                "weight shape {} does not match {}x{}x{}x{}",
                self.weight.shape(),
                expected[0],
                expected[1],
                expected[2],
                expected[3]
            ));
        }
        if let Some(b) = &self.bias {
            if b.len() != g.out_channels {
                return Err(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    g.out_channels
                ));
            }
        }
        Ok(())
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and bias (when present).
    pub fn init_uniform(&mut self, weight_rng: &mut Rng, bias_rng: &mut Rng) -> Result<()> {
        let fan_in = self.in_channels / self.groups * self.kernel.0 * self.kernel.1;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let s = self.weight.shape();
        self.weight = Tensor::random((s.n, s.c, s.h, s.w), weight_rng, -bound, bound)?;
        if let Some(b) = &mut self.bias {
            for v in b.iter_mut() {
                *v = bias_rng.uniform_f32(-bound, bound);
            }
        }
        Ok(())
    }
}

pub fn same_padding(kernel: Pair, dilation: Pair) -> Pair {
    (
        dilation.0 * (kernel.0.saturating_sub(1)) / 2,
        dilation.1 * (kernel.1.saturating_sub(1)) / 2,
    )
}

/// Inference-time batch normalization: `(x - mean) * gamma / sqrt(var + eps) + beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormSpec {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormSpec {
    pub const DEFAULT_EPS: f32 = 1e-5;

    /// Identity statistics: gamma 1, beta 0, mean 0, var 1.
    pub fn identity(channels: usize) -> Self {
        BatchNormSpec {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Trainable parameters (gamma and beta); running statistics are not counted.
    pub fn param_count(&self) -> u64 {
        2 * self.channels() as u64
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        let c = self.gamma.len();
        if c == 0 {
            return Err("batch norm needs at least one channel".into());
        }
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err("gamma, beta, running_mean and running_var lengths differ".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(format!("eps must be positive, got {}", self.eps));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err("running_var has negative entries".into());
        }
        Ok(())
    }

    /// gamma in [0.5, 1.5), beta and mean in [-0.1, 0.1), var in [0.5, 1.5).
    pub fn init_uniform(&mut self, seed: u64, key: &str) {
        let fill = |values: &mut Vec<f32>, part: &str, lo: f32, hi: f32| {
            let mut rng = Rng::for_key(seed, &format!("{key}.{part}"));
            for v in values.iter_mut() {
                *v = rng.uniform_f32(lo, hi);
            }
        };
        fill(&mut self.gamma, "gamma", 0.5, 1.5);
        fill(&mut self.beta, "beta", -0.1, 0.1);
        fill(&mut self.running_mean, "running_mean", -0.1, 0.1);
        fill(&mut self.running_var, "running_var", 0.5, 1.5);
    }
}

/// One parallel path of a [`BranchBlock`].
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub conv: ConvSpec,
    pub bn: Option<BatchNormSpec>,
    pub combine_weight: f32,
}

/// Parallel convolution paths whose outputs are summed:
/// `sum_i w_i * BN_i(conv_i(x))`.
///
/// Every branch kernel is `(k, k)`, `(1, k)` or `(k, 1)` for the block's
/// `base_kernel` k, and all branches agree on channels, groups, stride and
/// dilation. Padding is chosen per branch so that all outputs have the same
/// shape for every input size.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchBlock {
    pub base_kernel: usize,
    pub branches: Vec<Branch>,
}

impl BranchBlock {
    pub fn in_channels(&self) -> usize {
        self.branches[0].conv.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.branches[0].conv.out_channels
    }

    pub fn groups(&self) -> usize {
        self.branches[0].conv.groups
    }

    pub fn param_count(&self) -> u64 {
        self.branches
            .iter()
            .map(|b| b.conv.param_count() + b.bn.as_ref().map_or(0, BatchNormSpec::param_count))
            .sum()
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        let first = self.branches.first().ok_or("block has no branches")?;
        let k = self.base_kernel;
        let g0 = first.conv.geometry();
        for (i, b) in self.branches.iter().enumerate() {
            b.conv.check().map_err(|e| format!("branch {i}: {e}"))?;
            let g = b.conv.geometry();
            let (kh, kw) = g.kernel;
            if !(kh == 1 || kh == k) || !(kw == 1 || kw == k) {
                return Err(format!(
                    "branch {i}: kernel {kh}x{kw} is not one of {k}x{k}, 1x{k}, {k}x1"
                ));
            }
            if g.in_channels != g0.in_channels
                || g.out_channels != g0.out_channels
                || g.groups != g0.groups
                || g.stride != g0.stride
                || g.dilation != g0.dilation
            {
                return Err(format!(
                    "branch {i}: channels, groups, stride and dilation must match branch 0"
                ));
            }
            // floor((len + 2p - d(k-1) - 1)/s) + 1 agrees for every len iff 2p - d(k-1) agrees.
            if reach(&g) != reach(&g0) {
                return Err(format!(
                    "branch {i}: padding {:?} gives a different output size than branch 0",
                    g.padding
                ));
            }
            if let Some(bn) = &b.bn {
                bn.check().map_err(|e| format!("branch {i} batch norm: {e}"))?;
                if bn.channels() != g.out_channels {
                    return Err(format!(
                        "branch {i}: batch norm has {} channels, conv produces {}",
                        bn.channels(),
                        g.out_channels
                    ));
                }
            }
            if !b.combine_weight.is_finite() {
                return Err(format!("branch {i}: combine weight is not finite"));
            }
        }
        Ok(())
    }
}

fn reach(g: &ConvGeometry) -> (isize, isize) {
    let axis = |p: usize, d: usize, k: usize| 2 * p as isize - (d * (k - 1)) as isize;
    (
        axis(g.padding.0, g.dilation.0, g.kernel.0),
        axis(g.padding.1, g.dilation.1, g.kernel.1),
    )
}

/// Multi-branch block over `in_channels -> out_channels` with `groups` groups:
/// a `k x k` path, plus `1 x k` and `k x 1` paths when `with_sparse_branches`.
/// Each path carries its own identity batch norm and a combine weight of 1.
/// Weights start at zero.
pub fn build_branch_block(
    in_channels: usize,
    out_channels: usize,
    groups: usize,
    k: usize,
    with_sparse_branches: bool,
) -> Result<BranchBlock> {
    if k.is_multiple_of(2) {
        return Err(Error::Alignment(format!(
            "kernel size {k} is even; merged kernels need a center tap"
        )));
    }
    if k < 3 {
        return Err(Error::Dimension(format!("kernel size must be at least 3, got {k}")));
    }
    let mut kernels = vec![(k, k)];
    if with_sparse_branches {
        kernels.push((1, k));
        kernels.push((k, 1));
    }
    let branches = kernels
        .into_iter()
        .map(|kernel| {
            Ok(Branch {
                conv: ConvSpec::new(in_channels, out_channels, kernel, groups)?.with_same_padding(),
                bn: Some(BatchNormSpec::identity(out_channels)),
                combine_weight: 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BranchBlock {
        base_kernel: k,
        branches,
    })
}

/// Depthwise large-kernel block (`groups == channels`).
pub fn build_large_kernel_block(
    channels: usize,
    k: usize,
    with_sparse_branches: bool,
) -> Result<BranchBlock> {
    if channels == 0 {
        return Err(Error::Dimension("channels must be at least 1".into()));
    }
    build_branch_block(channels, channels, channels, k, with_sparse_branches)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Relu,
    /// Per-channel slopes for negative inputs; a single slope is shared by all channels.
    PRelu { slopes: Vec<f32> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv(ConvSpec),
    BatchNorm(BatchNormSpec),
    Activation(Activation),
    BranchBlock(BranchBlock),
    /// Bilinear upsampling or downsampling to a fixed spatial size.
    Resize { height: usize, width: usize },
    /// Elementwise sum of two or more inputs.
    Add,
    Sigmoid,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv(_) => "conv",
            Op::BatchNorm(_) => "batch_norm",
            Op::Activation(Activation::Relu) => "relu",
            Op::Activation(Activation::PRelu { .. }) => "prelu",
            Op::BranchBlock(_) => "branch_block",
            Op::Resize { .. } => "resize",
            Op::Add => "add",
            Op::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub inputs: Vec<String>,
    pub op: Op,
}

impl Node {
    pub fn new(name: impl Into<String>, inputs: &[&str], op: Op) -> Self {
        Node {
            name: name.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            op,
        }
    }
}

/// A validated network: nodes in topological order, each consuming the
/// network input or earlier nodes, with one designated output.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    name: String,
    input: (usize, usize, usize),
    seed: u64,
    nodes: Vec<Node>,
    output: String,
}

impl LayerGraph {
    /// Builds and validates a graph. `input` is `(channels, height, width)`;
    /// `seed` is kept for weight regeneration and serialization.
    pub fn new(
        name: impl Into<String>,
        input: (usize, usize, usize),
        seed: u64,
        nodes: Vec<Node>,
        output: impl Into<String>,
    ) -> Result<Self> {
        let graph = LayerGraph {
            name: name.into(),
            input,
            seed,
            nodes,
            output: output.into(),
        };
        graph.validate_structure()?;
        graph.shape_infer()?;
        Ok(graph)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape {
            n: batch,
            c: self.input.0,
            h: self.input.1,
            w: self.input.2,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output(&self) -> &str {
        &self.output
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn into_nodes(self) -> Vec<Node> {
        self.nodes
    }

    /// Same network with a different declared input size. Resize targets are kept.
    pub fn with_input(&self, input: (usize, usize, usize)) -> Result<Self> {
        LayerGraph::new(
            self.name.clone(),
            input,
            self.seed,
            self.nodes.clone(),
            self.output.clone(),
        )
    }

    /// First node that performs convolution (conv or branch block), if any.
    pub fn first_conv(&self) -> Option<&Node> {
        self.nodes
            .iter()
            .find(|n| matches!(n.op, Op::Conv(_) | Op::BranchBlock(_)))
    }

    fn validate_structure(&self) -> Result<()> {
        let fail = |index: usize, node: &str, msg: String| Error::Validation {
            index,
            node: node.to_string(),
            msg,
        };
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "declared input {c}x{h}x{w} has a zero dimension"
            )));
        }
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.name.is_empty() || node.name == INPUT {
                return Err(fail(i, &node.name, format!("`{}` is not a valid node name", node.name)));
            }
            if seen.contains_key(node.name.as_str()) {
                return Err(fail(i, &node.name, "duplicate node name".into()));
            }
            let arity_ok = match node.op {
                Op::Add => node.inputs.len() >= 2,
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(fail(
                    i,
                    &node.name,
                    format!("{} cannot take {} inputs", node.op.kind(), node.inputs.len()),
                ));
            }
            for r in &node.inputs {
                if r != INPUT && !seen.contains_key(r.as_str()) {
                    let msg = if self.nodes.iter().any(|n| &n.name == r) {
                        format!("input reference `{r}` points forward; nodes must be topologically ordered")
                    } else {
                        format!("unknown input reference `{r}`")
                    };
                    return Err(fail(i, &node.name, msg));
                }
            }
            let params = match &node.op {
                Op::Conv(spec) => spec.check(),
                Op::BatchNorm(bn) => bn.check(),
                Op::BranchBlock(b) => b.check(),
                Op::Activation(Activation::PRelu { slopes }) if slopes.is_empty() => {
                    Err("prelu needs at least one slope".into())
                }
                Op::Resize { height, width } if *height == 0 || *width == 0 => {
                    Err("resize target must be positive".into())
                }
                _ => Ok(()),
            };
            params.map_err(|msg| fail(i, &node.name, msg))?;
            seen.insert(&node.name, i);
        }
        if !seen.contains_key(self.output.as_str()) {
            return Err(Error::Validation {
                index: self.nodes.len(),
                node: self.output.clone(),
                msg: format!("output `{}` is not a node of the graph", self.output),
            });
        }
        Ok(())
    }

    /// Output shape of every node for a batch of one, in node order.
    pub fn shape_infer(&self) -> Result<Vec<Shape>> {
        self.shape_infer_batch(1)
    }

    pub fn shape_infer_batch(&self, batch: usize) -> Result<Vec<Shape>> {
        let input = self.input_shape(batch);
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        let mut index: HashMap<&str, usize> = HashMap::new();
        for node in &self.nodes {
            let lookup = |r: &str| -> Result<Shape> {
                if r == INPUT {
                    return Ok(input);
                }
                index
                    .get(r)
                    .map(|&i| shapes[i])
                    .ok_or_else(|| Error::shape(&node.name, format!("unknown input `{r}`")))
            };
            let x = lookup(&node.inputs[0])?;
            let channels = |want: usize, what: &str| -> Result<()> {
                if x.c != want {
                    return Err(Error::shape(
                        &node.name,
                        format!("{what} expects {want} channels, input `{}` has {}", node.inputs[0], x.c),
                    ));
                }
                Ok(())
            };
            let out = match &node.op {
                Op::Conv(spec) => {
                    channels(spec.in_channels, "conv")?;
                    conv_out(&node.name, &spec.geometry(), x)?
                }
                Op::BranchBlock(block) => {
                    channels(block.in_channels(), "branch block")?;
                    let mut out = None;
                    for b in &block.branches {
                        let s = conv_out(&node.name, &b.conv.geometry(), x)?;
                        if out.is_some_and(|o| o != s) {
                            return Err(Error::shape(&node.name, "branch outputs disagree"));
                        }
                        out = Some(s);
                    }
                    out.unwrap()
                }
                Op::BatchNorm(bn) => {
                    channels(bn.channels(), "batch norm")?;
                    x
                }
                Op::Activation(Activation::PRelu { slopes }) => {
                    if slopes.len() != 1 {
                        channels(slopes.len(), "prelu")?;
                    }
                    x
                }
                Op::Activation(Activation::Relu) | Op::Sigmoid => x,
                Op::Resize { height, width } => Shape {
                    h: *height,
                    w: *width,
                    ..x
                },
                Op::Add => {
                    for r in &node.inputs[1..] {
                        let other = lookup(r)?;
                        if other != x {
                            return Err(Error::shape(
                                &node.name,
                                format!(
                                    "add operands disagree: `{}` is {x}, `{r}` is {other}",
                                    node.inputs[0]
                                ),
                            ));
                        }
                    }
                    x
                }
            };
            index.insert(&node.name, shapes.len());
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Shape of the tensor a given reference resolves to (`input` or a node), batch one.
    pub fn shape_of(&self, shapes: &[Shape], reference: &str) -> Option<Shape> {
        if reference == INPUT {
            return Some(self.input_shape(1));
        }
        self.nodes
            .iter()
            .position(|n| n.name == reference)
            .map(|i| shapes[i])
    }
}

fn conv_out(node: &str, g: &ConvGeometry, x: Shape) -> Result<Shape> {
    g.output_shape(x).ok_or_else(|| {
        Error::shape(
            node,
            format!(
                "kernel {}x{} (dilation {:?}, padding {:?}) does not fit input {x}",
                g.kernel.0, g.kernel.1, g.dilation, g.padding
            ),
        )
    })
}

impl fmt::Display for LayerGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (c, h, w) = self.input;
        write!(
            f,
            "{} ({} nodes, input {c}x{h}x{w}, output `{}`)",
            self.name,
            self.nodes.len(),
            self.output
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_conv(c_out: usize, k: usize, s: usize, p: usize) -> LayerGraph {
        let conv = ConvSpec::new(3, c_out, (k, k), 1)
            .unwrap()
            .with_stride((s, s))
            .with_padding((p, p));
        LayerGraph::new("g", (3, 224, 224), 0, vec![Node::new("c", &[INPUT], Op::Conv(conv))], "c")
            .unwrap()
    }

    #[test]
    fn conv_output_shapes() {
        let s = single_conv(8, 3, 1, 1).shape_infer().unwrap();
        assert_eq!(s[0], Shape { n: 1, c: 8, h: 224, w: 224 });
        let s = single_conv(8, 15, 1, 7).shape_infer().unwrap();
        assert_eq!(s[0], Shape { n: 1, c: 8, h: 224, w: 224 });
        // floor((224 + 2 - 2 - 1) / 2) + 1 = 112
        let s = single_conv(8, 3, 2, 1).shape_infer().unwrap();
        assert_eq!(s[0], Shape { n: 1, c: 8, h: 112, w: 112 });
    }

    #[test]
    fn kernel_larger_than_input_is_shape_error() {
        let conv = ConvSpec::new(1, 1, (5, 5), 1).unwrap();
        let err = LayerGraph::new("g", (1, 3, 3), 0, vec![Node::new("big", &[INPUT], Op::Conv(conv))], "big")
            .unwrap_err();
        assert!(matches!(err, Error::Shape { ref node, .. } if node == "big"), "{err}");
    }

    #[test]
    fn large_kernel_block_layouts() {
        let b = build_large_kernel_block(48, 15, true).unwrap();
        assert_eq!(b.branches.len(), 3);
        let kernels: Vec<_> = b.branches.iter().map(|b| b.conv.kernel).collect();
        assert_eq!(kernels, vec![(15, 15), (1, 15), (15, 1)]);
        assert!(b.branches.iter().all(|b| b.conv.is_depthwise() && b.combine_weight == 1.0));
        assert_eq!(b.param_count(), 48 * (225 + 15 + 15) + 3 * 2 * 48);

        let b = build_large_kernel_block(12, 9, false).unwrap();
        assert_eq!(b.branches.len(), 1);
        assert_eq!(b.branches[0].conv.weight.shape().dims(), [12, 1, 9, 9]);

        let b = build_large_kernel_block(1, 3, true).unwrap();
        let kernels: Vec<_> = b.branches.iter().map(|b| b.conv.kernel).collect();
        assert_eq!(kernels, vec![(3, 3), (1, 3), (3, 1)]);
        assert_eq!(b.branches[1].conv.padding, (0, 1));
        assert_eq!(b.branches[2].conv.padding, (1, 0));
    }

    #[test]
    fn even_kernel_block_rejected() {
        assert!(matches!(build_large_kernel_block(4, 4, true), Err(Error::Alignment(_))));
    }

    #[test]
    fn graph_structure_errors() {
        let conv = || Op::Conv(ConvSpec::new(3, 3, (1, 1), 1).unwrap());
        let dangling = LayerGraph::new("g", (3, 4, 4), 0, vec![Node::new("a", &["nope"], conv())], "a");
        assert!(matches!(dangling, Err(Error::Validation { ref msg, .. }) if msg.contains("`nope`")));

        let forward = LayerGraph::new(
            "g",
            (3, 4, 4),
            0,
            vec![Node::new("a", &["b"], conv()), Node::new("b", &[INPUT], conv())],
            "b",
        );
        assert!(matches!(forward, Err(Error::Validation { index: 0, .. })));

        let dup = LayerGraph::new(
            "g",
            (3, 4, 4),
            0,
            vec![Node::new("a", &[INPUT], conv()), Node::new("a", &[INPUT], conv())],
            "a",
        );
        assert!(matches!(dup, Err(Error::Validation { index: 1, .. })));

        let no_out = LayerGraph::new("g", (3, 4, 4), 0, vec![Node::new("a", &[INPUT], conv())], "z");
        assert!(matches!(no_out, Err(Error::Validation { .. })));

        let unary_add = LayerGraph::new("g", (3, 4, 4), 0, vec![Node::new("a", &[INPUT], Op::Add)], "a");
        assert!(matches!(unary_add, Err(Error::Validation { .. })));
    }

    #[test]
    fn bn_length_mismatch_is_rejected() {
        let nodes = vec![
            Node::new("c", &[INPUT], Op::Conv(ConvSpec::new(3, 8, (3, 3), 1).unwrap())),
            Node::new("bn", &["c"], Op::BatchNorm(BatchNormSpec::identity(4))),
        ];
        let err = LayerGraph::new("g", (3, 8, 8), 0, nodes, "bn").unwrap_err();
        assert!(matches!(err, Error::Shape { ref node, .. } if node == "bn"), "{err}");
    }

    #[test]
    fn add_operands_must_agree() {
        let nodes = vec![
            Node::new("a", &[INPUT], Op::Conv(ConvSpec::new(3, 3, (3, 3), 1).unwrap())),
            Node::new("sum", &["a", INPUT], Op::Add),
        ];
        assert!(matches!(
            LayerGraph::new("g", (3, 8, 8), 0, nodes, "sum"),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn mixed_branch_geometry_rejected() {
        let mut b = build_large_kernel_block(2, 3, true).unwrap();
        b.branches[1].conv.padding = (1, 1);
        assert!(b.check().is_err());
        let mut b = build_large_kernel_block(2, 3, true).unwrap();
        b.branches[2].conv.stride = (2, 2);
        assert!(b.check().is_err());
    }

    #[test]
    fn grouped_weight_shape_checked() {
        let conv = ConvSpec::new(4, 6, (3, 3), 2).unwrap();
        assert_eq!(conv.weight.shape().dims(), [6, 2, 3, 3]);
        let bad = Tensor::zeros(Shape::new(6, 4, 3, 3).unwrap());
        assert!(conv.with_weight(bad).is_err());
        assert!(ConvSpec::new(4, 6, (3, 3), 4).is_err());
    }

    proptest! {
        #[test]
        fn branch_outputs_always_agree(
            half_k in 1usize..8,
            channels in 1usize..6,
            h in 1usize..40,
            w in 1usize..40,
            stride in 1usize..3,
            dilation in 1usize..3,
        ) {
            let k = 2 * half_k + 1;
            let mut block = build_large_kernel_block(channels, k, true).unwrap();
            for b in &mut block.branches {
                b.conv.stride = (stride, stride);
                b.conv.dilation = (dilation, dilation);
                b.conv.padding = same_padding(b.conv.kernel, (dilation, dilation));
            }
            prop_assert!(block.check().is_ok());
            let x = Shape { n: 1, c: channels, h, w };
            let outs: Vec<_> = block.branches.iter().map(|b| b.conv.geometry().output_shape(x)).collect();
            prop_assert!(outs.iter().all(|o| *o == outs[0]));
        }
    }
}
