//! MAC and parameter accounting, optic/digital partitions, fabrication
//! trade-off enumeration and the mIoU metric.
//!
//! MACs count convolution multiply-accumulates only. Batch norm,
//! activations, additions and resizes contribute zero MACs; batch norm
//! contributes `2 * C` parameters (scale and shift) and PReLU one per slope.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, LayerGraph, Op};
use crate::tensor::Tensor;

/// Name accepted by [`resolve_offload`] for the graph's first convolution.
pub const FIRST: &str = "first";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCost {
    pub name: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kernel: Option<[usize; 2]>,
    /// Output `[c, h, w]` at batch 1.
    pub output: [usize; 3],
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub model: String,
    pub input: [usize; 3],
    pub nodes: Vec<NodeCost>,
    pub total_macs: u64,
    pub total_params: u64,
    /// First convolution or branch block, if the graph has one.
    pub first_conv: Option<String>,
    pub first_conv_macs: u64,
    pub model_mmacs: f64,
    pub first_conv_ratio: f64,
}

impl FlopsReport {
    pub fn node(&self, name: &str) -> Option<&NodeCost> {
        self.nodes.iter().find(|n| n.name == name)
    }
}

fn node_params(op: &Op) -> u64 {
    match op {
        Op::Conv(c) => c.param_count(),
        Op::BatchNorm(bn) => bn.param_count(),
        Op::BranchBlock(b) => b.param_count(),
        Op::Activation(Activation::PRelu { slopes }) => slopes.len() as u64,
        Op::Activation(Activation::Relu) | Op::Resize { .. } | Op::Add | Op::Sigmoid => 0,
    }
}

/// Per-node MACs and parameters at batch 1.
pub fn count_macs(graph: &LayerGraph) -> Result<FlopsReport> {
    let shapes = graph.shape_infer()?;
    let mut nodes = Vec::with_capacity(shapes.len());
    for (node, out) in graph.nodes().iter().zip(&shapes) {
        let (macs, kernel) = match &node.op {
            Op::Conv(c) => (c.geometry().macs(out.h, out.w), Some([c.kernel.0, c.kernel.1])),
            Op::BranchBlock(b) => (
                b.branches.iter().map(|br| br.conv.geometry().macs(out.h, out.w)).sum(),
                Some([b.base_kernel, b.base_kernel]),
            ),
            _ => (0, None),
        };
        nodes.push(NodeCost {
            name: node.name.clone(),
            kind: node.op.kind().to_string(),
            kernel,
            output: [out.c, out.h, out.w],
            macs,
            params: node_params(&node.op),
        });
    }
    let total_macs = nodes.iter().map(|n| n.macs).sum();
    let total_params = nodes.iter().map(|n| n.params).sum();
    let first_conv = graph.first_conv().map(|n| n.name.clone());
    let first_conv_macs = first_conv
        .as_ref()
        .and_then(|f| nodes.iter().find(|n| &n.name == f))
        .map_or(0, |n| n.macs);
    let (c, h, w) = graph.input();
    Ok(FlopsReport {
        model: graph.name().to_string(),
        input: [c, h, w],
        nodes,
        total_macs,
        total_params,
        first_conv,
        first_conv_macs,
        model_mmacs: mmacs(total_macs),
        first_conv_ratio: ratio(first_conv_macs, total_macs),
    })
}

fn ratio(part: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        part as f64 / total as f64
    }
}

pub fn mmacs(macs: u64) -> f64 {
    macs as f64 / 1e6
}

/// `num / den` scaled by `10^decimals`, rounded half-to-even in exact integer arithmetic.
fn scaled_half_even(num: u128, den: u128) -> u128 {
    let (q, r) = (num / den, num % den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal if q % 2 == 1 => q + 1,
        _ => q,
    }
}

fn two_decimals(hundredths: u128) -> String {
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// MACs as MMacs with two decimals, round-half-even.
pub fn format_mmacs(macs: u64) -> String {
    two_decimals(scaled_half_even(macs as u128, 10_000))
}

/// Signed variant of [`format_mmacs`].
pub fn format_mmacs_signed(macs: i128) -> String {
    let s = format_mmacs(macs.unsigned_abs() as u64);
    if macs < 0 {
        format!("-{s}")
    } else {
        s
    }
}

/// `part / total` as a percentage with two decimals, round-half-even.
pub fn format_percent(part: u64, total: u64) -> String {
    if total == 0 {
        return "0.00".into();
    }
    two_decimals(scaled_half_even(part as u128 * 10_000, total as u128))
}

/// Round half to even at `decimals` places.
pub fn round_half_even(v: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (v * scale).round_ties_even() / scale
}

/// Digital MMacs implied by a table row: `total * (1 - percent / 100)` at two decimals.
pub fn digital_mmacs_from_ratio(total_mmacs: f64, first_conv_percent: f64) -> f64 {
    round_half_even(total_mmacs * (1.0 - first_conv_percent / 100.0), 2)
}

/// Replaces [`FIRST`] with the report's first convolution.
pub fn resolve_offload(report: &FlopsReport, names: &[String]) -> Result<Vec<String>> {
    names
        .iter()
        .map(|n| {
            if n == FIRST {
                report
                    .first_conv
                    .clone()
                    .ok_or_else(|| Error::Lookup(format!("{FIRST} (graph has no convolution)")))
            } else {
                Ok(n.clone())
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub model: String,
    pub offloaded: Vec<String>,
    pub total_macs: u64,
    pub offloaded_macs: u64,
    pub digital_macs: u64,
    pub model_mmacs: f64,
    pub offloaded_mmacs: f64,
    pub digital_mmacs: f64,
    pub offloaded_ratio: f64,
}

/// Splits a report into offloaded (optical) and digital MACs. Names are deduplicated.
pub fn partition(report: &FlopsReport, offload: &[String]) -> Result<PartitionReport> {
    let by_name: HashMap<&str, u64> = report.nodes.iter().map(|n| (n.name.as_str(), n.macs)).collect();
    let mut seen = BTreeSet::new();
    let mut offloaded = Vec::new();
    let mut offloaded_macs = 0u64;
    for name in offload {
        let macs = *by_name.get(name.as_str()).ok_or_else(|| Error::Lookup(name.clone()))?;
        if seen.insert(name.clone()) {
            offloaded.push(name.clone());
            offloaded_macs += macs;
        }
    }
    let digital_macs = report.total_macs - offloaded_macs;
    Ok(PartitionReport {
        model: report.model.clone(),
        offloaded,
        total_macs: report.total_macs,
        offloaded_macs,
        digital_macs,
        model_mmacs: mmacs(report.total_macs),
        offloaded_mmacs: mmacs(offloaded_macs),
        digital_mmacs: mmacs(digital_macs),
        offloaded_ratio: ratio(offloaded_macs, report.total_macs),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDelta {
    pub name: String,
    pub before_macs: u64,
    pub after_macs: u64,
    pub saved_macs: i128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionDelta {
    pub before_macs: u64,
    pub after_macs: u64,
    pub saved_macs: i128,
    pub saved_mmacs: f64,
    /// Nodes whose MACs changed, in `before` order, then nodes only in `after`.
    pub nodes: Vec<NodeDelta>,
}

pub fn compression_delta(before: &FlopsReport, after: &FlopsReport) -> CompressionDelta {
    let after_by: HashMap<&str, u64> = after.nodes.iter().map(|n| (n.name.as_str(), n.macs)).collect();
    let before_names: BTreeSet<&str> = before.nodes.iter().map(|n| n.name.as_str()).collect();
    let mut nodes = Vec::new();
    let mut push = |name: &str, b: u64, a: u64| {
        if a != b {
            nodes.push(NodeDelta {
                name: name.to_string(),
                before_macs: b,
                after_macs: a,
                saved_macs: b as i128 - a as i128,
            });
        }
    };
    for n in &before.nodes {
        push(&n.name, n.macs, after_by.get(n.name.as_str()).copied().unwrap_or(0));
    }
    for n in after.nodes.iter().filter(|n| !before_names.contains(n.name.as_str())) {
        push(&n.name, 0, n.macs);
    }
    let saved = before.total_macs as i128 - after.total_macs as i128;
    CompressionDelta {
        before_macs: before.total_macs,
        after_macs: after.total_macs,
        saved_macs: saved,
        saved_mmacs: saved as f64 / 1e6,
        nodes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpticBudget {
    pub max_channels: u64,
    pub max_side: u64,
    /// Upper bound on `channels * side * side`.
    pub aperture_budget: u64,
}

impl OpticBudget {
    pub fn new(max_channels: u64, max_side: u64, aperture_budget: u64) -> Result<Self> {
        if max_channels == 0 || max_side == 0 || aperture_budget == 0 {
            return Err(Error::Range(format!(
                "budget fields must be positive, got {max_channels},{max_side},{aperture_budget}"
            )));
        }
        Ok(Self {
            max_channels,
            max_side,
            aperture_budget,
        })
    }

    pub fn admits(&self, channels: u64, side: u64) -> bool {
        channels <= self.max_channels
            && side <= self.max_side
            && (channels as u128) * (side as u128) * (side as u128) <= self.aperture_budget as u128
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Largest input side first, then most channels.
    SizeFirst,
    /// Most channels first, then largest side.
    ChannelFirst,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "size-first" => Ok(Policy::SizeFirst),
            "channel-first" => Ok(Policy::ChannelFirst),
            other => Err(Error::Usage(format!(
                "unknown policy `{other}` (expected size-first or channel-first)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradeoffConfig {
    pub channels: u64,
    pub side: u64,
    pub aperture: u64,
}

/// Feasible `(channels, side)` pairs from the candidate grid, ranked by `policy`.
/// Duplicate candidates are collapsed; an infeasible grid yields an empty list.
pub fn enumerate_tradeoff(
    budget: &OpticBudget,
    channels: &[u64],
    sides: &[u64],
    policy: Policy,
) -> Result<Vec<TradeoffConfig>> {
    if channels.is_empty() || sides.is_empty() {
        return Err(Error::Usage("candidate channel and side lists must be non-empty".into()));
    }
    let cs: BTreeSet<u64> = channels.iter().copied().collect();
    let ss: BTreeSet<u64> = sides.iter().copied().collect();
    let mut out: Vec<TradeoffConfig> = cs
        .iter()
        .flat_map(|&c| ss.iter().map(move |&s| (c, s)))
        .filter(|&(c, s)| budget.admits(c, s))
        .map(|(channels, side)| TradeoffConfig {
            channels,
            side,
            aperture: channels * side * side,
        })
        .collect();
    match policy {
        Policy::SizeFirst => out.sort_by_key(|t| Reverse((t.side, t.channels))),
        Policy::ChannelFirst => out.sort_by_key(|t| Reverse((t.channels, t.side))),
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positive: Vec<u64>,
    pub false_positive: Vec<u64>,
    pub false_negative: Vec<u64>,
}

impl ConfusionCounts {
    pub fn classes(&self) -> usize {
        self.true_positive.len()
    }

    /// IoU of one class; 1 when the class is absent from both masks.
    pub fn iou(&self, class: usize) -> f64 {
        let tp = self.true_positive[class];
        let union = tp + self.false_positive[class] + self.false_negative[class];
        if union == 0 {
            1.0
        } else {
            tp as f64 / union as f64
        }
    }

    pub fn miou(&self) -> f64 {
        (0..self.classes()).map(|c| self.iou(c)).sum::<f64>() / self.classes() as f64
    }
}

fn class_id(v: f32, classes: usize, which: &str, index: usize) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
        Ok(v as usize)
    } else {
        Err(Error::Range(format!(
            "{which}[{index}] = {v} is not a class id in 0..{classes}"
        )))
    }
}

/// Per-class pixel counts of `pred` against `truth`. Both hold integer class ids.
pub fn confusion(pred: &Tensor, truth: &Tensor, classes: usize) -> Result<ConfusionCounts> {
    if classes == 0 {
        return Err(Error::Range("need at least one class".into()));
    }
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "miou",
            format!("prediction {} vs truth {}", pred.shape(), truth.shape()),
        ));
    }
    let mut counts = ConfusionCounts {
        true_positive: vec![0; classes],
        false_positive: vec![0; classes],
        false_negative: vec![0; classes],
    };
    for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
        let p = class_id(p, classes, "pred", i)?;
        let t = class_id(t, classes, "truth", i)?;
        if p == t {
            counts.true_positive[p] += 1;
        } else {
            counts.false_positive[p] += 1;
            counts.false_negative[t] += 1;
        }
    }
    Ok(counts)
}

pub fn miou(pred: &Tensor, truth: &Tensor, classes: usize) -> Result<f64> {
    Ok(confusion(pred, truth, classes)?.miou())
}

/// Binary mask from probabilities: 1 where `p >= threshold`, else 0.
pub fn threshold_mask(probabilities: &Tensor, threshold: f32) -> Tensor {
    let data = probabilities
        .data()
        .iter()
        .map(|&p| if p >= threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(probabilities.shape(), data).expect("same shape, finite values")
}

fn kernel_label(k: Option<[usize; 2]>) -> String {
    k.map_or_else(|| "-".into(), |[h, w]| format!("{h}x{w}"))
}

fn render_rows(out: &mut String, rows: &[Vec<String>], right_align_from: usize) {
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for row in rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            if c >= right_align_from {
                let _ = write!(line, "{cell:>w$}", w = widths[c]);
            } else {
                let _ = write!(line, "{cell:<w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
}

/// Human-readable table: one row per node, then the summary row
/// `Model | Kernel size | 1st conv FLOPs (%) | Model FLOPs | Digital FLOPs`.
pub fn render_table(report: &FlopsReport) -> String {
    let mut out = String::new();
    let [c, h, w] = report.input;
    let _ = writeln!(out, "model {}  input {c}x{h}x{w}", report.model);
    out.push('\n');
    let mut rows = vec![vec![
        "node".to_string(),
        "op".into(),
        "kernel".into(),
        "output".into(),
        "MACs".into(),
        "params".into(),
    ]];
    for n in &report.nodes {
        let [c, h, w] = n.output;
        rows.push(vec![
            n.name.clone(),
            n.kind.clone(),
            kernel_label(n.kernel),
            format!("{c}x{h}x{w}"),
            n.macs.to_string(),
            n.params.to_string(),
        ]);
    }
    rows.push(vec![
        "total".into(),
        String::new(),
        String::new(),
        String::new(),
        report.total_macs.to_string(),
        report.total_params.to_string(),
    ]);
    render_rows(&mut out, &rows, 4);
    out.push('\n');

    let first_kernel = report
        .first_conv
        .as_ref()
        .and_then(|f| report.node(f))
        .and_then(|n| n.kernel);
    let summary = vec![
        vec![
            "Model".to_string(),
            "Kernel size".into(),
            "1st conv FLOPs (%)".into(),
            "Model FLOPs (MMacs)".into(),
            "Digital FLOPs (MMacs)".into(),
        ],
        vec![
            report.model.clone(),
            kernel_label(first_kernel),
            format_percent(report.first_conv_macs, report.total_macs),
            format_mmacs(report.total_macs),
            format_mmacs(report.total_macs - report.first_conv_macs),
        ],
    ];
    render_rows(&mut out, &summary, usize::MAX);
    out.push('\n');
    out.push_str(
        "MACs count convolution multiply-accumulates only; batch norm, activation, add and resize count 0.\n\
         Digital FLOPs exclude the first convolution, which runs on the optical front-end.\n",
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_large_kernel_block, BatchNormSpec, ConvSpec, Node, INPUT};
    use crate::tensor::Shape;

    fn mask(h: usize, w: usize, values: &[f32]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, h, w).unwrap(), values.to_vec()).unwrap()
    }

    fn single(op: Op, input: (usize, usize, usize)) -> LayerGraph {
        LayerGraph::new("one", input, 0, vec![Node::new("n", &[INPUT], op)], "n").unwrap()
    }

    #[test]
    fn unit_conv_is_one_mac() {
        let r = count_macs(&single(Op::Conv(ConvSpec::new(1, 1, (1, 1), 1).unwrap()), (1, 1, 1))).unwrap();
        assert_eq!(r.total_macs, 1);
        assert_eq!(r.first_conv_ratio, 1.0);
    }

    #[test]
    fn stem_conv_macs() {
        let conv = ConvSpec::new(3, 16, (3, 3), 1).unwrap().with_same_padding();
        let r = count_macs(&single(Op::Conv(conv), (3, 224, 224))).unwrap();
        assert_eq!(r.total_macs, 21_676_032);
    }

    #[test]
    fn depthwise_large_kernel_macs() {
        let conv = ConvSpec::new(48, 48, (15, 15), 48).unwrap().with_same_padding();
        let r = count_macs(&single(Op::Conv(conv), (48, 224, 224))).unwrap();
        assert_eq!(r.total_macs, 541_900_800);
        assert_eq!(r.nodes[0].params, 48 * 225);
    }

    #[test]
    fn block_macs_sum_branches() {
        let block = build_large_kernel_block(4, 5, true).unwrap();
        let r = count_macs(&single(Op::BranchBlock(block), (4, 10, 10))).unwrap();
        assert_eq!(r.total_macs, 100 * 4 * (25 + 5 + 5));
        assert_eq!(r.nodes[0].kernel, Some([5, 5]));
    }

    #[test]
    fn non_conv_nodes_cost_nothing() {
        let g = LayerGraph::new(
            "mixed",
            (2, 4, 4),
            0,
            vec![
                Node::new("c", &[INPUT], Op::Conv(ConvSpec::new(2, 2, (1, 1), 1).unwrap())),
                Node::new("bn", &["c"], Op::BatchNorm(BatchNormSpec::identity(2))),
                Node::new("act", &["bn"], Op::Activation(Activation::PRelu { slopes: vec![0.1; 2] })),
                Node::new("up", &["act"], Op::Resize { height: 8, width: 8 }),
                Node::new("relu", &["up"], Op::Activation(Activation::Relu)),
            ],
            "relu",
        )
        .unwrap();
        let r = count_macs(&g).unwrap();
        let macs: Vec<u64> = r.nodes.iter().map(|n| n.macs).collect();
        let params: Vec<u64> = r.nodes.iter().map(|n| n.params).collect();
        assert_eq!(macs, vec![64, 0, 0, 0, 0]);
        assert_eq!(params, vec![4, 4, 2, 0, 0]);
        assert_eq!(r.total_params, 10);
        assert_eq!(r.first_conv.as_deref(), Some("c"));
    }

    #[test]
    fn half_even_formatting() {
        assert_eq!(format_mmacs(174_105_000), "174.10");
        assert_eq!(format_mmacs(174_115_000), "174.12");
        assert_eq!(format_mmacs(174_105_001), "174.11");
        assert_eq!(format_mmacs(0), "0.00");
        assert_eq!(format_mmacs_signed(-8_070_000), "-8.07");
        assert_eq!(format_percent(1, 8), "12.50");
        assert_eq!(format_percent(1, 3), "33.33");
        assert_eq!(round_half_even(0.125, 2), 0.12);
        assert_eq!(round_half_even(2.5, 0), 2.0);
    }

    #[test]
    fn published_row_arithmetic() {
        assert_eq!(digital_mmacs_from_ratio(475.16, 63.36), 174.10);
        assert_eq!(round_half_even(174.10 - 166.03, 2), 8.07);
    }

    #[test]
    fn partition_identity_and_lookup() {
        let block = build_large_kernel_block(4, 5, true).unwrap();
        let pw = ConvSpec::new(4, 2, (1, 1), 1).unwrap();
        let g = LayerGraph::new(
            "p",
            (4, 6, 6),
            0,
            vec![
                Node::new("stem", &[INPUT], Op::BranchBlock(block)),
                Node::new("pw", &["stem"], Op::Conv(pw)),
            ],
            "pw",
        )
        .unwrap();
        let r = count_macs(&g).unwrap();
        let p = partition(&r, &resolve_offload(&r, &["first".into(), "stem".into()]).unwrap()).unwrap();
        assert_eq!(p.offloaded, vec!["stem"]);
        assert_eq!(p.offloaded_macs + p.digital_macs, r.total_macs);
        assert_eq!(p.digital_macs, r.node("pw").unwrap().macs);
        assert_eq!(p.offloaded_ratio, r.first_conv_ratio);

        let none = partition(&r, &[]).unwrap();
        assert_eq!(none.digital_macs, r.total_macs);
        assert!(matches!(partition(&r, &["nope".into()]), Err(Error::Lookup(_))));
    }

    #[test]
    fn delta_of_identical_reports_is_zero() {
        let block = build_large_kernel_block(2, 3, true).unwrap();
        let r = count_macs(&single(Op::BranchBlock(block), (2, 5, 5))).unwrap();
        let d = compression_delta(&r, &r);
        assert_eq!(d.saved_macs, 0);
        assert!(d.nodes.is_empty());
    }

    #[test]
    fn tradeoff_examples() {
        let budget = OpticBudget::new(48, 224, 48 * 224 * 224).unwrap();
        let all = enumerate_tradeoff(&budget, &[12, 48], &[112, 224], Policy::SizeFirst).unwrap();
        let pairs: Vec<_> = all.iter().map(|t| (t.channels, t.side)).collect();
        assert_eq!(pairs, vec![(48, 224), (12, 224), (48, 112), (12, 112)]);
        let cf = enumerate_tradeoff(&budget, &[12, 48], &[112, 224], Policy::ChannelFirst).unwrap();
        let pairs: Vec<_> = cf.iter().map(|t| (t.channels, t.side)).collect();
        assert_eq!(pairs, vec![(48, 224), (48, 112), (12, 224), (12, 112)]);

        let tight = OpticBudget::new(48, 224, 12 * 224 * 224).unwrap();
        let only = enumerate_tradeoff(&tight, &[12, 48], &[224], Policy::SizeFirst).unwrap();
        assert_eq!(only.len(), 1);
        assert_eq!((only[0].channels, only[0].side), (12, 224));

        let tiny = OpticBudget::new(48, 224, 1).unwrap();
        assert!(enumerate_tradeoff(&tiny, &[12], &[224], Policy::SizeFirst).unwrap().is_empty());
        assert!(OpticBudget::new(0, 1, 1).is_err());
        assert!(enumerate_tradeoff(&budget, &[], &[1], Policy::SizeFirst).is_err());
        assert_eq!("channel-first".parse::<Policy>().unwrap(), Policy::ChannelFirst);
        assert!("biggest".parse::<Policy>().is_err());
    }

    #[test]
    fn miou_hand_cases() {
        let truth = mask(2, 2, &[1., 1., 0., 0.]);
        let pred = mask(2, 2, &[1., 0., 0., 0.]);
        let c = confusion(&pred, &truth, 2).unwrap();
        assert_eq!(c.iou(1), 0.5);
        assert_eq!(c.iou(0), 2.0 / 3.0);
        assert!((c.miou() - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(miou(&truth, &truth, 2).unwrap(), 1.0);
        assert_eq!(miou(&truth, &pred, 2).unwrap(), miou(&pred, &truth, 2).unwrap());
    }

    #[test]
    fn miou_disjoint_foreground() {
        // 4x4: truth fg is the top-left 2x2, pred fg the bottom-right 2x2.
        let truth = mask(4, 4, &[1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.]);
        let pred = mask(4, 4, &[0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1.]);
        let c = confusion(&pred, &truth, 2).unwrap();
        assert_eq!(c.iou(1), 0.0);
        // Background: 8 shared pixels out of 16 in the union.
        assert_eq!(c.iou(0), 8.0 / 16.0);
        assert_eq!(c.miou(), 0.25);
    }

    #[test]
    fn miou_absent_class_and_errors() {
        let a = mask(1, 2, &[0., 0.]);
        assert_eq!(miou(&a, &a, 3).unwrap(), 1.0);
        assert!(matches!(miou(&a, &mask(1, 2, &[0., 3.]), 3), Err(Error::Range(_))));
        assert!(matches!(miou(&a, &mask(1, 2, &[0., 0.5]), 3), Err(Error::Range(_))));
        assert!(matches!(miou(&a, &mask(2, 1, &[0., 0.]), 3), Err(Error::Shape { .. })));
    }

    #[test]
    fn miou_relabel_invariant() {
        let truth = mask(2, 3, &[0., 1., 2., 2., 1., 0.]);
        let pred = mask(2, 3, &[0., 2., 2., 1., 1., 0.]);
        let swap = |t: &Tensor| {
            let d = t.data().iter().map(|&v| [2.0, 0.0, 1.0][v as usize]).collect();
            Tensor::from_vec(t.shape(), d).unwrap()
        };
        let a = miou(&pred, &truth, 3).unwrap();
        let b = miou(&swap(&pred), &swap(&truth), 3).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn threshold_then_score() {
        let probs = mask(1, 4, &[0.9, 0.5, 0.49, 0.0]);
        assert_eq!(threshold_mask(&probs, 0.5).data(), &[1., 1., 0., 0.]);
    }

    #[test]
    fn table_summary_row() {
        let block = build_large_kernel_block(2, 3, true).unwrap();
        let g = LayerGraph::new(
            "tiny",
            (2, 4, 4),
            0,
            vec![
                Node::new("stem", &[INPUT], Op::BranchBlock(block)),
                Node::new("pw", &["stem"], Op::Conv(ConvSpec::new(2, 1, (1, 1), 1).unwrap())),
            ],
            "pw",
        )
        .unwrap();
        let text = render_table(&count_macs(&g).unwrap());
        // stem: 16 * 2 * (9 + 3 + 3) = 480 MACs, pw: 16 * 2 = 32.
        assert!(text.contains("tiny   3x3          93.75               0.00                 0.00\n"), "{text}");
        assert!(text.lines().any(|l| l.starts_with("total") && l.contains("512")));
    }
}
