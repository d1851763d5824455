//! Architecture files and weight archives.
//!
//! An architecture file is a JSON document (`version` 1):
//!
//! ```json
//! {
//!   "version": 1,
//!   "name": "tiny",
//!   "seed": 7,
//!   "input": { "channels": 3, "height": 32, "width": 32 },
//!   "nodes": [
//!     { "name": "stem", "op": "branch_block", "inputs": ["input"],
//!       "in_channels": 3, "out_channels": 12, "groups": 3, "kernel": 9,
//!       "branches": [
//!         { "kernel": [9, 9], "batch_norm": true, "combine_weight": 1.0 },
//!         { "kernel": [1, 9] },
//!         { "kernel": [9, 1] } ] },
//!     { "name": "act", "op": "prelu", "inputs": ["stem"], "channels": 12 },
//!     { "name": "head", "op": "conv", "inputs": ["act"], "in_channels": 12,
//!       "out_channels": 1, "kernel": [1, 1], "bias": true },
//!     { "name": "out", "op": "sigmoid", "inputs": ["head"] }
//!   ],
//!   "output": "out"
//! }
//! ```
//!
//! Node ops are `conv`, `batch_norm`, `relu`, `prelu`, `sigmoid`, `resize`
//! (`height`, `width`), `add` (two or more inputs) and `branch_block`.
//! Conv fields `stride`, `padding`, `dilation` default to `[1,1]`, `[0,0]`,
//! `[1,1]`; `groups` defaults to 1 and `bias` to false. Branch `padding`
//! defaults to center-aligned same padding, `batch_norm` to true,
//! `combine_weight` to 1.0.
//!
//! Weights come from a directory of MFTN tensor files named
//! `<key>.mftn`, see [`weight_keys`]. Without an archive every tensor is drawn
//! from `Rng::for_key(seed, key)`, so a document alone fully determines a
//! network.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    same_padding, Activation, BatchNormSpec, Branch, BranchBlock, ConvSpec, LayerGraph, Node, Op,
};
use crate::tensor::{Rng, Shape, Tensor};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDocument {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub input: InputDecl,
    pub nodes: Vec<NodeDecl>,
    pub output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDecl {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDecl {
    pub name: String,
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub op: OpDecl,
}

fn one() -> [usize; 2] {
    [1, 1]
}

fn unit() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn unit_weight() -> f32 {
    1.0
}

fn default_eps() -> f32 {
    BatchNormSpec::DEFAULT_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpDecl {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: [usize; 2],
        #[serde(default)]
        padding: [usize; 2],
        #[serde(default = "one")]
        dilation: [usize; 2],
        #[serde(default = "unit")]
        groups: usize,
        #[serde(default)]
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        #[serde(default = "default_eps")]
        eps: f32,
    },
    Relu,
    Prelu {
        channels: usize,
    },
    Sigmoid,
    Resize {
        height: usize,
        width: usize,
    },
    Add,
    BranchBlock {
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "unit")]
        groups: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: [usize; 2],
        #[serde(default = "one")]
        dilation: [usize; 2],
        branches: Vec<BranchDecl>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchDecl {
    pub kernel: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<[usize; 2]>,
    #[serde(default)]
    pub bias: bool,
    #[serde(default = "yes")]
    pub batch_norm: bool,
    #[serde(default = "default_eps")]
    pub eps: f32,
    #[serde(default = "unit_weight")]
    pub combine_weight: f32,
}

fn pair(v: [usize; 2]) -> (usize, usize) {
    (v[0], v[1])
}

fn arr(p: (usize, usize)) -> [usize; 2] {
    [p.0, p.1]
}

/// Where tensors come from while building a graph.
enum WeightSource<'a> {
    Seeded(u64),
    Archive(&'a Path),
}

impl WeightSource<'_> {
    fn tensor(&self, key: &str, shape: Shape, init: &dyn Fn(&mut Rng, usize) -> f32) -> std::result::Result<Tensor, String> {
        match self {
            WeightSource::Seeded(seed) => {
                let mut rng = Rng::for_key(*seed, key);
                let data = (0..shape.numel()).map(|i| init(&mut rng, i)).collect();
                Tensor::from_vec(shape, data).map_err(|e| e.to_string())
            }
            WeightSource::Archive(dir) => {
                let path = dir.join(format!("{key}.mftn"));
                if !path.exists() {
                    return Err(format!("missing weight entry `{key}` ({})", path.display()));
                }
                let t = Tensor::load(&path).map_err(|e| e.to_string())?;
                if t.shape().numel() != shape.numel() {
                    return Err(format!(
                        "weight entry `{key}` has shape {}, expected {shape}",
                        t.shape()
                    ));
                }
                Tensor::from_vec(shape, t.into_data()).map_err(|e| e.to_string())
            }
        }
    }

    fn vector(&self, key: &str, len: usize, lo: f32, hi: f32) -> std::result::Result<Vec<f32>, String> {
        let shape = Shape::new(len, 1, 1, 1).map_err(|e| e.to_string())?;
        Ok(self
            .tensor(key, shape, &|rng, _| rng.uniform_f32(lo, hi))?
            .into_data())
    }

    fn conv(&self, key: &str, mut spec: ConvSpec, bias: bool) -> std::result::Result<ConvSpec, String> {
        let fan_in = spec.in_channels / spec.groups * spec.kernel.0 * spec.kernel.1;
        let bound = 1.0 / (fan_in as f32).sqrt();
        spec.weight = self.tensor(&format!("{key}.weight"), spec.weight.shape(), &|rng, _| {
            rng.uniform_f32(-bound, bound)
        })?;
        if bias {
            spec.bias = Some(self.vector(&format!("{key}.bias"), spec.out_channels, -bound, bound)?);
        }
        Ok(spec)
    }

    fn batch_norm(&self, key: &str, channels: usize, eps: f32) -> std::result::Result<BatchNormSpec, String> {
        Ok(BatchNormSpec {
            gamma: self.vector(&format!("{key}.gamma"), channels, 0.5, 1.5)?,
            beta: self.vector(&format!("{key}.beta"), channels, -0.1, 0.1)?,
            running_mean: self.vector(&format!("{key}.running_mean"), channels, -0.1, 0.1)?,
            running_var: self.vector(&format!("{key}.running_var"), channels, 0.5, 1.5)?,
            eps,
        })
    }
}

/// Parses a document, reading weights from `weights` when given and drawing
/// them from the document seed otherwise.
pub fn parse_arch(text: &str, weights: Option<&Path>) -> Result<LayerGraph> {
    let doc: ArchDocument = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    build_graph(&doc, weights)
}

pub fn load_arch(path: impl AsRef<Path>, weights: Option<&Path>) -> Result<LayerGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_arch(&text, weights)
}

pub fn build_graph(doc: &ArchDocument, weights: Option<&Path>) -> Result<LayerGraph> {
    if doc.version != SCHEMA_VERSION {
        return Err(Error::Parse {
            line: 0,
            column: 0,
            msg: format!("unsupported schema version {}, expected {SCHEMA_VERSION}", doc.version),
        });
    }
    let source = match weights {
        Some(dir) => WeightSource::Archive(dir),
        None => WeightSource::Seeded(doc.seed),
    };
    let nodes = doc
        .nodes
        .iter()
        .enumerate()
        .map(|(index, decl)| {
            build_node(decl, &source).map_err(|msg| Error::Validation {
                index,
                node: decl.name.clone(),
                msg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let InputDecl {
        channels,
        height,
        width,
    } = doc.input;
    LayerGraph::new(doc.name.clone(), (channels, height, width), doc.seed, nodes, doc.output.clone())
}

fn build_node(decl: &NodeDecl, source: &WeightSource) -> std::result::Result<Node, String> {
    let key = decl.name.as_str();
    let op = match &decl.op {
        &OpDecl::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dilation,
            groups,
            bias,
        } => {
            let spec = ConvSpec::new(in_channels, out_channels, pair(kernel), groups)
                .map_err(|e| e.to_string())?
                .with_stride(pair(stride))
                .with_padding(pair(padding))
                .with_dilation(pair(dilation));
            Op::Conv(source.conv(key, spec, bias)?)
        }
        &OpDecl::BatchNorm { channels, eps } => Op::BatchNorm(source.batch_norm(key, channels, eps)?),
        OpDecl::Relu => Op::Activation(Activation::Relu),
        &OpDecl::Prelu { channels } => Op::Activation(Activation::PRelu {
            slopes: source.vector(&format!("{key}.slope"), channels, 0.05, 0.3)?,
        }),
        OpDecl::Sigmoid => Op::Sigmoid,
        &OpDecl::Resize { height, width } => Op::Resize { height, width },
        OpDecl::Add => Op::Add,
        OpDecl::BranchBlock {
            in_channels,
            out_channels,
            groups,
            kernel,
            stride,
            dilation,
            branches,
        } => {
            let branches = branches
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let bkey = format!("{key}.branch{i}");
                    let padding = b
                        .padding
                        .map(pair)
                        .unwrap_or_else(|| same_padding(pair(b.kernel), pair(*dilation)));
                    let spec = ConvSpec::new(*in_channels, *out_channels, pair(b.kernel), *groups)
                        .map_err(|e| format!("branch {i}: {e}"))?
                        .with_stride(pair(*stride))
                        .with_dilation(pair(*dilation))
                        .with_padding(padding);
                    let conv = source.conv(&bkey, spec, b.bias)?;
                    let bn = if b.batch_norm {
                        Some(source.batch_norm(&format!("{bkey}.bn"), *out_channels, b.eps)?)
                    } else {
                        None
                    };
                    Ok(Branch {
                        conv,
                        bn,
                        combine_weight: b.combine_weight,
                    })
                })
                .collect::<std::result::Result<Vec<_>, String>>()?;
            Op::BranchBlock(BranchBlock {
                base_kernel: *kernel,
                branches,
            })
        }
    };
    Ok(Node {
        name: decl.name.clone(),
        inputs: decl.inputs.clone(),
        op,
    })
}

/// Document describing `graph`; weights are not embedded.
pub fn to_document(graph: &LayerGraph) -> ArchDocument {
    let (channels, height, width) = graph.input();
    let nodes = graph
        .nodes()
        .iter()
        .map(|node| NodeDecl {
            name: node.name.clone(),
            inputs: node.inputs.clone(),
            op: match &node.op {
                Op::Conv(c) => OpDecl::Conv {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: arr(c.kernel),
                    stride: arr(c.stride),
                    padding: arr(c.padding),
                    dilation: arr(c.dilation),
                    groups: c.groups,
                    bias: c.bias.is_some(),
                },
                Op::BatchNorm(bn) => OpDecl::BatchNorm {
                    channels: bn.channels(),
                    eps: bn.eps,
                },
                Op::Activation(Activation::Relu) => OpDecl::Relu,
                Op::Activation(Activation::PRelu { slopes }) => OpDecl::Prelu {
                    channels: slopes.len(),
                },
                Op::Sigmoid => OpDecl::Sigmoid,
                &Op::Resize { height, width } => OpDecl::Resize { height, width },
                Op::Add => OpDecl::Add,
                Op::BranchBlock(b) => {
                    let c0 = &b.branches[0].conv;
                    OpDecl::BranchBlock {
                        in_channels: c0.in_channels,
                        out_channels: c0.out_channels,
                        groups: c0.groups,
                        kernel: b.base_kernel,
                        stride: arr(c0.stride),
                        dilation: arr(c0.dilation),
                        branches: b
                            .branches
                            .iter()
                            .map(|br| BranchDecl {
                                kernel: arr(br.conv.kernel),
                                padding: Some(arr(br.conv.padding)),
                                bias: br.conv.bias.is_some(),
                                batch_norm: br.bn.is_some(),
                                eps: br.bn.as_ref().map_or(BatchNormSpec::DEFAULT_EPS, |bn| bn.eps),
                                combine_weight: br.combine_weight,
                            })
                            .collect(),
                    }
                }
            },
        })
        .collect();
    ArchDocument {
        version: SCHEMA_VERSION,
        name: graph.name().to_string(),
        seed: graph.seed(),
        input: InputDecl {
            channels,
            height,
            width,
        },
        nodes,
        output: graph.output().to_string(),
    }
}

pub fn to_json(graph: &LayerGraph) -> String {
    let mut s = serde_json::to_string_pretty(&to_document(graph)).expect("document serializes");
    s.push('\n');
    s
}

/// Every weight tensor of the graph keyed by archive name, in node order.
pub fn weight_keys(graph: &LayerGraph) -> Vec<(String, Tensor)> {
    fn vector(values: &[f32]) -> Tensor {
        Tensor::vector(values.to_vec()).expect("validated graph holds finite, non-empty vectors")
    }
    fn conv(out: &mut Vec<(String, Tensor)>, key: &str, c: &ConvSpec) {
        out.push((format!("{key}.weight"), c.weight.clone()));
        if let Some(b) = &c.bias {
            out.push((format!("{key}.bias"), vector(b)));
        }
    }
    fn bn(out: &mut Vec<(String, Tensor)>, key: &str, bn: &BatchNormSpec) {
        out.push((format!("{key}.gamma"), vector(&bn.gamma)));
        out.push((format!("{key}.beta"), vector(&bn.beta)));
        out.push((format!("{key}.running_mean"), vector(&bn.running_mean)));
        out.push((format!("{key}.running_var"), vector(&bn.running_var)));
    }
    let mut out = Vec::new();
    for node in graph.nodes() {
        let key = node.name.as_str();
        match &node.op {
            Op::Conv(c) => conv(&mut out, key, c),
            Op::BatchNorm(b) => bn(&mut out, key, b),
            Op::Activation(Activation::PRelu { slopes }) => {
                out.push((format!("{key}.slope"), vector(slopes)))
            }
            Op::BranchBlock(block) => {
                for (i, br) in block.branches.iter().enumerate() {
                    let bkey = format!("{key}.branch{i}");
                    conv(&mut out, &bkey, &br.conv);
                    if let Some(b) = &br.bn {
                        bn(&mut out, &format!("{bkey}.bn"), b);
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Writes one MFTN file per weight tensor into `dir`, creating it if needed.
pub fn save_weights(graph: &LayerGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (key, t) in weight_keys(graph) {
        t.save(dir.join(format!("{key}.mftn")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::INPUT;

    const TINY: &str = r#"{
      "version": 1, "name": "tiny", "seed": 7,
      "input": { "channels": 3, "height": 16, "width": 16 },
      "nodes": [
        { "name": "stem", "op": "branch_block", "inputs": ["input"],
          "in_channels": 3, "out_channels": 6, "groups": 3, "kernel": 5,
          "branches": [ { "kernel": [5, 5] }, { "kernel": [1, 5] }, { "kernel": [5, 1], "combine_weight": 0.5 } ] },
        { "name": "act", "op": "prelu", "inputs": ["stem"], "channels": 6 },
        { "name": "down", "op": "conv", "inputs": ["act"], "in_channels": 6, "out_channels": 4,
          "kernel": [3, 3], "stride": [2, 2], "padding": [1, 1] },
        { "name": "bn", "op": "batch_norm", "inputs": ["down"], "channels": 4 },
        { "name": "head", "op": "conv", "inputs": ["bn"], "in_channels": 4, "out_channels": 1, "kernel": [1, 1], "bias": true },
        { "name": "up", "op": "resize", "inputs": ["head"], "height": 16, "width": 16 },
        { "name": "out", "op": "sigmoid", "inputs": ["up"] }
      ],
      "output": "out"
    }"#;

    #[test]
    fn parses_tiny_document() {
        let g = parse_arch(TINY, None).unwrap();
        assert_eq!(g.nodes().len(), 7);
        assert!(matches!(g.nodes()[0].op, Op::BranchBlock(_)));
        let Op::BranchBlock(b) = &g.nodes()[0].op else { unreachable!() };
        assert_eq!(b.branches[1].conv.padding, (0, 2));
        assert_eq!(b.branches[2].combine_weight, 0.5);
        assert!(b.branches.iter().all(|b| b.bn.is_some()));
        let shapes = g.shape_infer().unwrap();
        assert_eq!(shapes[2], Shape { n: 1, c: 4, h: 8, w: 8 });
        assert_eq!(shapes[6], Shape { n: 1, c: 1, h: 16, w: 16 });
    }

    #[test]
    fn seeded_weights_are_deterministic_and_scaled() {
        let a = parse_arch(TINY, None).unwrap();
        let b = parse_arch(TINY, None).unwrap();
        assert_eq!(a, b);
        let Op::Conv(down) = &a.nodes()[2].op else { unreachable!() };
        let bound = 1.0 / (6.0f32 * 9.0).sqrt();
        assert!(down.weight.data().iter().all(|v| v.abs() <= bound));
        let other = parse_arch(&TINY.replace("\"seed\": 7", "\"seed\": 8"), None).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn print_parse_roundtrip() {
        let g = parse_arch(TINY, None).unwrap();
        let text = to_json(&g);
        assert_eq!(parse_arch(&text, None).unwrap(), g);

        let dir = tempfile::tempdir().unwrap();
        save_weights(&g, dir.path()).unwrap();
        let back = parse_arch(&text, Some(dir.path())).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn archive_weights_override_seed() {
        let g = parse_arch(TINY, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_weights(&g, dir.path()).unwrap();
        let reseeded = TINY.replace("\"seed\": 7", "\"seed\": 99");
        let back = parse_arch(&reseeded, Some(dir.path())).unwrap();
        assert_eq!(back.nodes(), g.nodes());
    }

    #[test]
    fn missing_weight_entry_is_located() {
        let g = parse_arch(TINY, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_weights(&g, dir.path()).unwrap();
        fs::remove_file(dir.path().join("bn.gamma.mftn")).unwrap();
        let err = parse_arch(TINY, Some(dir.path())).unwrap_err();
        match err {
            Error::Validation { index, node, msg } => {
                assert_eq!((index, node.as_str()), (3, "bn"));
                assert!(msg.contains("bn.gamma"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_documents() {
        let err = parse_arch("{ \"version\": 1, ", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");

        let unknown = TINY.replace("\"op\": \"sigmoid\"", "\"op\": \"softmax\"");
        let err = parse_arch(&unknown, None).unwrap_err();
        assert!(matches!(err, Error::Parse { ref msg, .. } if msg.contains("softmax")), "{err}");

        let dangling = TINY.replace("\"inputs\": [\"up\"]", "\"inputs\": [\"upp\"]");
        let err = parse_arch(&dangling, None).unwrap_err();
        assert!(matches!(err, Error::Validation { ref msg, .. } if msg.contains("`upp`")), "{err}");

        let mismatch = TINY.replace("\"channels\": 4 }", "\"channels\": 5 }");
        let err = parse_arch(&mismatch, None).unwrap_err();
        assert!(matches!(err, Error::Shape { ref node, .. } if node == "bn"), "{err}");

        let version = TINY.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(parse_arch(&version, None), Err(Error::Parse { .. })));
    }

    #[test]
    fn weight_keys_cover_every_tensor() {
        let g = parse_arch(TINY, None).unwrap();
        let keys: Vec<String> = weight_keys(&g).into_iter().map(|(k, _)| k).collect();
        assert!(keys.contains(&"stem.branch2.bn.running_var".to_string()));
        assert!(keys.contains(&"act.slope".to_string()));
        assert!(keys.contains(&"head.bias".to_string()));
        assert!(!keys.contains(&"down.bias".to_string()));
        // 3 branches x (weight + 4 bn) + slope + down + 4 bn + head weight + bias
        assert_eq!(keys.len(), 15 + 1 + 1 + 4 + 2);
        assert!(!keys.iter().any(|k| k.starts_with(INPUT)));
    }
}
