//! Shipped reference assets and golden regression tensors.
//!
//! Golden layout: one `<name>.mftn` per tensor plus `manifest.json`, a list
//! of [`GoldenRecord`]s. Generated tensors are compared bytewise when the
//! record is exact and by max-abs deviation otherwise.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::parse_arch;
use crate::error::{Error, Result};
use crate::graph::{LayerGraph, Op};
use crate::inference::run_graph;
use crate::reparam::{compress_graph, merge_branches};
use crate::tensor::{Rng, Shape, Tensor};

/// The shipped segmentation encoder: 15x15 multi-branch stem, two-path decoder.
pub const EXTREMEC3_ARCH: &str = include_str!("../assets/extremec3.arch");

pub const DEFAULT_GOLDEN_SEED: u64 = 1;
pub const MANIFEST: &str = "manifest.json";
/// Max-abs tolerance for computed goldens.
pub const GOLDEN_TOLERANCE: f32 = 1e-6;
/// Reduced input side for the end-to-end goldens; keeps the files small.
pub const GOLDEN_SIDE: usize = 64;

pub fn extremec3(weights: Option<&Path>) -> Result<LayerGraph> {
    parse_arch(EXTREMEC3_ARCH, weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub name: &'static str,
    pub pred: Tensor,
    pub truth: Tensor,
    pub classes: usize,
}

fn mask(h: usize, w: usize, values: &[f32]) -> Tensor {
    Tensor::from_vec(Shape::new(1, 1, h, w).expect("non-zero"), values.to_vec()).expect("sized")
}

/// Hand-made binary mask pairs.
pub fn mask_pairs() -> Vec<MaskPair> {
    vec![
        MaskPair {
            name: "mask_2x2",
            truth: mask(2, 2, &[1., 1., 0., 0.]),
            pred: mask(2, 2, &[1., 0., 0., 0.]),
            classes: 2,
        },
        MaskPair {
            name: "mask_4x4_disjoint",
            truth: mask(4, 4, &[1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.]),
            pred: mask(4, 4, &[0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1.]),
            classes: 2,
        },
        MaskPair {
            name: "mask_3x3_identical",
            truth: mask(3, 3, &[0., 1., 0., 1., 1., 1., 0., 1., 0.]),
            pred: mask(3, 3, &[0., 1., 0., 1., 1., 1., 0., 1., 0.]),
            classes: 2,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenRecord {
    pub name: String,
    pub file: String,
    pub seed: u64,
    pub shape: [usize; 4],
    pub sha256: String,
    /// Exact assets are compared bytewise; computed ones within [`GOLDEN_TOLERANCE`].
    pub exact: bool,
    pub command: String,
}

pub fn generator_command(seed: u64) -> String {
    format!("lkconv goldens --dir <dir> --seed {seed}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn record(name: &str, seed: u64, exact: bool, t: &Tensor) -> GoldenRecord {
    let s = t.shape();
    GoldenRecord {
        name: name.to_string(),
        file: format!("{name}.mftn"),
        seed,
        shape: [s.n, s.c, s.h, s.w],
        sha256: sha256_hex(&t.to_bytes()),
        exact,
        command: generator_command(seed),
    }
}

fn build_goldens(seed: u64) -> Result<Vec<(GoldenRecord, Tensor)>> {
    let mut out = Vec::new();
    let random = Tensor::random((4, 3, 16, 16), &mut Rng::new(seed), 0.0, 1.0)?;
    out.push((record("random_4x3x16x16", seed, true, &random), random));

    let graph = extremec3(None)?.with_input((3, GOLDEN_SIDE, GOLDEN_SIDE))?;
    let stem = graph.first_conv().expect("shipped arch has a stem");
    let Op::BranchBlock(block) = &stem.op else {
        return Err(Error::Structure("shipped stem is not a branch block".into()));
    };
    let merged = merge_branches(block)?;
    let bias = Tensor::vector(merged.bias.clone().unwrap_or_default())?;
    out.push((record("stem_merged_kernel", seed, false, &merged.weight), merged.weight));
    out.push((record("stem_merged_bias", seed, false, &bias), bias));

    let mut rng = Rng::for_key(seed, "extremec3.input");
    let x = Tensor::random((1, 3, GOLDEN_SIDE, GOLDEN_SIDE), &mut rng, -1.0, 1.0)?;
    let y = run_graph(&graph, &x)?;
    let (compressed, _) = compress_graph(&graph, &HashSet::new())?;
    let yc = run_graph(&compressed, &x)?;
    out.push((record("extremec3_input", seed, true, &x), x));
    out.push((record("extremec3_output", seed, false, &y), y));
    out.push((record("extremec3_compressed_output", seed, false, &yc), yc));

    for pair in mask_pairs() {
        let pred = format!("{}_pred", pair.name);
        let truth = format!("{}_truth", pair.name);
        out.push((record(&pred, seed, true, &pair.pred), pair.pred));
        out.push((record(&truth, seed, true, &pair.truth), pair.truth));
    }
    Ok(out)
}

/// All golden tensors for `seed`, computed on a single thread.
pub fn generate_goldens(seed: u64) -> Result<Vec<(GoldenRecord, Tensor)>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    pool.install(|| build_goldens(seed))
}

fn manifest_json(records: &[GoldenRecord]) -> String {
    let mut s = serde_json::to_string_pretty(records).expect("serializable");
    s.push('\n');
    s
}

/// Rewrites every golden file and the manifest under `dir`.
pub fn regenerate_goldens(dir: impl AsRef<Path>, seed: u64) -> Result<Vec<GoldenRecord>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let goldens = generate_goldens(seed)?;
    for (rec, t) in &goldens {
        t.save(dir.join(&rec.file))?;
    }
    let records: Vec<GoldenRecord> = goldens.into_iter().map(|(r, _)| r).collect();
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest_json(&records)).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<GoldenRecord>> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenDiff {
    pub name: String,
    pub detail: String,
}

fn compare(rec: &GoldenRecord, expected: &Tensor, actual: &Tensor) -> Option<String> {
    if expected.shape() != actual.shape() {
        return Some(format!("shape {} vs {}", expected.shape(), actual.shape()));
    }
    if rec.exact {
        let bad = expected
            .data()
            .iter()
            .zip(actual.data())
            .position(|(a, b)| a.to_bits() != b.to_bits());
        bad.map(|i| format!("first differing element at flat index {i}"))
    } else {
        let dev = expected.max_abs_diff(actual).expect("same shape");
        (dev > GOLDEN_TOLERANCE).then(|| format!("max-abs deviation {dev:e} > {GOLDEN_TOLERANCE:e}"))
    }
}

/// Compares the goldens stored in `expected` with those stored in `actual`.
pub fn diff_goldens(expected: impl AsRef<Path>, actual: impl AsRef<Path>) -> Result<Vec<GoldenDiff>> {
    let (expected, actual) = (expected.as_ref(), actual.as_ref());
    let want = read_manifest(expected)?;
    let got = read_manifest(actual)?;
    let mut diffs = Vec::new();
    for rec in &want {
        let Some(other) = got.iter().find(|r| r.name == rec.name) else {
            diffs.push(GoldenDiff {
                name: rec.name.clone(),
                detail: "missing".into(),
            });
            continue;
        };
        let a = Tensor::load(expected.join(&rec.file))?;
        let b = Tensor::load(actual.join(&other.file))?;
        if let Some(detail) = compare(rec, &a, &b) {
            diffs.push(GoldenDiff {
                name: rec.name.clone(),
                detail,
            });
        }
    }
    for rec in got.iter().filter(|r| !want.iter().any(|w| w.name == r.name)) {
        diffs.push(GoldenDiff {
            name: rec.name.clone(),
            detail: "unexpected extra golden".into(),
        });
    }
    Ok(diffs)
}

/// Regenerates in memory with the recorded seed and compares against `dir`.
pub fn check_goldens(dir: impl AsRef<Path>) -> Result<Vec<GoldenDiff>> {
    let dir = dir.as_ref();
    let want = read_manifest(dir)?;
    let seed = want.first().map_or(DEFAULT_GOLDEN_SEED, |r| r.seed);
    let fresh = generate_goldens(seed)?;
    let mut diffs = Vec::new();
    for rec in &want {
        let expected = Tensor::load(dir.join(&rec.file))?;
        match fresh.iter().find(|(r, _)| r.name == rec.name) {
            None => diffs.push(GoldenDiff {
                name: rec.name.clone(),
                detail: "no longer generated".into(),
            }),
            Some((_, t)) => {
                if let Some(detail) = compare(rec, &expected, t) {
                    diffs.push(GoldenDiff {
                        name: rec.name.clone(),
                        detail,
                    });
                }
            }
        }
    }
    Ok(diffs)
}
