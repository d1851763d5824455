//! Dense rank-4 `f32` tensors, seeded random initialization and the MFTN
//! tensor file format.
//!
//! Layout is row-major `(n, c, h, w)`: element `(n, c, h, w)` lives at flat
//! index `((n * C + c) * H + h) * W + w`.
//!
//! # File format
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MFTN"
//! 4       1     version (1)
//! 5       16    n, c, h, w as u32 little-endian
//! 21      4*N   payload, f32 little-endian, N = n*c*h*w
//! ```
//!
//! Files are rejected when the payload length differs from the declared
//! element count, so a truncated or padded file never loads.

use std::fmt;
use std::fs;
use std::path::Path;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MFTN";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape { n, c, h, w };
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "every dimension must be at least 1, got {shape}"
            )));
        }
        shape
            .dims()
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Dimension(format!("{shape} overflows the address space")))?;
        Ok(shape)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one `(h, w)` plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Deterministic generator: xoshiro256++ seeded through SplitMix64
/// (`Xoshiro256PlusPlus::seed_from_u64`).
///
/// Uniform `f32` draws take the top 24 bits of a 64-bit output, so every
/// value in `[0, 1)` is exactly representable and streams are identical on
/// every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Independent stream for a named item, e.g. one weight tensor of a graph.
    pub fn for_key(seed: u64, key: &str) -> Self {
        Rng::new(seed ^ fnv1a(key.as_bytes()))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in `[low, high)`. Caller guarantees `low < high`.
    pub fn uniform_f32(&mut self, low: f32, high: f32) -> f32 {
        let v = low + (high - low) * self.unit_f32();
        if v >= high {
            high.next_down()
        } else {
            v
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    /// A tensor with every element equal to `fill`.
    pub fn new(shape: (usize, usize, usize, usize), fill: f32) -> Result<Self> {
        if !fill.is_finite() {
            return Err(Error::Range(format!("fill value {fill} is not finite")));
        }
        let shape = Shape::new(shape.0, shape.1, shape.2, shape.3)?;
        Ok(Tensor {
            shape,
            data: vec![fill; shape.numel()],
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension(format!(
                "shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Range(format!(
                "element {i} is not finite ({})",
                data[i]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-1 data stored as shape `(len, 1, 1, 1)`.
    pub fn vector(values: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(values.len(), 1, 1, 1)?;
        Tensor::from_vec(shape, values)
    }

    /// Uniform random elements in `[low, high)`, drawn in flat-index order.
    pub fn random(
        shape: (usize, usize, usize, usize),
        rng: &mut Rng,
        low: f32,
        high: f32,
    ) -> Result<Self> {
        if !low.is_finite() || !high.is_finite() || low >= high {
            return Err(Error::Range(format!(
                "need finite low < high, got [{low}, {high})"
            )));
        }
        let shape = Shape::new(shape.0, shape.1, shape.2, shape.3)?;
        let data = (0..shape.numel())
            .map(|_| rng.uniform_f32(low, high))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// In-place access for builders. Callers keep every element finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f32) {
        let i = self.shape.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// Contiguous `(h, w)` plane of one batch item and channel.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let start = self.shape.offset(n, c, 0, 0);
        &self.data[start..start + self.shape.plane()]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::Structure(format!(
                "cannot compare {} with {}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        for d in self.shape.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!(
                "header needs {HEADER_LEN} bytes, file has {}",
                bytes.len()
            ));
        }
        if &bytes[..4] != MAGIC {
            return Err("bad magic, expected \"MFTN\"".into());
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(format!("unsupported version {}", bytes[4]));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let at = 5 + 4 * i;
            *d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]).map_err(|e| e.to_string())?;
        let payload = &bytes[HEADER_LEN..];
        let expected = shape.numel().checked_mul(4).ok_or("declared size overflows")?;
        if payload.len() != expected {
            return Err(format!(
                "shape {shape} declares {expected} payload bytes, found {}",
                payload.len()
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(shape, data).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}
