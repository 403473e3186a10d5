//! Darknet binary weight files.
//!
//! Layout (little-endian): `major`, `minor`, `revision` as i32, then `seen`
//! as u64 when `major*10 + minor >= 2` (u32 otherwise), then for every
//! convolutional layer in order: `beta` (or `bias`), then `gamma`,
//! `running_mean`, `running_var` when batch-normalized, then the kernel
//! `[filters][c_in][size][size]`, all f32.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cfg::{LayerKind, NetworkDef};
use crate::graph::{self, ShapeError};

/// Bytes in the canonical header written by [`write_weights`].
pub const HEADER_BYTES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightsError {
    #[error("weight stream ended early while reading {}: needed {needed} more bytes, {available} left", describe(*.layer))]
    Underflow {
        layer: Option<usize>,
        needed: usize,
        available: usize,
    },
    #[error("{trailing} trailing bytes after the last layer")]
    Overflow { trailing: usize },
    #[error("layer {layer}: {reason}")]
    Alignment { layer: usize, reason: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

fn describe(layer: Option<usize>) -> String {
    match layer {
        Some(l) => format!("layer {l}"),
        None => "the header".into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightsHeader {
    pub major: i32,
    pub minor: i32,
    pub revision: i32,
    pub seen: u64,
}

impl Default for WeightsHeader {
    fn default() -> Self {
        WeightsHeader {
            major: 0,
            minor: 2,
            revision: 0,
            seen: 0,
        }
    }
}

impl WeightsHeader {
    fn wide_seen(&self) -> bool {
        self.major * 10 + self.minor >= 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub beta: Vec<f32>,
    pub gamma: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchNorm {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// Per-output-channel affine part following the convolution.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvAffine {
    BatchNorm(BatchNorm),
    Bias(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub affine: ConvAffine,
    /// `[filters][c_in][size][size]`, row-major.
    pub kernel: Vec<f32>,
}

impl ConvWeights {
    pub fn filters(&self) -> usize {
        match &self.affine {
            ConvAffine::BatchNorm(bn) => bn.len(),
            ConvAffine::Bias(b) => b.len(),
        }
    }

    pub fn batch_norm(&self) -> Option<&BatchNorm> {
        match &self.affine {
            ConvAffine::BatchNorm(bn) => Some(bn),
            ConvAffine::Bias(_) => None,
        }
    }

    pub fn float_count(&self) -> usize {
        let affine = match &self.affine {
            ConvAffine::BatchNorm(bn) => 4 * bn.len(),
            ConvAffine::Bias(b) => b.len(),
        };
        affine + self.kernel.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub header: WeightsHeader,
    /// One entry per layer; `Some` exactly for convolutional layers.
    pub layers: Vec<Option<ConvWeights>>,
}

/// Expected per-conv sizes: `(filters, c_in, size, batch_normalize)`.
fn conv_geometry(def: &NetworkDef) -> Result<Vec<Option<(usize, usize, usize, bool)>>, ShapeError> {
    let shapes = graph::infer_shapes(def, None)?;
    Ok(def
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| match &l.kind {
            LayerKind::Convolutional(c) => Some((c.filters, shapes.input_of(i).c, c.size, c.batch_normalize)),
            _ => None,
        })
        .collect())
}

impl WeightStore {
    /// Checks every tensor length against the shapes implied by `def`.
    pub fn check_aligned(&self, def: &NetworkDef) -> Result<(), WeightsError> {
        let geometry = conv_geometry(def)?;
        if self.layers.len() != geometry.len() {
            return Err(WeightsError::Alignment {
                layer: self.layers.len().min(geometry.len()),
                reason: format!(
                    "store has {} layers, definition has {}",
                    self.layers.len(),
                    geometry.len()
                ),
            });
        }
        for (i, (rec, geo)) in self.layers.iter().zip(&geometry).enumerate() {
            let misaligned = |reason: String| WeightsError::Alignment { layer: i, reason };
            match (rec, geo) {
                (None, None) => {}
                (Some(_), None) => return Err(misaligned("weights stored for a layer without parameters".into())),
                (None, Some(_)) => return Err(misaligned("convolution has no weights".into())),
                (Some(w), Some((filters, c_in, size, bn))) => {
                    match (&w.affine, bn) {
                        (ConvAffine::BatchNorm(b), true) => {
                            let lens = [b.beta.len(), b.gamma.len(), b.mean.len(), b.var.len()];
                            if lens.iter().any(|&n| n != *filters) {
                                return Err(misaligned(format!("batch-norm lengths {lens:?}, expected {filters}")));
                            }
                            if b.var.iter().any(|&v| v < 0.0) {
                                return Err(misaligned("negative running variance".into()));
                            }
                        }
                        (ConvAffine::Bias(b), false) => {
                            if b.len() != *filters {
                                return Err(misaligned(format!("bias length {}, expected {filters}", b.len())));
                            }
                        }
                        _ => return Err(misaligned("batch_normalize flag disagrees with stored parameters".into())),
                    }
                    let expected = filters * c_in * size * size;
                    if w.kernel.len() != expected {
                        return Err(misaligned(format!(
                            "kernel has {} values, expected {expected}",
                            w.kernel.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn conv(&self, layer: usize) -> Option<&ConvWeights> {
        self.layers.get(layer).and_then(Option::as_ref)
    }

    /// Total number of f32 values in the store.
    pub fn float_count(&self) -> usize {
        self.layers.iter().flatten().map(ConvWeights::float_count).sum()
    }

    /// Deterministic synthetic weights for `def`: He-scaled kernels, gamma
    /// in `[0.1, 1)`, small betas, positive variances.
    pub fn seeded(def: &NetworkDef, seed: u64) -> Result<Self, WeightsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geometry = conv_geometry(def)?;
        let layers = geometry
            .into_iter()
            .map(|geo| {
                geo.map(|(filters, c_in, size, bn)| {
                    let fan_in = (c_in * size * size) as f32;
                    let scale = (2.0 / fan_in).sqrt();
                    let kernel = (0..filters * c_in * size * size)
                        .map(|_| rng.gen_range(-scale..scale))
                        .collect();
                    let affine = if bn {
                        ConvAffine::BatchNorm(BatchNorm {
                            beta: (0..filters).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                            gamma: (0..filters).map(|_| rng.gen_range(0.1..1.0)).collect(),
                            mean: (0..filters).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                            var: (0..filters).map(|_| rng.gen_range(0.5..1.5)).collect(),
                        })
                    } else {
                        ConvAffine::Bias((0..filters).map(|_| rng.gen_range(-0.1..0.1)).collect())
                    };
                    ConvWeights { affine, kernel }
                })
            })
            .collect();
        Ok(WeightStore {
            header: WeightsHeader::default(),
            layers,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, layer: Option<usize>) -> Result<&[u8], WeightsError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(WeightsError::Underflow {
                layer,
                needed: n - available,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn floats(&mut self, n: usize, layer: usize) -> Result<Vec<f32>, WeightsError> {
        let raw = self.take(4 * n, Some(layer))?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Reads a weight file aligned to `def`. Every byte must be consumed.
pub fn read_weights(bytes: &[u8], def: &NetworkDef) -> Result<WeightStore, WeightsError> {
    let mut r = Reader { bytes, pos: 0 };
    let int = |r: &mut Reader| -> Result<i32, WeightsError> {
        let b = r.take(4, None)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let major = int(&mut r)?;
    let minor = int(&mut r)?;
    let revision = int(&mut r)?;
    let mut header = WeightsHeader {
        major,
        minor,
        revision,
        seen: 0,
    };
    header.seen = if header.wide_seen() {
        let b = r.take(8, None)?;
        u64::from_le_bytes(b.try_into().expect("8 bytes"))
    } else {
        let b = r.take(4, None)?;
        u32::from_le_bytes(b.try_into().expect("4 bytes")) as u64
    };

    let geometry = conv_geometry(def)?;
    let mut layers = Vec::with_capacity(geometry.len());
    for (i, geo) in geometry.into_iter().enumerate() {
        let Some((filters, c_in, size, bn)) = geo else {
            layers.push(None);
            continue;
        };
        let first = r.floats(filters, i)?;
        let affine = if bn {
            let gamma = r.floats(filters, i)?;
            let mean = r.floats(filters, i)?;
            let var = r.floats(filters, i)?;
            ConvAffine::BatchNorm(BatchNorm {
                beta: first,
                gamma,
                mean,
                var,
            })
        } else {
            ConvAffine::Bias(first)
        };
        let kernel = r.floats(filters * c_in * size * size, i)?;
        layers.push(Some(ConvWeights { affine, kernel }));
    }
    let trailing = bytes.len() - r.pos;
    if trailing != 0 {
        return Err(WeightsError::Overflow { trailing });
    }
    Ok(WeightStore { header, layers })
}

/// Serializes `store` with the canonical `(0, 2, 0)` header and 64-bit `seen`.
pub fn write_weights(store: &WeightStore, def: &NetworkDef) -> Result<Vec<u8>, WeightsError> {
    store.check_aligned(def)?;
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * store.float_count());
    for v in [0i32, 2, 0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&store.header.seen.to_le_bytes());
    let mut put = |xs: &[f32]| {
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    for w in store.layers.iter().flatten() {
        match &w.affine {
            ConvAffine::BatchNorm(bn) => {
                put(&bn.beta);
                put(&bn.gamma);
                put(&bn.mean);
                put(&bn.var);
            }
            ConvAffine::Bias(b) => put(b),
        }
        put(&w.kernel);
    }
    Ok(out)
}
