//! Shape inference and parameter / FLOPs accounting.
//!
//! FLOPs follow the Darknet convention: a convolution costs
//! `2 * size^2 * c_in * filters * out_h * out_w` (one multiply-accumulate
//! counts as two operations). Batch norm, activations, pooling, upsampling,
//! routes and shortcuts are excluded from the headline figure.

use std::fmt::Write as _;

use thiserror::Error;

use crate::cfg::{LayerKind, NetworkDef};
use crate::weights::HEADER_BYTES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("layer {layer}: shortcut inputs {a} ({a_shape}) and {b} ({b_shape}) differ in shape")]
    ShortcutMismatch {
        layer: usize,
        a: usize,
        b: usize,
        a_shape: Shape,
        b_shape: Shape,
    },
    #[error("layer {layer}: route sources have different spatial sizes")]
    RouteMismatch { layer: usize },
    #[error("layer {layer}: computed output dimension is not positive")]
    NonPositive { layer: usize },
    #[error("layer {layer}: reference does not resolve to an earlier layer")]
    Reference { layer: usize },
}

impl ShapeError {
    pub fn layer(&self) -> Option<usize> {
        Some(match self {
            ShapeError::ShortcutMismatch { layer, .. }
            | ShapeError::RouteMismatch { layer }
            | ShapeError::NonPositive { layer }
            | ShapeError::Reference { layer } => *layer,
        })
    }
}

/// Feature-map shape, channels first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeInfo {
    pub input: Shape,
    /// Output shape of every layer.
    pub layers: Vec<Shape>,
}

impl ShapeInfo {
    /// Shape feeding the layer's primary input (the previous layer, or the image).
    pub fn input_of(&self, index: usize) -> Shape {
        match index.checked_sub(1) {
            Some(p) => self.layers[p],
            None => self.input,
        }
    }
}

fn out_dim(layer: usize, extent: usize, padding: usize, size: usize, stride: usize) -> Result<usize, ShapeError> {
    let span = (extent + padding) as i64 - size as i64;
    if span < 0 {
        return Err(ShapeError::NonPositive { layer });
    }
    Ok(span as usize / stride + 1)
}

/// Propagates shapes through `def`. `input_hw` overrides the header's
/// `(height, width)`.
pub fn infer_shapes(def: &NetworkDef, input_hw: Option<(usize, usize)>) -> Result<ShapeInfo, ShapeError> {
    let (h, w) = input_hw.unwrap_or((def.net.height, def.net.width));
    let input = Shape::new(def.net.channels, h, w);
    if input.is_empty() {
        return Err(ShapeError::NonPositive { layer: 0 });
    }
    let mut layers: Vec<Shape> = Vec::with_capacity(def.layers.len());
    for (i, layer) in def.layers.iter().enumerate() {
        let prev = if i == 0 { input } else { layers[i - 1] };
        let inputs = def.inputs(i).map_err(|_| ShapeError::Reference { layer: i })?;
        let fetch = |src: Option<usize>| src.map_or(input, |s| layers[s]);
        let out = match &layer.kind {
            LayerKind::Convolutional(c) => {
                let pad = 2 * c.effective_padding();
                Shape::new(
                    c.filters,
                    out_dim(i, prev.h, pad, c.size, c.stride)?,
                    out_dim(i, prev.w, pad, c.size, c.stride)?,
                )
            }
            LayerKind::MaxPool(m) => {
                let pad = m.total_padding();
                Shape::new(
                    prev.c,
                    out_dim(i, prev.h, pad, m.size, m.stride)?,
                    out_dim(i, prev.w, pad, m.size, m.stride)?,
                )
            }
            LayerKind::Upsample(u) => Shape::new(prev.c, prev.h * u.stride, prev.w * u.stride),
            LayerKind::Route(_) => {
                let first = fetch(inputs[0]);
                let mut c = 0;
                for &src in &inputs {
                    let s = fetch(src);
                    if s.h != first.h || s.w != first.w {
                        return Err(ShapeError::RouteMismatch { layer: i });
                    }
                    c += s.c;
                }
                Shape::new(c, first.h, first.w)
            }
            LayerKind::Shortcut(_) => {
                let a = fetch(inputs[0]);
                let b = fetch(inputs[1]);
                if a != b {
                    return Err(ShapeError::ShortcutMismatch {
                        layer: i,
                        a: i - 1,
                        b: inputs[1].unwrap_or(0),
                        a_shape: a,
                        b_shape: b,
                    });
                }
                a
            }
            LayerKind::Yolo(_) => prev,
        };
        if out.is_empty() {
            return Err(ShapeError::NonPositive { layer: i });
        }
        layers.push(out);
    }
    Ok(ShapeInfo { input, layers })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub index: usize,
    pub kind: &'static str,
    pub out: Shape,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    /// `(height, width)` the FLOPs were counted at.
    pub input_hw: (usize, usize),
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    pub fn bflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    /// Size of the weight file: 4 bytes per parameter plus the header.
    pub fn model_volume_bytes(&self) -> u64 {
        4 * self.total_params + HEADER_BYTES as u64
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5}  {:<14} {:>16} {:>12} {:>16}",
            "layer", "type", "output", "params", "flops"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:>5}  {:<14} {:>16} {:>12} {:>16}",
                l.index,
                l.kind,
                l.out.to_string(),
                l.params,
                l.flops
            );
        }
        let _ = writeln!(
            out,
            "input {}x{}: {} params, {:.2} BFLOPS, volume {:.1} MB",
            self.input_hw.0,
            self.input_hw.1,
            self.total_params,
            self.bflops(),
            self.model_volume_bytes() as f64 / (1024.0 * 1024.0)
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,type,out_h,out_w,out_c,params,flops\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                l.index, l.kind, l.out.h, l.out.w, l.out.c, l.params, l.flops
            );
        }
        let _ = writeln!(out, "total,,,,,{},{}", self.total_params, self.total_flops);
        out
    }
}

/// Parameters of one convolution with `c_in` input channels.
pub fn conv_params(size: usize, c_in: usize, filters: usize, batch_normalize: bool) -> u64 {
    let kernel = (size * size * c_in * filters) as u64;
    let per_filter = if batch_normalize { 4 } else { 1 };
    kernel + per_filter * filters as u64
}

/// Per-layer parameters and FLOPs at `input_hw` (header size when `None`).
pub fn count_flops(def: &NetworkDef, input_hw: Option<(usize, usize)>) -> Result<CostReport, ShapeError> {
    let shapes = infer_shapes(def, input_hw)?;
    let mut layers = Vec::with_capacity(def.layers.len());
    for (i, layer) in def.layers.iter().enumerate() {
        let out = shapes.layers[i];
        let (params, flops) = match &layer.kind {
            LayerKind::Convolutional(c) => {
                let c_in = shapes.input_of(i).c;
                let macs = (c.size * c.size * c_in * c.filters) as u64 * (out.h * out.w) as u64;
                (conv_params(c.size, c_in, c.filters, c.batch_normalize), 2 * macs)
            }
            _ => (0, 0),
        };
        layers.push(LayerCost {
            index: i,
            kind: layer.kind.section_name(),
            out,
            params,
            flops,
        });
    }
    Ok(CostReport {
        input_hw: (shapes.input.h, shapes.input.w),
        total_params: layers.iter().map(|l| l.params).sum(),
        total_flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    })
}

/// Total trainable parameters; independent of the input resolution.
pub fn count_params(def: &NetworkDef) -> Result<u64, ShapeError> {
    count_flops(def, None).map(|r| r.total_params)
}
