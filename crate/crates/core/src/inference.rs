//! Deterministic CPU forward pass and YOLO decoding.
//!
//! Every output element is accumulated in a fixed order (input channel, then
//! kernel row, then kernel column), so results are bit-identical between runs
//! whether or not output channels are computed in parallel.

use thiserror::Error;

use crate::cfg::{Activation, Convolutional, LayerKind, MaxPool, NetworkDef, Yolo};
use crate::graph::Shape;
use crate::weights::{ConvAffine, ConvWeights, WeightStore};

/// Batch-norm epsilon at inference.
pub const BN_EPS: f32 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("layer {layer}: expected input {expected}, got {got}")]
    Shape { layer: usize, expected: Shape, got: Shape },
    #[error("layer {layer}: {reason}")]
    Mismatch { layer: usize, reason: String },
    #[error("yolo layer: {channels} channels do not split into {anchors} anchors x (5 + {classes})")]
    Decode {
        channels: usize,
        anchors: usize,
        classes: usize,
    },
    #[error("layer {layer}: missing convolution weights")]
    MissingWeights { layer: usize },
    #[error("layer {layer}: reference does not resolve")]
    Reference { layer: usize },
}

/// Dense `c x h x w` tensor, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Option<Self> {
        (data.len() == shape.len()).then_some(Tensor { shape, data })
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.shape.h * self.shape.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.h + y) * self.shape.w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Keeps only the channels where `keep` is true.
    pub fn select_channels(&self, keep: &[bool]) -> Tensor {
        let n = self.shape.h * self.shape.w;
        let mut data = Vec::with_capacity(keep.iter().filter(|&&k| k).count() * n);
        for (c, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            data.extend_from_slice(&self.data[c * n..(c + 1) * n]);
        }
        Tensor {
            shape: Shape::new(data.len() / n.max(1), self.shape.h, self.shape.w),
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f32> {
        (self.shape == other.shape).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max)
        })
    }
}

#[cfg(feature = "parallel")]
fn for_each_channel<F>(data: &mut [f32], plane: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    use rayon::prelude::*;
    data.par_chunks_mut(plane).enumerate().for_each(|(c, p)| f(c, p));
}

#[cfg(not(feature = "parallel"))]
fn for_each_channel<F>(data: &mut [f32], plane: usize, f: F)
where
    F: Fn(usize, &mut [f32]),
{
    data.chunks_mut(plane).enumerate().for_each(|(c, p)| f(c, p));
}

/// Convolution, then batch norm (running statistics) or bias, then activation.
pub fn conv_bn_act_forward(
    input: &Tensor,
    conv: &Convolutional,
    weights: &ConvWeights,
) -> Result<Tensor, InferenceError> {
    let ksize = conv.size;
    let filters = weights.filters();
    let c_in = input.shape.c;
    if filters != conv.filters || weights.kernel.len() != filters * c_in * ksize * ksize {
        return Err(InferenceError::Mismatch {
            layer: 0,
            reason: format!(
                "kernel of {} values does not fit {} filters over {} input channels",
                weights.kernel.len(),
                conv.filters,
                c_in
            ),
        });
    }
    let pad = conv.effective_padding() as isize;
    let stride = conv.stride;
    let (ih, iw) = (input.shape.h as isize, input.shape.w as isize);
    let oh = (input.shape.h + 2 * pad as usize - ksize) / stride + 1;
    let ow = (input.shape.w + 2 * pad as usize - ksize) / stride + 1;
    let shape = Shape::new(filters, oh, ow);
    let mut out = Tensor::zeros(shape);

    for_each_channel(&mut out.data, oh * ow, |oc, acc| {
        let kbase = oc * c_in * ksize * ksize;
        for ic in 0..c_in {
            let src = input.plane(ic);
            for ky in 0..ksize {
                for kx in 0..ksize {
                    let wv = weights.kernel[kbase + (ic * ksize + ky) * ksize + kx];
                    let dx = kx as isize - pad;
                    // output columns whose input column lands inside the image
                    let ox_lo = if dx < 0 { ((-dx) as usize).div_ceil(stride) } else { 0 };
                    let ox_hi = {
                        let limit = iw - dx; // need ox*stride < limit
                        if limit <= 0 {
                            0
                        } else {
                            (((limit - 1) as usize) / stride + 1).min(ow)
                        }
                    };
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        let row = &src[iy as usize * iw as usize..(iy as usize + 1) * iw as usize];
                        let dst = &mut acc[oy * ow..(oy + 1) * ow];
                        for ox in ox_lo..ox_hi {
                            let ix = (ox * stride) as isize + dx;
                            dst[ox] += wv * row[ix as usize];
                        }
                    }
                }
            }
        }
        match &weights.affine {
            ConvAffine::BatchNorm(bn) => {
                let inv = 1.0 / (bn.var[oc] + BN_EPS).sqrt();
                for v in acc.iter_mut() {
                    *v = conv.activation.apply(bn.gamma[oc] * ((*v - bn.mean[oc]) * inv) + bn.beta[oc]);
                }
            }
            ConvAffine::Bias(b) => {
                for v in acc.iter_mut() {
                    *v = conv.activation.apply(*v + b[oc]);
                }
            }
        }
    });
    Ok(out)
}

/// Darknet max pooling: total padding `p` split as `p/2` before, the rest
/// after; padded cells never win.
pub fn maxpool_forward(input: &Tensor, pool: &MaxPool) -> Tensor {
    let pad = pool.total_padding();
    let offset = (pad / 2) as isize;
    let (h, w) = (input.shape.h, input.shape.w);
    let oh = (h + pad - pool.size) / pool.stride + 1;
    let ow = (w + pad - pool.size) / pool.stride + 1;
    let mut out = Tensor::zeros(Shape::new(input.shape.c, oh, ow));
    for c in 0..input.shape.c {
        let src = input.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..pool.size {
                    let iy = (oy * pool.stride + ky) as isize - offset;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..pool.size {
                        let ix = (ox * pool.stride + kx) as isize - offset;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        best = best.max(src[iy as usize * w + ix as usize]);
                    }
                }
                out.data[(c * oh + oy) * ow + ox] = best;
            }
        }
    }
    out
}

pub fn upsample_forward(input: &Tensor, stride: usize) -> Tensor {
    let (h, w) = (input.shape.h, input.shape.w);
    let (oh, ow) = (h * stride, w * stride);
    let mut out = Tensor::zeros(Shape::new(input.shape.c, oh, ow));
    for c in 0..input.shape.c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.data[(c * oh + oy) * ow + ox] = input.get(c, oy / stride, ox / stride);
            }
        }
    }
    out
}

pub fn route_forward(inputs: &[&Tensor]) -> Result<Tensor, InferenceError> {
    let first = inputs[0].shape;
    let mut data = Vec::new();
    let mut c = 0;
    for t in inputs {
        if t.shape.h != first.h || t.shape.w != first.w {
            return Err(InferenceError::Shape {
                layer: 0,
                expected: Shape::new(t.shape.c, first.h, first.w),
                got: t.shape,
            });
        }
        c += t.shape.c;
        data.extend_from_slice(&t.data);
    }
    Ok(Tensor {
        shape: Shape::new(c, first.h, first.w),
        data,
    })
}

pub fn shortcut_forward(a: &Tensor, b: &Tensor, activation: Activation) -> Result<Tensor, InferenceError> {
    if a.shape != b.shape {
        return Err(InferenceError::Shape {
            layer: 0,
            expected: a.shape,
            got: b.shape,
        });
    }
    Ok(Tensor {
        shape: a.shape,
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| activation.apply(x + y))
            .collect(),
    })
}

/// Forward pass of a parameter-free layer. Convolutions go through
/// [`conv_bn_act_forward`]; yolo layers pass their input through.
pub fn layer_forward(layer: &LayerKind, inputs: &[&Tensor]) -> Result<Tensor, InferenceError> {
    match layer {
        LayerKind::MaxPool(m) => Ok(maxpool_forward(inputs[0], m)),
        LayerKind::Upsample(u) => Ok(upsample_forward(inputs[0], u.stride)),
        LayerKind::Route(_) => route_forward(inputs),
        LayerKind::Shortcut(s) => {
            let b = inputs.get(1).ok_or(InferenceError::Reference { layer: 0 })?;
            shortcut_forward(inputs[0], b, s.activation)
        }
        LayerKind::Yolo(_) => Ok(inputs[0].clone()),
        LayerKind::Convolutional(_) => Err(InferenceError::Mismatch {
            layer: 0,
            reason: "convolutions need weights".into(),
        }),
    }
}

/// Box in input-image pixels, center form.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub objectness: f32,
    pub class_scores: Vec<f32>,
    pub class_id: usize,
    /// `objectness * max(class_scores)`.
    pub score: f32,
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes one detection head. `input_hw` is the network input `(h, w)` in pixels.
/// Detections with objectness at or below `threshold` are dropped.
pub fn yolo_decode(
    feature: &Tensor,
    yolo: &Yolo,
    input_hw: (usize, usize),
    threshold: f32,
) -> Result<Vec<Detection>, InferenceError> {
    let anchors = yolo.masked_anchors();
    let entries = 5 + yolo.classes;
    if feature.shape.c != anchors.len() * entries {
        return Err(InferenceError::Decode {
            channels: feature.shape.c,
            anchors: anchors.len(),
            classes: yolo.classes,
        });
    }
    let (gh, gw) = (feature.shape.h, feature.shape.w);
    let (net_h, net_w) = (input_hw.0 as f32, input_hw.1 as f32);
    let mut dets = Vec::new();
    for (a, &(aw, ah)) in anchors.iter().enumerate() {
        let base = a * entries;
        for i in 0..gh {
            for j in 0..gw {
                let at = |k: usize| feature.get(base + k, i, j);
                let objectness = sigmoid(at(4));
                if objectness <= threshold {
                    continue;
                }
                let class_scores: Vec<f32> = (0..yolo.classes).map(|k| sigmoid(at(5 + k))).collect();
                let (class_id, best) = class_scores
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |acc, (k, s)| if s > acc.1 { (k, s) } else { acc });
                dets.push(Detection {
                    x: (sigmoid(at(0)) + j as f32) / gw as f32 * net_w,
                    y: (sigmoid(at(1)) + i as f32) / gh as f32 * net_h,
                    w: aw * at(2).exp(),
                    h: ah * at(3).exp(),
                    objectness,
                    class_scores,
                    class_id,
                    score: objectness * best,
                });
            }
        }
    }
    Ok(dets)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub objectness_threshold: f32,
    /// Keep every intermediate output instead of only the ones still needed.
    pub keep_all: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            objectness_threshold: 0.1,
            keep_all: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetworkOutput {
    /// Per-layer outputs. Without `keep_all`, only the last layer, yolo
    /// layers and layers referenced later are retained.
    pub layers: Vec<Option<Tensor>>,
    pub detections: Vec<Detection>,
}

impl NetworkOutput {
    pub fn last(&self) -> Option<&Tensor> {
        self.layers.last().and_then(Option::as_ref)
    }
}

/// Runs `def` on `input`, evaluating layers in index order.
pub fn run_network(
    def: &NetworkDef,
    store: &WeightStore,
    input: &Tensor,
    opts: &RunOptions,
) -> Result<NetworkOutput, InferenceError> {
    let n = def.layers.len();
    // last consumer of each layer, to drop tensors early
    let mut last_use = vec![0usize; n];
    let mut inputs_of = Vec::with_capacity(n);
    for i in 0..n {
        let ins = def.inputs(i).map_err(|_| InferenceError::Reference { layer: i })?;
        for s in ins.iter().flatten() {
            last_use[*s] = last_use[*s].max(i);
        }
        inputs_of.push(ins);
    }
    if input.shape.c != def.net.channels {
        return Err(InferenceError::Shape {
            layer: 0,
            expected: Shape::new(def.net.channels, input.shape.h, input.shape.w),
            got: input.shape,
        });
    }
    let input_hw = (input.shape.h, input.shape.w);
    let mut outputs: Vec<Option<Tensor>> = Vec::with_capacity(n);
    let mut detections = Vec::new();
    for (i, layer) in def.layers.iter().enumerate() {
        let srcs: Vec<&Tensor> = inputs_of[i]
            .iter()
            .map(|s| match s {
                None => Ok(input),
                Some(s) => outputs[*s].as_ref().ok_or(InferenceError::Reference { layer: i }),
            })
            .collect::<Result<_, _>>()?;
        let with_layer = |e: InferenceError| match e {
            InferenceError::Shape { expected, got, .. } => InferenceError::Shape {
                layer: i,
                expected,
                got,
            },
            InferenceError::Mismatch { reason, .. } => InferenceError::Mismatch { layer: i, reason },
            other => other,
        };
        let out = match &layer.kind {
            LayerKind::Convolutional(c) => {
                let w = store.conv(i).ok_or(InferenceError::MissingWeights { layer: i })?;
                conv_bn_act_forward(srcs[0], c, w).map_err(with_layer)?
            }
            LayerKind::Yolo(y) => {
                detections.extend(yolo_decode(srcs[0], y, input_hw, opts.objectness_threshold)?);
                srcs[0].clone()
            }
            other => layer_forward(other, &srcs).map_err(with_layer)?,
        };
        outputs.push(Some(out));
        if !opts.keep_all {
            for s in inputs_of[i].iter().flatten() {
                let keep = last_use[*s] > i || matches!(def.layers[*s].kind, LayerKind::Yolo(_));
                if !keep {
                    outputs[*s] = None;
                }
            }
        }
    }
    Ok(NetworkOutput {
        layers: outputs,
        detections,
    })
}

/// One detection per line: `class_id score x y w h`, with 1-based class
/// ids to match annotation categories.
pub fn format_detections(dets: &[Detection]) -> String {
    dets.iter()
        .map(|d| format!("{} {} {} {} {} {}\n", d.class_id + 1, d.score, d.x, d.y, d.w, d.h))
        .collect()
}

/// Parses the `c h w` sidecar and the little-endian f32 blob of a tensor.
pub fn read_tensor_blob(sidecar: &str, blob: &[u8]) -> Result<Tensor, String> {
    let dims: Vec<usize> = sidecar
        .split(|ch: char| ch.is_whitespace() || ch == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad dimension `{s}`")))
        .collect::<Result<_, _>>()?;
    let [c, h, w] = dims[..] else {
        return Err(format!("expected `c h w`, got {} values", dims.len()));
    };
    let shape = Shape::new(c, h, w);
    if blob.len() != 4 * shape.len() {
        return Err(format!("blob has {} bytes, expected {}", blob.len(), 4 * shape.len()));
    }
    let data = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let t = Tensor { shape, data };
    if !t.is_finite() {
        return Err("tensor contains non-finite values".into());
    }
    Ok(t)
}

pub fn write_tensor_blob(t: &Tensor) -> (String, Vec<u8>) {
    let sidecar = format!("{} {} {}\n", t.shape.c, t.shape.h, t.shape.w);
    (sidecar, t.data.iter().flat_map(|v| v.to_le_bytes()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::parse_cfg;
    use crate::fixtures;
    use crate::weights::BatchNorm;

    fn conv_spec(filters: usize, size: usize, stride: usize, act: Activation) -> Convolutional {
        Convolutional {
            filters,
            size,
            stride,
            pad: true,
            padding: 0,
            batch_normalize: false,
            activation: act,
        }
    }

    fn ramp(shape: Shape) -> Tensor {
        Tensor::from_vec(shape, (0..shape.len()).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
    }

    /// Direct textbook convolution, used as an independent reference.
    fn naive_conv(input: &Tensor, c: &Convolutional, w: &ConvWeights) -> Vec<f32> {
        let pad = c.effective_padding() as isize;
        let oh = (input.shape.h + 2 * pad as usize - c.size) / c.stride + 1;
        let ow = (input.shape.w + 2 * pad as usize - c.size) / c.stride + 1;
        let mut out = vec![0.0f32; c.filters * oh * ow];
        for f in 0..c.filters {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..input.shape.c {
                        for ky in 0..c.size {
                            for kx in 0..c.size {
                                let iy = (oy * c.stride + ky) as isize - pad;
                                let ix = (ox * c.stride + kx) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= input.shape.h as isize || ix >= input.shape.w as isize {
                                    continue;
                                }
                                s += w.kernel[((f * input.shape.c + ic) * c.size + ky) * c.size + kx]
                                    * input.get(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    let b = match &w.affine {
                        ConvAffine::Bias(b) => b[f],
                        _ => unreachable!(),
                    };
                    out[(f * oh + oy) * ow + ox] = c.activation.apply(s + b);
                }
            }
        }
        out
    }

    #[test]
    fn identity_conv() {
        let input = ramp(Shape::new(1, 3, 4));
        let c = conv_spec(1, 1, 1, Activation::Linear);
        let w = ConvWeights {
            affine: ConvAffine::Bias(vec![0.0]),
            kernel: vec![1.0],
        };
        assert_eq!(conv_bn_act_forward(&input, &c, &w).unwrap(), input);
    }

    #[test]
    fn zero_gamma_gives_constant_beta() {
        let input = ramp(Shape::new(2, 5, 5));
        let mut c = conv_spec(2, 3, 1, Activation::Linear);
        c.batch_normalize = true;
        let w = ConvWeights {
            affine: ConvAffine::BatchNorm(BatchNorm {
                beta: vec![0.7, 0.0],
                gamma: vec![0.0, 1.0],
                mean: vec![0.3, 0.0],
                var: vec![2.0, 1.0],
            }),
            kernel: (0..36).map(|i| i as f32 * 0.1 - 1.0).collect(),
        };
        let out = conv_bn_act_forward(&input, &c, &w).unwrap();
        assert!(out.plane(0).iter().all(|&v| v == 0.7));
    }

    #[test]
    fn all_ones_kernel_counts_neighbours() {
        let input = Tensor::from_vec(Shape::new(1, 3, 3), vec![1.0; 9]).unwrap();
        let c = conv_spec(1, 3, 1, Activation::Linear);
        let w = ConvWeights {
            affine: ConvAffine::Bias(vec![0.0]),
            kernel: vec![1.0; 9],
        };
        let out = conv_bn_act_forward(&input, &c, &w).unwrap();
        assert_eq!(out.data, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn matches_naive_convolution() {
        for (size, stride, h, w) in [(3, 1, 7, 5), (3, 2, 8, 9), (1, 1, 4, 4), (5, 2, 11, 6), (2, 2, 5, 5)] {
            let input = ramp(Shape::new(3, h, w));
            let c = conv_spec(4, size, stride, Activation::Leaky);
            let wts = ConvWeights {
                affine: ConvAffine::Bias(vec![0.1, -0.2, 0.3, 0.0]),
                kernel: (0..4 * 3 * size * size).map(|i| ((i * 7) % 11) as f32 / 11.0 - 0.5).collect(),
            };
            let got = conv_bn_act_forward(&input, &c, &wts).unwrap();
            let want = naive_conv(&input, &c, &wts);
            for (a, b) in got.data.iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "size {size} stride {stride}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let input = ramp(Shape::new(2, 3, 3));
        let c = conv_spec(1, 1, 1, Activation::Linear);
        let w = ConvWeights {
            affine: ConvAffine::Bias(vec![0.0]),
            kernel: vec![1.0],
        };
        assert!(conv_bn_act_forward(&input, &c, &w).is_err());
    }

    #[test]
    fn unit_maxpool_is_identity() {
        let input = ramp(Shape::new(3, 6, 5));
        let pool = MaxPool {
            size: 1,
            stride: 1,
            padding: None,
        };
        assert_eq!(maxpool_forward(&input, &pool), input);
    }

    #[test]
    fn pooling_and_upsampling() {
        let t = Tensor::from_vec(Shape::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pooled = maxpool_forward(
            &t,
            &MaxPool {
                size: 2,
                stride: 2,
                padding: None,
            },
        );
        assert_eq!(pooled.shape, Shape::new(1, 1, 1));
        assert_eq!(pooled.data, vec![4.0]);
        let up = upsample_forward(&t, 2);
        assert_eq!(
            up.data,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn same_size_pool_ignores_padding() {
        let t = Tensor::from_vec(Shape::new(1, 3, 3), vec![-5.0, -4.0, -3.0, -2.0, -1.0, -6.0, -7.0, -8.0, -9.0]).unwrap();
        let out = maxpool_forward(
            &t,
            &MaxPool {
                size: 5,
                stride: 1,
                padding: None,
            },
        );
        assert_eq!(out.shape, t.shape);
        assert!(out.data.iter().all(|&v| v == -1.0));
        // even-sized stride-1 pool as used by the tiny model
        let out = maxpool_forward(
            &t,
            &MaxPool {
                size: 2,
                stride: 1,
                padding: None,
            },
        );
        assert_eq!(out.shape, t.shape);
        assert_eq!(out.data, vec![-1.0, -1.0, -3.0, -1.0, -1.0, -6.0, -7.0, -8.0, -9.0]);
    }

    #[test]
    fn shortcut_mismatch() {
        let a = ramp(Shape::new(2, 2, 2));
        let b = ramp(Shape::new(3, 2, 2));
        assert!(shortcut_forward(&a, &b, Activation::Linear).is_err());
        let s = shortcut_forward(&a, &a, Activation::Linear).unwrap();
        assert_eq!(s.data[3], 2.0 * a.data[3]);
    }

    fn one_anchor_head(classes: usize) -> Yolo {
        Yolo {
            mask: vec![0],
            anchors: vec![(10.0, 14.0)],
            classes,
        }
    }

    #[test]
    fn decode_zero_logits() {
        let feature = Tensor::zeros(Shape::new(6, 1, 1));
        let dets = yolo_decode(&feature, &one_anchor_head(1), (416, 416), 0.1).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!((d.x, d.y, d.w, d.h), (208.0, 208.0, 10.0, 14.0));
        assert_eq!(d.objectness, 0.5);
        assert_eq!(d.score, 0.25);
    }

    #[test]
    fn decode_threshold_and_saturation() {
        let mut feature = Tensor::zeros(Shape::new(6, 1, 1));
        // sigmoid(-2.944) ~= 0.05
        feature.data[4] = -2.944_439;
        assert!(yolo_decode(&feature, &one_anchor_head(1), (416, 416), 0.1).unwrap().is_empty());
        feature.data[4] = 0.0;
        feature.data[0] = 40.0;
        let d = &yolo_decode(&feature, &one_anchor_head(1), (416, 416), 0.1).unwrap()[0];
        assert!((d.x - 416.0).abs() < 1e-3);
        let bad = Tensor::zeros(Shape::new(7, 1, 1));
        assert!(matches!(
            yolo_decode(&bad, &one_anchor_head(1), (416, 416), 0.1),
            Err(InferenceError::Decode { channels: 7, .. })
        ));
    }

    #[test]
    fn single_identity_network() {
        let def = parse_cfg("[net]\nwidth=4\nheight=3\nchannels=1\n[convolutional]\nfilters=1\nsize=1\nstride=1\npad=1\nactivation=linear\n").unwrap();
        let store = WeightStore {
            header: Default::default(),
            layers: vec![Some(ConvWeights {
                affine: ConvAffine::Bias(vec![0.0]),
                kernel: vec![1.0],
            })],
        };
        let input = ramp(Shape::new(1, 3, 4));
        let out = run_network(&def, &store, &input, &RunOptions::default()).unwrap();
        assert_eq!(out.last().unwrap(), &input);
    }

    #[test]
    fn tiny_runs_on_zeros_and_is_deterministic() {
        let def = parse_cfg(fixtures::YOLOV3_TINY).unwrap();
        let store = WeightStore::seeded(&def, 11).unwrap();
        let input = Tensor::zeros(Shape::new(3, 96, 96));
        let opts = RunOptions {
            keep_all: true,
            ..Default::default()
        };
        let a = run_network(&def, &store, &input, &opts).unwrap();
        assert!(a.layers.iter().flatten().all(Tensor::is_finite));
        let b = run_network(&def, &store, &input, &opts).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            let (x, y) = (x.as_ref().unwrap(), y.as_ref().unwrap());
            assert!(x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(a.detections, b.detections);
    }

    #[test]
    fn blob_round_trip() {
        let t = ramp(Shape::new(2, 3, 4));
        let (side, blob) = write_tensor_blob(&t);
        assert_eq!(read_tensor_blob(&side, &blob).unwrap(), t);
        assert!(read_tensor_blob("2 3", &blob).is_err());
        assert!(read_tensor_blob("2 3 5", &blob).is_err());
    }
}
