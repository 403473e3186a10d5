//! Sparsity training of batch-norm scaling factors at toy scale.
//!
//! The objective is `task + alpha * sum(|gamma|)`, optimized by momentum SGD
//! with the L1 term handled by its subgradient. Networks are plain stacks of
//! stride-1 "same" convolutions with optional batch norm and leaky/linear
//! activations, trained in f64 on a full batch. They convert to and from
//! [`NetworkDef`]/[`WeightStore`] so checkpoints share the weights format.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cfg::{Activation, Convolutional, LayerKind, NetHeader, NetworkDef};
use crate::inference::BN_EPS;
use crate::weights::{BatchNorm, ConvAffine, ConvWeights, WeightStore, WeightsHeader};

const LEAKY_SLOPE: f64 = 0.1;
/// Weight of the current batch in the running mean/variance update.
const RUNNING_UPDATE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparsityError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("layer {layer}: {reason}")]
    Unsupported { layer: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityConfig {
    /// Penalty factor on `sum(|gamma|)`.
    pub alpha: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 decay, applied to convolution kernels only.
    pub weight_decay: f64,
    /// Full-batch updates, so one epoch is one step.
    pub epochs: usize,
    pub seed: u64,
    /// Multiplier on the task loss; 0 leaves only the penalty.
    pub task_weight: f64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        SparsityConfig {
            alpha: 0.001,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 100,
            seed: 0,
            task_weight: 1.0,
        }
    }
}

impl SparsityConfig {
    pub fn check(&self) -> Result<(), SparsityError> {
        let bad = |what: &str| Err(SparsityError::Argument(what.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be finite and >= 0");
        }
        if !(self.task_weight >= 0.0 && self.task_weight.is_finite()) {
            return bad("task weight must be finite and >= 0");
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `alpha * sum(|gamma|)` and its subgradient `alpha * sign(gamma)`, with
/// `sign(0) = 0`.
pub fn sparsity_penalty(gammas: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let value = alpha * gammas.iter().map(|g| g.abs()).sum::<f64>();
    (value, gammas.iter().map(|&g| alpha * sign(g)).collect())
}

/// Batch statistics kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Training-mode batch norm over `[n][c][hw]` data: per-channel statistics
/// over batch and spatial positions, then `gamma * x_hat + beta`.
pub fn bn_train_forward(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, BnCache), SparsityError> {
    if n == 0 || hw == 0 {
        return Err(SparsityError::Argument("empty batch".into()));
    }
    if x.len() != n * c * hw || gamma.len() != c || beta.len() != c {
        return Err(SparsityError::Argument("batch norm size mismatch".into()));
    }
    if !(eps >= 0.0) {
        return Err(SparsityError::Argument("epsilon must be >= 0".into()));
    }
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        mean[ch] = s / m;
        let mut v = 0.0;
        for b in 0..n {
            v += x[(b * c + ch) * hw..][..hw].iter().map(|&t| (t - mean[ch]).powi(2)).sum::<f64>();
        }
        var[ch] = v / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                x_hat[i] = (x[i] - mean[ch]) * inv_std[ch];
                y[i] = gamma[ch] * x_hat[i] + beta[ch];
            }
        }
    }
    Ok((y, BnCache { mean, var, x_hat, inv_std }))
}

/// Gradients of batch norm given `dy`: `(dx, dgamma, dbeta)`.
fn bn_backward(dy: &[f64], cache: &BnCache, gamma: &[f64], n: usize, hw: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = gamma.len();
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = vec![0.0; dy.len()];
    for ch in 0..c {
        let (mut sum_dxh, mut sum_dxh_xh) = (0.0, 0.0);
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * cache.x_hat[i];
                let dxh = dy[i] * gamma[ch];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * cache.x_hat[i];
            }
        }
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let dxh = dy[i] * gamma[ch];
                dx[i] = cache.inv_std[ch] / m * (m * dxh - sum_dxh - cache.x_hat[i] * sum_dxh_xh);
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Geometry {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    size: usize,
}

impl Geometry {
    fn pad(&self) -> isize {
        (self.size / 2) as isize
    }
}

/// Stride-1 "same" convolution over `[n][c_in][h][w]`.
fn conv_forward(x: &[f64], kernel: &[f64], g: Geometry) -> Vec<f64> {
    let (h, w, k, p) = (g.h, g.w, g.size, g.pad());
    let mut out = vec![0.0; g.n * g.c_out * h * w];
    for b in 0..g.n {
        for oc in 0..g.c_out {
            let o = &mut out[(b * g.c_out + oc) * h * w..][..h * w];
            for ic in 0..g.c_in {
                let src = &x[(b * g.c_in + ic) * h * w..][..h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wt = kernel[((oc * g.c_in + ic) * k + ky) * k + kx];
                        for y in 0..h {
                            let sy = y as isize + ky as isize - p;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let row = &src[sy as usize * w..][..w];
                            for xx in 0..w {
                                let sx = xx as isize + kx as isize - p;
                                if sx >= 0 && sx < w as isize {
                                    o[y * w + xx] += wt * row[sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `(dx, dkernel)` for [`conv_forward`].
fn conv_backward(x: &[f64], kernel: &[f64], dout: &[f64], g: Geometry) -> (Vec<f64>, Vec<f64>) {
    let (h, w, k, p) = (g.h, g.w, g.size, g.pad());
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    for b in 0..g.n {
        for oc in 0..g.c_out {
            let d = &dout[(b * g.c_out + oc) * h * w..][..h * w];
            for ic in 0..g.c_in {
                let base = (b * g.c_in + ic) * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let ki = ((oc * g.c_in + ic) * k + ky) * k + kx;
                        let wt = kernel[ki];
                        let mut acc = 0.0;
                        for y in 0..h {
                            let sy = y as isize + ky as isize - p;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..w {
                                let sx = xx as isize + kx as isize - p;
                                if sx >= 0 && sx < w as isize {
                                    let si = base + sy as usize * w + sx as usize;
                                    acc += d[y * w + xx] * x[si];
                                    dx[si] += d[y * w + xx] * wt;
                                }
                            }
                        }
                        dk[ki] += acc;
                    }
                }
            }
        }
    }
    (dx, dk)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub filters: usize,
    pub size: usize,
    pub batch_normalize: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn bn_leaky(filters: usize, size: usize) -> Self {
        LayerSpec {
            filters,
            size,
            batch_normalize: true,
            activation: Activation::Leaky,
        }
    }

    pub fn linear(filters: usize, size: usize) -> Self {
        LayerSpec {
            filters,
            size,
            batch_normalize: false,
            activation: Activation::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayer {
    pub filters: usize,
    pub c_in: usize,
    pub size: usize,
    pub batch_normalize: bool,
    pub activation: Activation,
    /// `[filters][c_in][size][size]`.
    pub kernel: Vec<f64>,
    /// BN shift when batch-normalized, convolution bias otherwise.
    pub beta: Vec<f64>,
    /// Empty without batch norm.
    pub gamma: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

fn activate(act: Activation, u: f64) -> f64 {
    match act {
        Activation::Leaky if u <= 0.0 => LEAKY_SLOPE * u,
        _ => u,
    }
}

fn activate_grad(act: Activation, u: f64) -> f64 {
    match act {
        Activation::Leaky if u <= 0.0 => LEAKY_SLOPE,
        _ => 1.0,
    }
}

/// A feed-forward stack of stride-1 convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<ToyLayer>,
    pub bn_eps: f64,
}

/// Inputs `[n][c][h][w]` with regression targets `[n][c_out][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Per-layer gradients, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub kernel: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

struct LayerCache {
    input: Vec<f64>,
    bn: Option<BnCache>,
    pre_act: Vec<f64>,
}

impl ToyNet {
    /// Random He-scaled kernels, gamma in `[0.1, 1)`, zero betas.
    pub fn new(channels: usize, height: usize, width: usize, specs: &[LayerSpec], seed: u64) -> Result<Self, SparsityError> {
        if channels == 0 || height == 0 || width == 0 || specs.is_empty() {
            return Err(SparsityError::Argument("toy network needs a non-empty input and at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = channels;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            check_layer(i, s.filters, s.size, s.activation)?;
            let scale = (2.0 / (c_in * s.size * s.size) as f64).sqrt();
            let kernel = (0..s.filters * c_in * s.size * s.size).map(|_| rng.gen_range(-scale..scale)).collect();
            let gamma = if s.batch_normalize {
                (0..s.filters).map(|_| rng.gen_range(0.1..1.0)).collect()
            } else {
                Vec::new()
            };
            layers.push(ToyLayer {
                filters: s.filters,
                c_in,
                size: s.size,
                batch_normalize: s.batch_normalize,
                activation: s.activation,
                kernel,
                beta: vec![0.0; s.filters],
                gamma,
                running_mean: vec![0.0; s.filters],
                running_var: vec![1.0; s.filters],
            });
            c_in = s.filters;
        }
        Ok(ToyNet {
            channels,
            height,
            width,
            layers,
            bn_eps: BN_EPS as f64,
        })
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(self.channels, |l| l.filters)
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.gamma.iter().copied()).collect()
    }

    fn geometry(&self, layer: usize, n: usize) -> Geometry {
        let l = &self.layers[layer];
        Geometry {
            n,
            c_in: l.c_in,
            c_out: l.filters,
            h: self.height,
            w: self.width,
            size: l.size,
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), SparsityError> {
        let hw = self.height * self.width;
        if batch.n == 0 {
            return Err(SparsityError::Argument("empty batch".into()));
        }
        if batch.inputs.len() != batch.n * self.channels * hw || batch.targets.len() != batch.n * self.output_channels() * hw {
            return Err(SparsityError::Argument("batch size does not match the network".into()));
        }
        Ok(())
    }

    fn forward_cached(&self, inputs: &[f64], n: usize) -> Result<(Vec<f64>, Vec<LayerCache>), SparsityError> {
        let hw = self.height * self.width;
        let mut x = inputs.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = conv_forward(&x, &l.kernel, self.geometry(i, n));
            let bn = if l.batch_normalize {
                let (y, cache) = bn_train_forward(&z, n, l.filters, hw, &l.gamma, &l.beta, self.bn_eps)?;
                z = y;
                Some(cache)
            } else {
                for (j, v) in z.iter_mut().enumerate() {
                    *v += l.beta[(j / hw) % l.filters];
                }
                None
            };
            let out = z.iter().map(|&u| activate(l.activation, u)).collect();
            caches.push(LayerCache {
                input: std::mem::replace(&mut x, out),
                bn,
                pre_act: z,
            });
        }
        Ok((x, caches))
    }

    /// Training-mode output (batch statistics).
    pub fn forward(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>, SparsityError> {
        Ok(self.forward_cached(inputs, n)?.0)
    }

    /// Task loss `task_weight * 0.5 * sum((out - target)^2) / n`, the
    /// penalty, and gradients of their sum.
    pub fn loss_and_grads(&self, batch: &Batch, alpha: f64, task_weight: f64) -> Result<(LossBreakdown, Vec<LayerGrads>, Vec<BnCache>), SparsityError> {
        self.check_batch(batch)?;
        let n = batch.n;
        let hw = self.height * self.width;
        let (out, caches) = self.forward_cached(&batch.inputs, n)?;
        let scale = task_weight / n as f64;
        let mut task = 0.0;
        let mut d: Vec<f64> = out
            .iter()
            .zip(&batch.targets)
            .map(|(&o, &t)| {
                task += (o - t) * (o - t);
                scale * (o - t)
            })
            .collect();
        task *= 0.5 * scale;
        let (penalty, _) = sparsity_penalty(&self.gammas(), alpha);

        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        let mut bn_caches = Vec::new();
        for (i, (l, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            for (dv, &u) in d.iter_mut().zip(&cache.pre_act) {
                *dv *= activate_grad(l.activation, u);
            }
            let (dz, dgamma, dbeta) = match &cache.bn {
                Some(bn) => {
                    let (dz, mut dg, db) = bn_backward(&d, bn, &l.gamma, n, hw);
                    for (g, &gamma) in dg.iter_mut().zip(&l.gamma) {
                        *g += alpha * sign(gamma);
                    }
                    (dz, dg, db)
                }
                None => {
                    let mut db = vec![0.0; l.filters];
                    for (j, &v) in d.iter().enumerate() {
                        db[(j / hw) % l.filters] += v;
                    }
                    (d, Vec::new(), db)
                }
            };
            let (dx, dk) = conv_backward(&cache.input, &l.kernel, &dz, self.geometry(i, n));
            grads.push(LayerGrads {
                kernel: dk,
                beta: dbeta,
                gamma: dgamma,
            });
            if let Some(bn) = cache.bn {
                bn_caches.push(bn);
            }
            d = dx;
        }
        grads.reverse();
        bn_caches.reverse();
        Ok((
            LossBreakdown {
                task,
                penalty,
                total: task + penalty,
            },
            grads,
            bn_caches,
        ))
    }

    /// Total loss only.
    pub fn loss(&self, batch: &Batch, alpha: f64, task_weight: f64) -> Result<LossBreakdown, SparsityError> {
        Ok(self.loss_and_grads(batch, alpha, task_weight)?.0)
    }

    /// Inference-mode network and f32 weights; the running statistics become
    /// the stored mean and variance.
    pub fn to_network(&self) -> (NetworkDef, WeightStore) {
        let mut def = NetworkDef::new(NetHeader::new(self.width, self.height, self.channels));
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            def.push(LayerKind::Convolutional(Convolutional {
                filters: l.filters,
                size: l.size,
                stride: 1,
                pad: true,
                padding: 0,
                batch_normalize: l.batch_normalize,
                activation: l.activation,
            }));
            let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
            let affine = if l.batch_normalize {
                ConvAffine::BatchNorm(BatchNorm {
                    beta: f(&l.beta),
                    gamma: f(&l.gamma),
                    mean: f(&l.running_mean),
                    var: f(&l.running_var),
                })
            } else {
                ConvAffine::Bias(f(&l.beta))
            };
            layers.push(Some(ConvWeights { affine, kernel: f(&l.kernel) }));
        }
        (
            def,
            WeightStore {
                header: WeightsHeader::default(),
                layers,
            },
        )
    }

    /// The inverse of [`ToyNet::to_network`] for plain convolution stacks.
    pub fn from_network(def: &NetworkDef, store: &WeightStore) -> Result<Self, SparsityError> {
        store
            .check_aligned(def)
            .map_err(|e| SparsityError::Argument(e.to_string()))?;
        let mut c_in = def.net.channels;
        let mut layers = Vec::with_capacity(def.layers.len());
        for (i, layer) in def.layers.iter().enumerate() {
            let Some(c) = layer.conv() else {
                return Err(SparsityError::Unsupported {
                    layer: i,
                    reason: format!("{} layers are not trainable here", layer.kind.section_name()),
                });
            };
            check_layer(i, c.filters, c.size, c.activation)?;
            if c.stride != 1 || c.effective_padding() != c.size / 2 {
                return Err(SparsityError::Unsupported {
                    layer: i,
                    reason: "only stride-1 same-padded convolutions are trainable".into(),
                });
            }
            let w = store.layers[i].as_ref().expect("aligned store");
            let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
            let (beta, gamma, running_mean, running_var) = match &w.affine {
                ConvAffine::BatchNorm(bn) => (f(&bn.beta), f(&bn.gamma), f(&bn.mean), f(&bn.var)),
                ConvAffine::Bias(b) => (f(b), Vec::new(), vec![0.0; c.filters], vec![1.0; c.filters]),
            };
            layers.push(ToyLayer {
                filters: c.filters,
                c_in,
                size: c.size,
                batch_normalize: c.batch_normalize,
                activation: c.activation,
                kernel: f(&w.kernel),
                beta,
                gamma,
                running_mean,
                running_var,
            });
            c_in = c.filters;
        }
        if layers.is_empty() {
            return Err(SparsityError::Argument("network has no layers".into()));
        }
        Ok(ToyNet {
            channels: def.net.channels,
            height: def.net.height,
            width: def.net.width,
            layers,
            bn_eps: BN_EPS as f64,
        })
    }
}

fn check_layer(layer: usize, filters: usize, size: usize, activation: Activation) -> Result<(), SparsityError> {
    if filters == 0 || size % 2 == 0 {
        return Err(SparsityError::Unsupported {
            layer,
            reason: "needs filters > 0 and an odd kernel size".into(),
        });
    }
    if !matches!(activation, Activation::Leaky | Activation::Linear) {
        return Err(SparsityError::Unsupported {
            layer,
            reason: format!("activation {} is not trainable here", activation.name()),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Momentum SGD over a [`ToyNet`].
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: ToyNet,
    pub config: SparsityConfig,
    pub history: Vec<LossRecord>,
    velocity: Vec<LayerGrads>,
}

impl Trainer {
    pub fn new(net: ToyNet, config: SparsityConfig) -> Result<Self, SparsityError> {
        config.check()?;
        let velocity = net
            .layers
            .iter()
            .map(|l| LayerGrads {
                kernel: vec![0.0; l.kernel.len()],
                beta: vec![0.0; l.beta.len()],
                gamma: vec![0.0; l.gamma.len()],
            })
            .collect();
        Ok(Trainer {
            net,
            config,
            history: Vec::new(),
            velocity,
        })
    }

    /// One update; returns the loss at the parameters before the update.
    pub fn step(&mut self, batch: &Batch) -> Result<LossBreakdown, SparsityError> {
        let step = self.history.len();
        let cfg = &self.config;
        let (loss, grads, caches) = self.net.loss_and_grads(batch, cfg.alpha, cfg.task_weight)?;
        if !loss.total.is_finite() {
            return Err(SparsityError::Divergence { step, loss: loss.total });
        }
        let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        let update = |p: &mut [f64], g: &[f64], v: &mut [f64], decay: f64| {
            for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = mu * *v - lr * (g + decay * *p);
                *p += *v;
            }
        };
        let mut caches = caches.into_iter();
        for ((l, g), v) in self.net.layers.iter_mut().zip(&grads).zip(&mut self.velocity) {
            update(&mut l.kernel, &g.kernel, &mut v.kernel, wd);
            update(&mut l.beta, &g.beta, &mut v.beta, 0.0);
            update(&mut l.gamma, &g.gamma, &mut v.gamma, 0.0);
            if l.batch_normalize {
                let c = caches.next().expect("one cache per batch-norm layer");
                for ch in 0..l.filters {
                    l.running_mean[ch] += RUNNING_UPDATE * (c.mean[ch] - l.running_mean[ch]);
                    l.running_var[ch] += RUNNING_UPDATE * (c.var[ch] - l.running_var[ch]);
                }
            }
        }
        self.history.push(LossRecord { step, loss });
        Ok(loss)
    }

    /// Runs `config.epochs` steps, calling `checkpoint` after every
    /// `every`-th step (never when `every` is 0).
    pub fn run<F>(&mut self, batch: &Batch, every: usize, mut checkpoint: F) -> Result<(), SparsityError>
    where
        F: FnMut(usize, &ToyNet),
    {
        for s in 1..=self.config.epochs {
            self.step(batch)?;
            if every > 0 && s % every == 0 {
                checkpoint(s, &self.net);
            }
        }
        Ok(())
    }
}

fn param_mut(net: &mut ToyNet, layer: usize, which: usize, k: usize) -> &mut f64 {
    let l = &mut net.layers[layer];
    match which {
        0 => &mut l.kernel[k],
        1 => &mut l.beta[k],
        _ => &mut l.gamma[k],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// Largest `|analytic - numeric| / max(1, |numeric|)`.
    pub max_error: f64,
    pub checked: usize,
    /// Parameters whose difference stencil crosses a kink.
    pub skipped: usize,
}

impl ToyNet {
    /// Total loss and the sign pattern of every leaky pre-activation.
    fn loss_and_pattern(&self, batch: &Batch, alpha: f64) -> Result<(f64, Vec<bool>), SparsityError> {
        let (out, caches) = self.forward_cached(&batch.inputs, batch.n)?;
        let sq: f64 = out.iter().zip(&batch.targets).map(|(o, t)| (o - t) * (o - t)).sum();
        let task = 0.5 * sq / batch.n as f64;
        let pattern = self
            .layers
            .iter()
            .zip(&caches)
            .filter(|(l, _)| l.activation == Activation::Leaky)
            .flat_map(|(_, c)| c.pre_act.iter().map(|&u| u > 0.0))
            .collect();
        Ok((task + sparsity_penalty(&self.gammas(), alpha).0, pattern))
    }
}

/// Compares backpropagated gradients of `task + alpha * sum(|gamma|)` with
/// central differences of step `1e-5 * max(1, |p|)` for every parameter.
/// Parameters are skipped where the objective is not differentiable inside
/// the stencil: gammas within one step of zero, and any parameter whose
/// perturbation flips the sign of a leaky pre-activation.
pub fn gradient_check(net: &ToyNet, batch: &Batch, alpha: f64) -> Result<GradientCheck, SparsityError> {
    net.check_batch(batch)?;
    let (_, grads, _) = net.loss_and_grads(batch, alpha, 1.0)?;
    let (_, pattern) = net.loss_and_pattern(batch, alpha)?;
    let mut probe = net.clone();
    let mut result = GradientCheck {
        max_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for li in 0..net.layers.len() {
        for which in 0..3 {
            let len = match which {
                0 => net.layers[li].kernel.len(),
                1 => net.layers[li].beta.len(),
                _ => net.layers[li].gamma.len(),
            };
            for k in 0..len {
                let p0 = *param_mut(&mut probe, li, which, k);
                let h = 1e-5 * p0.abs().max(1.0);
                if which == 2 && p0.abs() <= h {
                    result.skipped += 1;
                    continue;
                }
                *param_mut(&mut probe, li, which, k) = p0 + h;
                let (up, up_pattern) = probe.loss_and_pattern(batch, alpha)?;
                *param_mut(&mut probe, li, which, k) = p0 - h;
                let (down, down_pattern) = probe.loss_and_pattern(batch, alpha)?;
                *param_mut(&mut probe, li, which, k) = p0;
                if up_pattern != pattern || down_pattern != pattern {
                    result.skipped += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * h);
                let analytic = match which {
                    0 => grads[li].kernel[k],
                    1 => grads[li].beta[k],
                    _ => grads[li].gamma[k],
                };
                result.checked += 1;
                result.max_error = result.max_error.max((analytic - numeric).abs() / numeric.abs().max(1.0));
            }
        }
    }
    Ok(result)
}

/// A small regression problem: targets are a fixed random 1x1 linear map
/// of the input, learned by a wider network with batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyProblem {
    pub net: ToyNet,
    pub batch: Batch,
}

impl ToyProblem {
    pub const CHANNELS: usize = 3;
    pub const SIZE: usize = 8;
    pub const SAMPLES: usize = 8;

    pub fn new(seed: u64) -> Self {
        Self::with_layers(seed, &[LayerSpec::bn_leaky(16, 3), LayerSpec::bn_leaky(16, 3), LayerSpec::linear(2, 1)])
    }

    pub fn with_layers(seed: u64, specs: &[LayerSpec]) -> Self {
        let (c, side) = (Self::CHANNELS, Self::SIZE);
        Self::for_net(ToyNet::new(c, side, side, specs, seed).expect("valid toy layout"), seed)
    }

    /// Random inputs of `net`'s size and targets from a random 1x1 map.
    pub fn for_net(net: ToyNet, seed: u64) -> Self {
        let (c, n, hw) = (net.channels, Self::SAMPLES, net.height * net.width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let out_c = net.output_channels();
        let map: Vec<f64> = (0..out_c * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let inputs: Vec<f64> = (0..n * c * hw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut targets = vec![0.0; n * out_c * hw];
        for b in 0..n {
            for o in 0..out_c {
                for i in 0..c {
                    let m = map[o * c + i];
                    for p in 0..hw {
                        targets[(b * out_c + o) * hw + p] += m * inputs[(b * c + i) * hw + p];
                    }
                }
            }
        }
        ToyProblem {
            net,
            batch: Batch { n, inputs, targets },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaHistogram {
    /// `bins + 1` ascending edges over `|gamma|`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub total: usize,
    pub probe: f64,
    /// Share of channels with `|gamma| < probe`.
    pub fraction_below: f64,
}

impl GammaHistogram {
    /// Values outside `range` land in the end bins. Without a range the
    /// bins span `[0, max |gamma|]`.
    pub fn from_values(values: &[f64], bins: usize, probe: f64, range: Option<(f64, f64)>) -> Result<Self, SparsityError> {
        if values.is_empty() {
            return Err(SparsityError::Argument("no scaling factors".into()));
        }
        if bins == 0 {
            return Err(SparsityError::Argument("need at least one bin".into()));
        }
        let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        let (lo, hi) = match range {
            Some(r) => r,
            None => {
                let max = abs.iter().copied().fold(0.0, f64::max);
                (0.0, if max > 0.0 { max } else { 1.0 })
            }
        };
        if !(hi > lo) {
            return Err(SparsityError::Argument("histogram range must be increasing".into()));
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &a in &abs {
            let bin = ((a - lo) / width).floor();
            counts[(bin.max(0.0) as usize).min(bins - 1)] += 1;
        }
        let below = abs.iter().filter(|&&a| a < probe).count();
        Ok(GammaHistogram {
            edges,
            counts,
            total: abs.len(),
            probe,
            fraction_below: below as f64 / abs.len() as f64,
        })
    }

    /// `bin_low,bin_high,count` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        s
    }
}

/// Histogram of `|gamma|` over every batch-norm channel in `store`.
pub fn gamma_histogram(store: &WeightStore, bins: usize, probe: f64, range: Option<(f64, f64)>) -> Result<GammaHistogram, SparsityError> {
    let values: Vec<f64> = store
        .layers
        .iter()
        .flatten()
        .filter_map(ConvWeights::batch_norm)
        .flat_map(|bn| bn.gamma.iter().map(|&g| g as f64))
        .collect();
    if values.is_empty() {
        return Err(SparsityError::Argument("no batch-norm layers".into()));
    }
    GammaHistogram::from_values(&values, bins, probe, range)
}

/// `step,task_loss,penalty,total` rows.
pub fn loss_curve_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,task_loss,penalty,total\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.loss.task, r.loss.penalty, r.loss.total);
    }
    s
}
