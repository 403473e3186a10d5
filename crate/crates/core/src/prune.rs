//! Channel pruning driven by batch-norm scaling factors.
//!
//! A channel is removed when `|gamma| < min(global, local)`, where `global`
//! is a percentile of every `|gamma|` in the network and `local` a
//! percentile of the layer's own factors. Masks are then made consistent
//! with the graph: routes concatenate their sources' masks, pooling and
//! upsampling pass masks through, and all layers joined by shortcuts share
//! the OR of their masks.
//!
//! Percentiles are nearest-rank: the value at 0-based index `floor(p * N)`
//! of the ascending sort. Comparison is strict, so `p = 0` prunes nothing
//! and ties at the threshold are kept.

use std::fmt::Write as _;

use thiserror::Error;

use crate::cfg::{LayerKind, NetworkDef};
use crate::graph::{self, ShapeError};
use crate::weights::{BatchNorm, ConvAffine, ConvWeights, WeightStore, WeightsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("layer {layer}: {reason}")]
    Structure { layer: usize, reason: String },
    #[error("internal error at layer {layer}: {reason}")]
    Internal { layer: usize, reason: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    /// Global percentile `n` in `[0, 1)`.
    pub global_ratio: f64,
    /// Per-layer percentile `q` in `[0, 1)`; every layer keeps at least
    /// `ceil((1 - q) * N)` channels.
    pub local_percentile: f64,
    pub iterations: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            global_ratio: 0.5,
            local_percentile: 0.9,
            iterations: 1,
        }
    }
}

impl PruneConfig {
    pub fn with_ratio(global_ratio: f64) -> Self {
        PruneConfig {
            global_ratio,
            ..Default::default()
        }
    }

    /// The 50 / 90 / 95 percent presets.
    pub fn presets() -> [PruneConfig; 3] {
        [0.5, 0.9, 0.95].map(PruneConfig::with_ratio)
    }

    pub fn check(&self) -> Result<(), PruneError> {
        if !(0.0..1.0).contains(&self.global_ratio) {
            return Err(PruneError::Argument(format!(
                "global ratio {} outside [0, 1)",
                self.global_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.local_percentile) {
            return Err(PruneError::Argument(format!(
                "local percentile {} outside [0, 1)",
                self.local_percentile
            )));
        }
        if self.iterations == 0 {
            return Err(PruneError::Argument("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// `|gamma|` of one batch-normalized convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    pub layer: usize,
    pub values: Vec<f32>,
}

/// Prunable layers are convolutions with batch norm.
pub fn collect_scaling_factors(def: &NetworkDef, store: &WeightStore) -> Vec<LayerFactors> {
    def.layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let conv = l.conv()?;
            if !conv.batch_normalize {
                return None;
            }
            let bn = store.conv(i)?.batch_norm()?;
            Some(LayerFactors {
                layer: i,
                values: bn.gamma.iter().map(|g| g.abs()).collect(),
            })
        })
        .collect()
}

fn nearest_rank(values: &[f32], p: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let idx = ((p * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// Global threshold: nearest-rank `ratio` percentile of the pooled factors.
pub fn compute_global_threshold(pooled: &[f32], ratio: f64) -> Result<f32, PruneError> {
    if pooled.is_empty() {
        return Err(PruneError::Argument("no scaling factors to threshold".into()));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(PruneError::Argument(format!("ratio {ratio} outside [0, 1)")));
    }
    Ok(nearest_rank(pooled, ratio))
}

/// Local safety thresholds, one per entry of `factors`.
pub fn compute_local_thresholds(factors: &[LayerFactors], percentile: f64) -> Result<Vec<f32>, PruneError> {
    if !(0.0..1.0).contains(&percentile) {
        return Err(PruneError::Argument(format!(
            "local percentile {percentile} outside [0, 1)"
        )));
    }
    factors
        .iter()
        .map(|f| {
            if f.values.is_empty() {
                Err(PruneError::Internal {
                    layer: f.layer,
                    reason: "layer has no scaling factors".into(),
                })
            } else {
                Ok(nearest_rank(&f.values, percentile))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskOrigin {
    OwnThreshold,
    RouteConcat,
    ShortcutMerged,
    Passthrough,
    AllRetain,
}

/// One retain-vector per layer (`true` keeps the channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMaskSet {
    pub masks: Vec<Vec<bool>>,
    pub origins: Vec<MaskOrigin>,
}

impl ChannelMaskSet {
    pub fn retained(&self, layer: usize) -> usize {
        self.masks[layer].iter().filter(|&&k| k).count()
    }

    /// Every layer keeps everything.
    pub fn all_retain(def: &NetworkDef) -> Result<Self, PruneError> {
        let shapes = graph::infer_shapes(def, None)?;
        Ok(ChannelMaskSet {
            masks: shapes.layers.iter().map(|s| vec![true; s.c]).collect(),
            origins: vec![MaskOrigin::AllRetain; def.layers.len()],
        })
    }
}

/// Initial masks: prunable layers compare against `min(global, local)`;
/// everything else is a placeholder until [`propagate_masks`].
pub fn build_masks(
    def: &NetworkDef,
    factors: &[LayerFactors],
    global: f32,
    locals: &[f32],
) -> Result<ChannelMaskSet, PruneError> {
    if factors.len() != locals.len() {
        return Err(PruneError::Argument(format!(
            "{} local thresholds for {} layers",
            locals.len(),
            factors.len()
        )));
    }
    let mut set = ChannelMaskSet::all_retain(def)?;
    for (i, layer) in def.layers.iter().enumerate() {
        if matches!(layer.kind, LayerKind::Shortcut(_)) {
            // shortcut masks come only from the merge over their group
            set.masks[i].iter_mut().for_each(|k| *k = false);
            set.origins[i] = MaskOrigin::ShortcutMerged;
        }
    }
    for (f, &local) in factors.iter().zip(locals) {
        let threshold = global.min(local);
        let mask: Vec<bool> = f.values.iter().map(|&g| !(g < threshold)).collect();
        if mask.len() != set.masks[f.layer].len() {
            return Err(PruneError::Internal {
                layer: f.layer,
                reason: format!(
                    "{} factors for {} channels",
                    mask.len(),
                    set.masks[f.layer].len()
                ),
            });
        }
        if !mask.iter().any(|&k| k) {
            return Err(PruneError::Internal {
                layer: f.layer,
                reason: "mask retains no channel".into(),
            });
        }
        set.masks[f.layer] = mask;
        set.origins[f.layer] = MaskOrigin::OwnThreshold;
    }
    Ok(set)
}

/// Layer whose mask a layer's channels follow: pooling, upsampling and yolo
/// layers are transparent. `None` is the network input.
fn channel_origin(def: &NetworkDef, mut layer: Option<usize>) -> Option<usize> {
    while let Some(i) = layer {
        match def.layers[i].kind {
            LayerKind::MaxPool(_) | LayerKind::Upsample(_) | LayerKind::Yolo(_) => layer = i.checked_sub(1),
            _ => return Some(i),
        }
    }
    None
}

/// Makes masks graph-consistent, iterating to a fixed point.
pub fn propagate_masks(def: &NetworkDef, masks: &ChannelMaskSet) -> Result<ChannelMaskSet, PruneError> {
    let n = def.layers.len();
    if masks.masks.len() != n {
        return Err(PruneError::Argument(format!(
            "{} masks for {} layers",
            masks.masks.len(),
            n
        )));
    }
    let mut out = masks.clone();
    let inputs: Vec<Vec<Option<usize>>> = (0..n)
        .map(|i| {
            def.inputs(i).map_err(|e| PruneError::Structure {
                layer: i,
                reason: e.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;

    // shortcut groups as (shortcut, origin of first input, origin of second input)
    let mut joins = Vec::new();
    for (i, layer) in def.layers.iter().enumerate() {
        if let LayerKind::Shortcut(_) = layer.kind {
            let mut members = vec![i];
            for src in &inputs[i] {
                match channel_origin(def, *src) {
                    None => {
                        return Err(PruneError::Structure {
                            layer: i,
                            reason: "shortcut adds the network input".into(),
                        })
                    }
                    Some(o) if matches!(def.layers[o].kind, LayerKind::Route(_)) => {
                        return Err(PruneError::Structure {
                            layer: i,
                            reason: format!("shortcut input {o} is a route; its channels cannot be merged"),
                        })
                    }
                    Some(o) => members.push(o),
                }
            }
            joins.push(members);
        }
    }

    let mut rounds = 0;
    loop {
        rounds += 1;
        let before = out.masks.clone();
        for i in 0..n {
            match &def.layers[i].kind {
                LayerKind::MaxPool(_) | LayerKind::Upsample(_) | LayerKind::Yolo(_) => {
                    out.masks[i] = match inputs[i][0] {
                        Some(s) => out.masks[s].clone(),
                        None => vec![true; def.net.channels],
                    };
                    out.origins[i] = MaskOrigin::Passthrough;
                }
                LayerKind::Route(_) => {
                    let mut m = Vec::new();
                    for s in &inputs[i] {
                        m.extend_from_slice(&out.masks[s.expect("route sources are layers")]);
                    }
                    out.masks[i] = m;
                    out.origins[i] = MaskOrigin::RouteConcat;
                }
                _ => {}
            }
        }
        for members in &joins {
            let len = out.masks[members[0]].len();
            let mut merged = vec![false; len];
            for &m in members {
                if out.masks[m].len() != len {
                    return Err(PruneError::Structure {
                        layer: members[0],
                        reason: format!(
                            "shortcut joins layers with {} and {} channels",
                            len,
                            out.masks[m].len()
                        ),
                    });
                }
                merged.iter_mut().zip(&out.masks[m]).for_each(|(a, &b)| *a |= b);
            }
            for &m in members {
                if out.masks[m] != merged {
                    out.masks[m] = merged.clone();
                    if out.origins[m] == MaskOrigin::OwnThreshold {
                        out.origins[m] = MaskOrigin::ShortcutMerged;
                    }
                }
            }
        }
        if out.masks == before {
            break;
        }
        if rounds > n + 1 {
            return Err(PruneError::Internal {
                layer: 0,
                reason: "mask propagation did not converge".into(),
            });
        }
    }
    for (i, m) in out.masks.iter().enumerate() {
        if !m.iter().any(|&k| k) {
            return Err(PruneError::Internal {
                layer: i,
                reason: "propagated mask retains no channel".into(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPruneStats {
    pub layer: usize,
    pub before: usize,
    pub after: usize,
    /// Local threshold, when computed by [`prune_once`].
    pub local_threshold: Option<f32>,
    /// Channels kept only because `|gamma|` equals the effective threshold.
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub global_threshold: Option<f32>,
    pub layers: Vec<LayerPruneStats>,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    /// `(height, width)` the FLOPs refer to.
    pub input_hw: (usize, usize),
}

fn reduction(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (before as f64 - after as f64) / before as f64
    }
}

impl PruneReport {
    pub fn channels_before(&self) -> usize {
        self.layers.iter().map(|l| l.before).sum()
    }

    pub fn channels_after(&self) -> usize {
        self.layers.iter().map(|l| l.after).sum()
    }

    pub fn volume_before(&self) -> u64 {
        4 * self.params_before + crate::weights::HEADER_BYTES as u64
    }

    pub fn volume_after(&self) -> u64 {
        4 * self.params_after + crate::weights::HEADER_BYTES as u64
    }

    pub fn param_reduction(&self) -> f64 {
        reduction(self.params_before, self.params_after)
    }

    pub fn flops_reduction(&self) -> f64 {
        reduction(self.flops_before, self.flops_after)
    }

    pub fn volume_reduction(&self) -> f64 {
        reduction(self.volume_before(), self.volume_after())
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(g) = self.global_threshold {
            let _ = writeln!(out, "global threshold: {g:.6}");
        }
        let _ = writeln!(out, "{:>5} {:>8} {:>8} {:>12} {:>5}", "layer", "before", "after", "local", "ties");
        for l in &self.layers {
            let local = l.local_threshold.map_or("-".to_string(), |t| format!("{t:.6}"));
            let _ = writeln!(
                out,
                "{:>5} {:>8} {:>8} {:>12} {:>5}",
                l.layer, l.before, l.after, local, l.ties
            );
        }
        let _ = writeln!(
            out,
            "channels {} -> {}",
            self.channels_before(),
            self.channels_after()
        );
        let _ = writeln!(
            out,
            "params {} -> {} (-{:.1}%)",
            self.params_before,
            self.params_after,
            self.param_reduction()
        );
        let _ = writeln!(
            out,
            "BFLOPS at {}x{}: {:.3} -> {:.3} (-{:.1}%)",
            self.input_hw.0,
            self.input_hw.1,
            self.flops_before as f64 / 1e9,
            self.flops_after as f64 / 1e9,
            self.flops_reduction()
        );
        let _ = writeln!(
            out,
            "volume {} -> {} bytes (-{:.1}%)",
            self.volume_before(),
            self.volume_after(),
            self.volume_reduction()
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,before,after,local_threshold,ties\n");
        for l in &self.layers {
            let local = l.local_threshold.map_or(String::new(), |t| t.to_string());
            let _ = writeln!(out, "{},{},{},{},{}", l.layer, l.before, l.after, local, l.ties);
        }
        let _ = writeln!(
            out,
            "total,{},{},,\n# params_before={},params_after={},flops_before={},flops_after={},global_threshold={}",
            self.channels_before(),
            self.channels_after(),
            self.params_before,
            self.params_after,
            self.flops_before,
            self.flops_after,
            self.global_threshold.map_or(String::new(), |g| g.to_string())
        );
        out
    }
}

fn select<T: Copy>(values: &[T], keep: &[bool]) -> Vec<T> {
    values.iter().zip(keep).filter(|(_, &k)| k).map(|(&v, _)| v).collect()
}

/// Removes masked channels from `def` and `store`. Masks must be propagated.
pub fn apply_pruning(
    def: &NetworkDef,
    store: &WeightStore,
    masks: &ChannelMaskSet,
) -> Result<(NetworkDef, WeightStore, PruneReport), PruneError> {
    store.check_aligned(def)?;
    let shapes = graph::infer_shapes(def, None)?;
    if masks.masks.len() != def.layers.len() {
        return Err(PruneError::Argument("mask set does not cover the network".into()));
    }
    for (i, s) in shapes.layers.iter().enumerate() {
        if masks.masks[i].len() != s.c {
            return Err(PruneError::Internal {
                layer: i,
                reason: format!("mask of {} for {} channels", masks.masks[i].len(), s.c),
            });
        }
    }
    let mut new_def = def.clone();
    let mut new_store = store.clone();
    let mut stats = Vec::new();
    let image_mask = vec![true; def.net.channels];
    for (i, layer) in def.layers.iter().enumerate() {
        let LayerKind::Convolutional(conv) = &layer.kind else {
            continue;
        };
        let in_mask = match i.checked_sub(1) {
            Some(p) => &masks.masks[p],
            None => &image_mask,
        };
        let out_mask = &masks.masks[i];
        let w = store.conv(i).expect("aligned store");
        let kept = out_mask.iter().filter(|&&k| k).count();
        if !conv.batch_normalize && kept != out_mask.len() {
            return Err(PruneError::Internal {
                layer: i,
                reason: "output channels of a convolution without batch norm cannot be pruned".into(),
            });
        }
        let c_in = in_mask.len();
        let k2 = conv.size * conv.size;
        let mut kernel = Vec::with_capacity(kept * in_mask.iter().filter(|&&k| k).count() * k2);
        for (f, _) in out_mask.iter().enumerate().filter(|(_, &k)| k) {
            for (c, _) in in_mask.iter().enumerate().filter(|(_, &k)| k) {
                let at = (f * c_in + c) * k2;
                kernel.extend_from_slice(&w.kernel[at..at + k2]);
            }
        }
        let affine = match &w.affine {
            ConvAffine::BatchNorm(bn) => ConvAffine::BatchNorm(BatchNorm {
                beta: select(&bn.beta, out_mask),
                gamma: select(&bn.gamma, out_mask),
                mean: select(&bn.mean, out_mask),
                var: select(&bn.var, out_mask),
            }),
            ConvAffine::Bias(b) => ConvAffine::Bias(select(b, out_mask)),
        };
        new_store.layers[i] = Some(ConvWeights { affine, kernel });
        if let LayerKind::Convolutional(c) = &mut new_def.layers[i].kind {
            c.filters = kept;
        }
        if conv.batch_normalize {
            stats.push(LayerPruneStats {
                layer: i,
                before: out_mask.len(),
                after: kept,
                local_threshold: None,
                ties: 0,
            });
        }
    }
    if let Some(d) = crate::cfg::validate(&new_def).into_iter().next() {
        return Err(PruneError::Internal {
            layer: d.layer.unwrap_or(0),
            reason: format!("pruned definition is invalid: {}", d.reason),
        });
    }
    new_store.check_aligned(&new_def).map_err(|e| PruneError::Internal {
        layer: match &e {
            WeightsError::Alignment { layer, .. } => *layer,
            _ => 0,
        },
        reason: e.to_string(),
    })?;
    let before = graph::count_flops(def, None)?;
    let after = graph::count_flops(&new_def, None)?;
    let report = PruneReport {
        global_threshold: None,
        layers: stats,
        params_before: before.total_params,
        params_after: after.total_params,
        flops_before: before.total_flops,
        flops_after: after.total_flops,
        input_hw: before.input_hw,
    };
    Ok((new_def, new_store, report))
}

/// Masks for one pruning round, with the thresholds that produced them.
pub fn plan_masks(
    def: &NetworkDef,
    store: &WeightStore,
    config: &PruneConfig,
) -> Result<(ChannelMaskSet, f32, Vec<LayerFactors>, Vec<f32>), PruneError> {
    config.check()?;
    let factors = collect_scaling_factors(def, store);
    let pooled: Vec<f32> = factors.iter().flat_map(|f| f.values.iter().copied()).collect();
    let global = compute_global_threshold(&pooled, config.global_ratio)?;
    let locals = compute_local_thresholds(&factors, config.local_percentile)?;
    let raw = build_masks(def, &factors, global, &locals)?;
    let masks = propagate_masks(def, &raw)?;
    Ok((masks, global, factors, locals))
}

/// One threshold / propagate / apply round.
pub fn prune_once(
    def: &NetworkDef,
    store: &WeightStore,
    config: &PruneConfig,
) -> Result<(NetworkDef, WeightStore, PruneReport), PruneError> {
    let (masks, global, factors, locals) = plan_masks(def, store, config)?;
    let (new_def, new_store, mut report) = apply_pruning(def, store, &masks)?;
    report.global_threshold = Some(global);
    for (stat, (f, &local)) in report.layers.iter_mut().zip(factors.iter().zip(&locals)) {
        debug_assert_eq!(stat.layer, f.layer);
        let effective = global.min(local);
        stat.local_threshold = Some(local);
        stat.ties = f.values.iter().filter(|&&g| g == effective).count();
    }
    Ok((new_def, new_store, report))
}

#[derive(Debug, Clone)]
pub struct IterativeOutcome {
    pub def: NetworkDef,
    pub store: WeightStore,
    /// One report per completed round, in order.
    pub rounds: Vec<PruneReport>,
    /// Set when a round failed; earlier rounds are kept.
    pub error: Option<PruneError>,
}

/// Repeated pruning rounds; `fine_tune(round, def, store)` runs after each
/// one and may update weights but not shapes.
pub fn iterative_prune<F>(def: &NetworkDef, store: &WeightStore, config: &PruneConfig, mut fine_tune: F) -> IterativeOutcome
where
    F: FnMut(usize, &NetworkDef, &mut WeightStore),
{
    let mut outcome = IterativeOutcome {
        def: def.clone(),
        store: store.clone(),
        rounds: Vec::new(),
        error: None,
    };
    if let Err(e) = config.check() {
        outcome.error = Some(e);
        return outcome;
    }
    for round in 0..config.iterations {
        match prune_once(&outcome.def, &outcome.store, config) {
            Ok((d, mut s, report)) => {
                fine_tune(round, &d, &mut s);
                if let Err(e) = s.check_aligned(&d) {
                    outcome.error = Some(e.into());
                    break;
                }
                outcome.def = d;
                outcome.store = s;
                outcome.rounds.push(report);
            }
            Err(e) => {
                outcome.error = Some(e);
                break;
            }
        }
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::*;
    use crate::fixtures;

    fn conv(filters: usize, size: usize, bn: bool) -> LayerKind {
        LayerKind::Convolutional(Convolutional {
            filters,
            size,
            stride: 1,
            pad: true,
            padding: 0,
            batch_normalize: bn,
            activation: if bn { Activation::Leaky } else { Activation::Linear },
        })
    }

    fn set_gammas(store: &mut WeightStore, layer: usize, gammas: &[f32]) {
        if let Some(ConvAffine::BatchNorm(bn)) = store.layers[layer].as_mut().map(|w| &mut w.affine) {
            bn.gamma = gammas.to_vec();
        }
    }

    #[test]
    fn factors_are_absolute_and_skip_plain_convs() {
        let mut def = NetworkDef::new(NetHeader::new(4, 4, 1));
        def.push(conv(2, 1, true));
        def.push(conv(3, 1, false));
        let mut store = WeightStore::seeded(&def, 0).unwrap();
        set_gammas(&mut store, 0, &[-0.3, 0.2]);
        let f = collect_scaling_factors(&def, &store);
        assert_eq!(f, vec![LayerFactors { layer: 0, values: vec![0.3, 0.2] }]);
    }

    #[test]
    fn tiny_factors_follow_filters() {
        let def = parse_cfg(fixtures::YOLOV3_TINY).unwrap();
        let store = WeightStore::seeded(&def, 0).unwrap();
        let f = collect_scaling_factors(&def, &store);
        assert_eq!(f.len(), 11);
        for lf in f {
            assert_eq!(lf.values.len(), def.layers[lf.layer].conv().unwrap().filters);
        }
    }

    #[test]
    fn global_threshold_cases() {
        let v: Vec<f32> = (1..=10).map(|i| i as f32 / 10.0).collect();
        let g = compute_global_threshold(&v, 0.5).unwrap();
        assert_eq!(g, 0.6);
        assert_eq!(v.iter().filter(|&&x| x < g).count(), 5);
        let g0 = compute_global_threshold(&v, 0.0).unwrap();
        assert_eq!(g0, 0.1);
        assert_eq!(v.iter().filter(|&&x| x < g0).count(), 0);
        let same = vec![0.3f32; 7];
        for n in [0.0, 0.5, 0.95] {
            let g = compute_global_threshold(&same, n).unwrap();
            assert_eq!(same.iter().filter(|&&x| x < g).count(), 0);
        }
        assert!(compute_global_threshold(&v, 1.0).is_err());
        assert!(compute_global_threshold(&[], 0.5).is_err());
    }

    #[test]
    fn local_threshold_cases() {
        let flat = LayerFactors {
            layer: 0,
            values: vec![1e-3; 10],
        };
        assert_eq!(compute_local_thresholds(&[flat], 0.9).unwrap(), vec![1e-3]);
        let mut vals = vec![0.01f32; 9];
        vals.push(0.9);
        let lf = LayerFactors { layer: 0, values: vals };
        let pi = compute_local_thresholds(std::slice::from_ref(&lf), 0.9).unwrap();
        assert_eq!(pi, vec![0.9]);
        let eff = 0.5f32.min(pi[0]);
        assert_eq!(lf.values.iter().filter(|&&g| !(g < eff)).count(), 1);
        assert!(compute_local_thresholds(&[LayerFactors { layer: 3, values: vec![] }], 0.9).is_err());
    }

    #[test]
    fn direct_comparison_mask() {
        let mut def = NetworkDef::new(NetHeader::new(4, 4, 1));
        def.push(conv(3, 1, true));
        let f = vec![LayerFactors {
            layer: 0,
            values: vec![0.1, 0.7, 0.05],
        }];
        let m = build_masks(&def, &f, 0.5, &[1.0]).unwrap();
        assert_eq!(m.masks[0], vec![false, true, false]);
        let m = build_masks(&def, &f, 0.01, &[1.0]).unwrap();
        assert_eq!(m.masks[0], vec![true; 3]);
        // local threshold below the global one takes over
        let m = build_masks(&def, &f, 0.5, &[0.07]).unwrap();
        assert_eq!(m.masks[0], vec![true, true, false]);
    }

    #[test]
    fn route_concatenates() {
        let mut def = NetworkDef::new(NetHeader::new(4, 4, 1));
        def.push(conv(3, 1, true));
        def.push(conv(2, 1, true));
        def.push(LayerKind::Route(Route { layers: vec![-2, -1] }));
        let f = vec![
            LayerFactors { layer: 0, values: vec![0.9, 0.1, 0.9] },
            LayerFactors { layer: 1, values: vec![0.1, 0.9] },
        ];
        let raw = build_masks(&def, &f, 0.5, &[1.0, 1.0]).unwrap();
        let m = propagate_masks(&def, &raw).unwrap();
        assert_eq!(m.masks[2], vec![true, false, true, false, true]);
        assert_eq!(m.origins[2], MaskOrigin::RouteConcat);
    }

    #[test]
    fn shortcut_ors_its_inputs() {
        let mut def = NetworkDef::new(NetHeader::new(4, 4, 1));
        def.push(conv(3, 1, true));
        def.push(conv(3, 1, true));
        def.push(LayerKind::Shortcut(Shortcut { from: -2, activation: Activation::Linear }));
        let f = vec![
            LayerFactors { layer: 0, values: vec![0.9, 0.1, 0.9] },
            LayerFactors { layer: 1, values: vec![0.1, 0.1, 0.9] },
        ];
        let raw = build_masks(&def, &f, 0.5, &[1.0, 1.0]).unwrap();
        let m = propagate_masks(&def, &raw).unwrap();
        for l in 0..3 {
            assert_eq!(m.masks[l], vec![true, false, true]);
        }
        assert_eq!(m.origins[1], MaskOrigin::ShortcutMerged);
    }

    #[test]
    fn shortcut_over_route_is_rejected() {
        let mut def = NetworkDef::new(NetHeader::new(4, 4, 1));
        def.push(conv(2, 1, true));
        def.push(LayerKind::Route(Route { layers: vec![-1] }));
        def.push(conv(2, 1, true));
        def.push(LayerKind::Shortcut(Shortcut { from: -2, activation: Activation::Linear }));
        let store = WeightStore::seeded(&def, 0).unwrap();
        let f = collect_scaling_factors(&def, &store);
        let raw = build_masks(&def, &f, 0.0, &[1.0, 1.0]).unwrap();
        assert!(matches!(propagate_masks(&def, &raw), Err(PruneError::Structure { layer: 3, .. })));
    }

    #[test]
    fn zero_ratio_is_identity() {
        let def = parse_cfg(fixtures::YOLOV3_TINY).unwrap();
        let store = WeightStore::seeded(&def, 5).unwrap();
        let (d, s, r) = prune_once(&def, &store, &PruneConfig::with_ratio(0.0)).unwrap();
        assert_eq!(d, def);
        assert_eq!(s, store);
        assert_eq!(r.params_before, r.params_after);
    }

    #[test]
    fn pruning_slices_the_next_kernel() {
        let mut def = NetworkDef::new(NetHeader::new(3, 3, 1));
        def.push(conv(3, 1, true));
        def.push(conv(2, 1, false));
        let mut store = WeightStore::seeded(&def, 1).unwrap();
        set_gammas(&mut store, 0, &[0.9, 0.0, 0.8]);
        let f = collect_scaling_factors(&def, &store);
        let raw = build_masks(&def, &f, 0.5, &[1.0]).unwrap();
        let m = propagate_masks(&def, &raw).unwrap();
        let (d, s, r) = apply_pruning(&def, &store, &m).unwrap();
        assert_eq!(d.layers[0].conv().unwrap().filters, 2);
        let old = &store.conv(1).unwrap().kernel;
        assert_eq!(s.conv(1).unwrap().kernel, vec![old[0], old[2], old[3], old[5]]);
        assert_eq!(r.params_after, graph::count_params(&d).unwrap());
        assert!(r.params_after < r.params_before);
    }

    #[test]
    fn detection_conv_outputs_are_protected() {
        let mut def = NetworkDef::new(NetHeader::new(3, 3, 1));
        def.push(conv(2, 1, false));
        let store = WeightStore::seeded(&def, 1).unwrap();
        let mut m = ChannelMaskSet::all_retain(&def).unwrap();
        m.masks[0] = vec![true, false];
        assert!(matches!(apply_pruning(&def, &store, &m), Err(PruneError::Internal { layer: 0, .. })));
    }

    #[test]
    fn report_serializations() {
        let def = parse_cfg(fixtures::YOLOV3_TINY).unwrap();
        let store = WeightStore::seeded(&def, 5).unwrap();
        let (_, _, r) = prune_once(&def, &store, &PruneConfig::with_ratio(0.5)).unwrap();
        assert!(r.to_table().contains("global threshold"));
        assert_eq!(r.to_csv().lines().filter(|l| !l.starts_with('#')).count(), r.layers.len() + 2);
        assert!(r.flops_reduction() > 0.0);
    }

    #[test]
    fn invalid_config() {
        assert!(PruneConfig::with_ratio(1.0).check().is_err());
        assert!(PruneConfig { iterations: 0, ..Default::default() }.check().is_err());
        assert!(PruneConfig { local_percentile: 1.0, ..Default::default() }.check().is_err());
        for p in PruneConfig::presets() {
            p.check().unwrap();
        }
    }
}
