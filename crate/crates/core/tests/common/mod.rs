#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slimdet::cfg::{Activation, Convolutional, LayerKind, MaxPool, NetHeader, NetworkDef, Route, Shortcut, Upsample};
use slimdet::eval::{iou, GroundTruth, ScoredBox};
use slimdet::graph::infer_shapes;
use slimdet::inference::{run_network, RunOptions, Tensor};
use slimdet::prune::{ChannelMaskSet, MaskOrigin};
use slimdet::weights::{ConvAffine, WeightStore};
use slimdet::Shape;

pub const SIDE: usize = 8;
pub const CHANNELS: usize = 3;

pub fn conv(filters: usize, size: usize, bn: bool) -> LayerKind {
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

pub fn pool(size: usize, stride: usize) -> LayerKind {
    LayerKind::MaxPool(MaxPool { size, stride, padding: None })
}

pub fn route(layers: &[i64]) -> LayerKind {
    LayerKind::Route(Route { layers: layers.to_vec() })
}

pub fn shortcut(from: i64) -> LayerKind {
    LayerKind::Shortcut(Shortcut {
        from,
        activation: Activation::Linear,
    })
}

/// Layer whose channel layout `layer` shares, looking through pools,
/// upsampling and yolo layers. `None` is the image.
pub fn channel_origin(def: &NetworkDef, mut layer: Option<usize>) -> Option<usize> {
    while let Some(i) = layer {
        match def.layers[i].kind {
            LayerKind::MaxPool(_) | LayerKind::Upsample(_) | LayerKind::Yolo(_) => layer = i.checked_sub(1),
            _ => return Some(i),
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Conv,
    Residual,
    Chain,
    Route,
    Pool,
    Spp,
    DownUp,
}

impl Block {
    fn len(self) -> usize {
        match self {
            Block::Conv | Block::Route | Block::Pool => 1,
            Block::Residual | Block::DownUp => 3,
            Block::Chain => 6,
            Block::Spp => 6,
        }
    }
}

fn residual_ok(def: &NetworkDef) -> bool {
    match channel_origin(def, def.layers.len().checked_sub(1)) {
        Some(o) => !matches!(def.layers[o].kind, LayerKind::Route(_)),
        None => false,
    }
}

fn push_block(def: &mut NetworkDef, block: Block, rng: &mut ChaCha8Rng) {
    let shapes = infer_shapes(def, None).expect("generator keeps shapes valid");
    let last = def.layers.len() - 1;
    let cur = shapes.layers[last];
    match block {
        Block::Conv => {
            def.push(conv(rng.gen_range(2..=6), *[1, 3].choose(rng).unwrap(), true));
        }
        Block::Residual | Block::Chain => {
            let reps = if block == Block::Chain { 2 } else { 1 };
            for _ in 0..reps {
                def.push(conv(rng.gen_range(2..=6), 1, true));
                def.push(conv(cur.c, 3, true));
                def.push(shortcut(-3));
            }
        }
        Block::Route => {
            let same: Vec<usize> = (0..last)
                .filter(|&j| shapes.layers[j].h == cur.h && shapes.layers[j].w == cur.w)
                .collect();
            match same.choose(rng) {
                Some(&j) if rng.gen_bool(0.5) => def.push(route(&[-1, j as i64])),
                Some(&j) => def.push(route(&[j as i64 - (last as i64 + 1), -1])),
                None => {
                    def.push(conv(rng.gen_range(2..=6), 1, true));
                    def.push(route(&[-1, -2]))
                }
            };
        }
        Block::Pool => {
            def.push(pool(*[2, 3].choose(rng).unwrap(), 1));
        }
        Block::Spp => {
            def.push(pool(5, 1));
            def.push(route(&[-2]));
            def.push(pool(9, 1));
            def.push(route(&[-4]));
            def.push(pool(13, 1));
            def.push(route(&[-1, -3, -5, -6]));
        }
        Block::DownUp => {
            def.push(pool(2, 2));
            def.push(conv(rng.gen_range(2..=6), 3, true));
            def.push(LayerKind::Upsample(Upsample { stride: 2 }));
        }
    }
}

/// Random stride-1 network on an 8x8x3 input ending in a plain 1x1
/// convolution, with a random total size in `min_layers..=max_layers`.
/// `rich` networks also contain a route, two back-to-back residual blocks
/// and an SPP block, which may push them past `max_layers`.
pub fn random_network(seed: u64, min_layers: usize, max_layers: usize, rich: bool) -> NetworkDef {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut def = NetworkDef::new(NetHeader::new(SIDE, SIDE, CHANNELS));
    def.push(conv(rng.gen_range(3..=6), 3, true));
    let mut required = if rich {
        vec![Block::Route, Block::Chain, Block::Spp]
    } else {
        Vec::new()
    };
    required.shuffle(&mut rng);
    let target = rng.gen_range(min_layers..=max_layers.max(min_layers));
    let choices = [Block::Conv, Block::Residual, Block::Route, Block::Pool, Block::DownUp, Block::Conv];
    let cost = |def: &NetworkDef, b: Block| {
        let fix = match b {
            Block::Residual | Block::Chain => !residual_ok(def),
            Block::Route => def.layers.len() < 2,
            _ => false,
        };
        b.len() + fix as usize
    };
    loop {
        let room = target.saturating_sub(def.layers.len() + 1);
        let pending: usize = required.iter().map(|&b| cost(&def, b)).sum();
        let block = if !required.is_empty() && (room <= pending || rng.gen_bool(0.4)) {
            required.pop().unwrap()
        } else {
            let fits: Vec<Block> = choices
                .iter()
                .copied()
                .filter(|&b| cost(&def, b) + pending <= room)
                .collect();
            match fits.choose(&mut rng) {
                Some(&b) => b,
                None if required.is_empty() => break,
                None => required.pop().unwrap(),
            }
        };
        if matches!(block, Block::Residual | Block::Chain) && !residual_ok(&def) {
            // a shortcut cannot add a route's channels; a conv in between fixes that
            push_block(&mut def, Block::Conv, &mut rng);
        }
        push_block(&mut def, block, &mut rng);
    }
    def.push(conv(4, 1, false));
    def
}

pub fn count_kind(def: &NetworkDef, f: impl Fn(&LayerKind) -> bool) -> usize {
    def.layers.iter().filter(|l| f(&l.kind)).count()
}

/// At least two residual blocks back to back.
pub fn has_shortcut_chain(def: &NetworkDef) -> bool {
    (3..def.layers.len()).any(|i| {
        matches!(def.layers[i].kind, LayerKind::Shortcut(_)) && matches!(def.layers[i - 3].kind, LayerKind::Shortcut(_))
    })
}

/// Sets `gamma = beta = 0` on a random subset of every batch-norm layer's
/// channels, leaving at least one live channel per layer. Returns the
/// number of dead channels.
pub fn kill_channels(store: &mut WeightStore, seed: u64, share: f64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dead = 0;
    for w in store.layers.iter_mut().flatten() {
        if let ConvAffine::BatchNorm(bn) = &mut w.affine {
            let n = bn.gamma.len();
            let keep = rng.gen_range(0..n);
            for c in 0..n {
                if c != keep && rng.gen_bool(share) {
                    bn.gamma[c] = 0.0;
                    bn.beta[c] = 0.0;
                    dead += 1;
                }
            }
        }
    }
    dead
}

pub fn random_input(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(CHANNELS, SIDE, SIDE);
    Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest output deviation between two networks over `trials` inputs.
pub fn max_deviation(a: (&NetworkDef, &WeightStore), b: (&NetworkDef, &WeightStore), trials: u64) -> f32 {
    let opts = RunOptions::default();
    (0..trials)
        .map(|t| {
            let x = random_input(1000 + t);
            let ya = run_network(a.0, a.1, &x, &opts).unwrap();
            let yb = run_network(b.0, b.1, &x, &opts).unwrap();
            ya.last().unwrap().max_abs_diff(yb.last().unwrap()).expect("same output shape")
        })
        .fold(0.0, f32::max)
}

/// Raw masks in the form the propagator expects: random for batch-norm
/// convolutions (never empty), full for plain ones, empty for shortcuts.
pub fn random_raw_masks(def: &NetworkDef, seed: u64) -> ChannelMaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ChannelMaskSet::all_retain(def).unwrap();
    for (i, layer) in def.layers.iter().enumerate() {
        match &layer.kind {
            LayerKind::Convolutional(c) if c.batch_normalize => {
                let mut m: Vec<bool> = (0..c.filters).map(|_| rng.gen_bool(0.5)).collect();
                let k = rng.gen_range(0..c.filters);
                m[k] = true;
                set.masks[i] = m;
                set.origins[i] = MaskOrigin::OwnThreshold;
            }
            LayerKind::Shortcut(_) => {
                set.masks[i].iter_mut().for_each(|k| *k = false);
                set.origins[i] = MaskOrigin::ShortcutMerged;
            }
            _ => {}
        }
    }
    set
}

/// Propagation by brute force: layers whose channels must agree form a
/// relation (a layer and what it passes through, a shortcut and both of
/// its inputs); its transitive closure gives the groups, each group takes
/// the OR of its members' own masks, and routes concatenate their sources.
pub fn oracle_masks(def: &NetworkDef, raw: &ChannelMaskSet) -> Vec<Vec<bool>> {
    let n = def.layers.len();
    let mut same = vec![vec![false; n]; n];
    for i in 0..n {
        same[i][i] = true;
        let ins = def.inputs(i).unwrap();
        let linked: Vec<usize> = match &def.layers[i].kind {
            LayerKind::MaxPool(_) | LayerKind::Upsample(_) | LayerKind::Yolo(_) => ins.iter().flatten().copied().collect(),
            LayerKind::Shortcut(_) => ins.iter().flatten().copied().collect(),
            _ => Vec::new(),
        };
        for j in linked {
            same[i][j] = true;
            same[j][i] = true;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if same[i][k] && same[k][j] {
                    same[i][j] = true;
                }
            }
        }
    }
    let mut out: Vec<Vec<bool>> = raw.masks.clone();
    let owns = |j: usize| matches!(def.layers[j].kind, LayerKind::Convolutional(_));
    let mut done = vec![false; n];
    for i in 0..n {
        if done[i] {
            continue;
        }
        let group: Vec<usize> = (0..n).filter(|&j| same[i][j]).collect();
        group.iter().for_each(|&j| done[j] = true);
        if group.iter().any(|&j| matches!(def.layers[j].kind, LayerKind::Route(_))) {
            continue;
        }
        let len = out[i].len();
        let mut merged = vec![false; len];
        for &j in group.iter().filter(|&&j| owns(j)) {
            merged.iter_mut().zip(&raw.masks[j]).for_each(|(a, &b)| *a |= b);
        }
        for &j in &group {
            out[j] = merged.clone();
        }
    }
    for i in 0..n {
        let LayerKind::Route(_) = def.layers[i].kind else { continue };
        let mut m = Vec::new();
        for s in def.inputs(i).unwrap().into_iter().flatten() {
            m.extend_from_slice(&out[s]);
        }
        for j in 0..n {
            if same[i][j] {
                out[j] = m.clone();
            }
        }
    }
    out
}

/// Every one-to-one assignment of detections (in the given order) to
/// ground truths that is consistent with the score-order rule: each
/// detection takes, among the compatible ground truths not taken by an
/// earlier detection, the one with the highest IoU (lowest index on ties),
/// and stays unmatched only when none is left. Candidates are enumerated
/// exhaustively and filtered, so a correct greedy matcher agrees with the
/// single survivor.
pub fn exhaustive_matches(ranked: &[ScoredBox], gts: &[GroundTruth], class_id: usize, t: f64) -> Vec<Vec<Option<usize>>> {
    let compatible = |d: usize, g: usize| {
        let gt = &gts[g];
        !gt.ignore && gt.class_id == class_id && gt.image == ranked[d].image && iou(&ranked[d].bbox, &gt.bbox) >= t
    };
    let mut all: Vec<Vec<Option<usize>>> = vec![Vec::new()];
    for _ in 0..ranked.len() {
        let mut next = Vec::new();
        for a in &all {
            let mut none = a.clone();
            none.push(None);
            next.push(none);
            for g in 0..gts.len() {
                if !a.contains(&Some(g)) {
                    let mut some = a.clone();
                    some.push(Some(g));
                    next.push(some);
                }
            }
        }
        all = next;
    }
    all.into_iter()
        .filter(|a| {
            a.iter().enumerate().all(|(d, pick)| {
                let taken = &a[..d];
                let mut best: Option<(usize, f64)> = None;
                for g in 0..gts.len() {
                    if !compatible(d, g) || taken.contains(&Some(g)) {
                        continue;
                    }
                    let v = iou(&ranked[d].bbox, &gts[g].bbox);
                    if best.map_or(true, |(_, b)| v > b) {
                        best = Some((g, v));
                    }
                }
                *pick == best.map(|(g, _)| g)
            })
        })
        .collect()
}

/// Random detection/ground-truth instance on a coarse grid so that exact
/// IoU ties and near-threshold overlaps both occur.
pub fn random_instance(seed: u64, max_dets: usize, max_gts: usize) -> (Vec<ScoredBox>, Vec<GroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bbox = |rng: &mut ChaCha8Rng| {
        slimdet::eval::Bbox::new(
            rng.gen_range(0..4) as f64 * 2.0,
            rng.gen_range(0..4) as f64 * 2.0,
            rng.gen_range(2..6) as f64 * 2.0,
            rng.gen_range(2..6) as f64 * 2.0,
        )
    };
    let images = ["a", "b"];
    let gts: Vec<GroundTruth> = (0..rng.gen_range(1..=max_gts))
        .map(|_| GroundTruth {
            image: images[rng.gen_range(0..2)].into(),
            bbox: bbox(&mut rng),
            class_id: rng.gen_range(1..=2),
            ignore: false,
        })
        .collect();
    let dets: Vec<ScoredBox> = (0..rng.gen_range(0..=max_dets))
        .map(|_| ScoredBox {
            image: images[rng.gen_range(0..2)].into(),
            class_id: rng.gen_range(1..=2),
            score: rng.gen_range(1..10) as f64 / 10.0,
            bbox: bbox(&mut rng),
        })
        .collect();
    (dets, gts)
}
