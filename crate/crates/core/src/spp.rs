//! Spatial pyramid pooling insertion in front of YOLO detection heads.
//!
//! A block takes one feature map and concatenates stride-1 max pools of
//! sizes 13, 9 and 5 with the map itself, so channels quadruple while the
//! spatial size is unchanged. The identity branch stands in for a 1x1 pool.

use thiserror::Error;

use crate::cfg::{resolve_ref, Layer, LayerKind, MaxPool, NetworkDef, Route};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SppError {
    #[error("network has no yolo layer")]
    NoHeads,
    #[error("detection head at layer {head}: needs {needed} convolutions before its output convolution, found {found}")]
    ShortHead { head: usize, needed: usize, found: usize },
    #[error("detection head at layer {head}: layer {layer} is not a convolution")]
    NotConvolutional { head: usize, layer: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SppOptions {
    /// Insertion depth per detection head, in file order: the block goes
    /// right after the `depth`-th convolution counted backward from the
    /// head's output convolution (which is not counted).
    pub depths: Vec<usize>,
    /// Depth for heads beyond `depths`.
    pub default_depth: usize,
    /// Emit the 1x1 branch as an explicit `size=1` maxpool instead of
    /// routing the source directly.
    pub literal_unit_pool: bool,
    /// Pool sizes, largest first.
    pub pool_sizes: [usize; 3],
}

impl Default for SppOptions {
    /// Placement that turns the stock one-block YOLOv3-SPP layout into the
    /// three-block variant: the second head gets its block after its first
    /// 3x3 convolution, the third head after its first 1x1 convolution.
    fn default() -> Self {
        SppOptions {
            depths: vec![5, 5, 6],
            default_depth: 5,
            literal_unit_pool: false,
            pool_sizes: [13, 9, 5],
        }
    }
}

impl SppOptions {
    pub fn uniform(depth: usize) -> Self {
        SppOptions {
            depths: Vec::new(),
            default_depth: depth,
            ..Default::default()
        }
    }

    fn depth(&self, head: usize) -> usize {
        self.depths.get(head).copied().unwrap_or(self.default_depth)
    }
}

fn is_same_size_pool(layer: &Layer) -> bool {
    matches!(&layer.kind, LayerKind::MaxPool(m) if m.stride == 1)
}

/// The feature map a layer forwards: a single-source route forwards its
/// source, anything else itself.
fn implicit_source(def: &NetworkDef, layer: usize) -> Option<usize> {
    match &def.layers[layer].kind {
        LayerKind::Route(r) if r.layers.len() == 1 => resolve_ref(layer, r.layers[0]),
        _ => Some(layer),
    }
}

/// True when `route` concatenates two or more same-size pools of one source,
/// plus optionally the source itself.
pub fn is_spp_route(def: &NetworkDef, route: usize) -> bool {
    let LayerKind::Route(r) = &def.layers[route].kind else {
        return false;
    };
    let Some(srcs) = r.layers.iter().map(|&l| resolve_ref(route, l)).collect::<Option<Vec<_>>>() else {
        return false;
    };
    let mut origin = None;
    let mut pools = 0;
    for &s in &srcs {
        let from = if is_same_size_pool(&def.layers[s]) {
            pools += 1;
            match s.checked_sub(1).and_then(|p| implicit_source(def, p)) {
                Some(p) => p,
                None => return false,
            }
        } else {
            s
        };
        match origin {
            None => origin = Some(from),
            Some(o) if o == from => {}
            Some(_) => return false,
        }
    }
    pools >= 2
}

/// Number of SPP blocks in `def`.
pub fn count_spp_blocks(def: &NetworkDef) -> usize {
    (0..def.layers.len()).filter(|&i| is_spp_route(def, i)).count()
}

/// Where a head gets its block, or `None` when it already has one.
fn insertion_point(def: &NetworkDef, head: usize, depth: usize) -> Result<Option<usize>, SppError> {
    let output_conv = head.checked_sub(1).ok_or(SppError::ShortHead {
        head,
        needed: depth,
        found: 0,
    })?;
    if def.layers[output_conv].conv().is_none() {
        return Err(SppError::NotConvolutional {
            head,
            layer: output_conv,
        });
    }
    let mut found = 0;
    let mut at = output_conv;
    while found < depth {
        let Some(prev) = at.checked_sub(1) else { break };
        at = prev;
        if def.layers[at].conv().is_some() {
            found += 1;
            continue;
        }
        if is_spp_route(def, at) {
            return Ok(None);
        }
        break;
    }
    if found < depth {
        return Err(SppError::ShortHead {
            head,
            needed: depth,
            found,
        });
    }
    Ok(Some(at))
}

fn block(opts: &SppOptions) -> Vec<LayerKind> {
    let pool = |size| {
        LayerKind::MaxPool(MaxPool {
            size,
            stride: 1,
            padding: None,
        })
    };
    let route = |layers: Vec<i64>| LayerKind::Route(Route { layers });
    let [a, b, c] = opts.pool_sizes;
    if opts.literal_unit_pool {
        vec![
            pool(c),
            route(vec![-2]),
            pool(b),
            route(vec![-4]),
            pool(a),
            route(vec![-6]),
            pool(1),
            route(vec![-3, -5, -7, -1]),
        ]
    } else {
        vec![
            pool(c),
            route(vec![-2]),
            pool(b),
            route(vec![-4]),
            pool(a),
            route(vec![-1, -3, -5, -6]),
        ]
    }
}

/// Inserts `block` after layer `after`, re-resolving every later reference.
fn insert_after(def: &mut NetworkDef, after: usize, block: Vec<LayerKind>) {
    let k = block.len();
    let shift = |old: usize| if old > after { old + k } else { old };
    for (old_pos, layer) in def.layers.iter_mut().enumerate().skip(after + 1) {
        let new_pos = old_pos + k;
        let fix = |r: i64| -> i64 {
            let abs = resolve_ref(old_pos, r).expect("validated reference");
            let moved = shift(abs);
            if r < 0 {
                moved as i64 - new_pos as i64
            } else {
                moved as i64
            }
        };
        match &mut layer.kind {
            LayerKind::Route(r) => r.layers.iter_mut().for_each(|l| *l = fix(*l)),
            LayerKind::Shortcut(s) => s.from = fix(s.from),
            _ => {}
        }
    }
    let tail = def.layers.split_off(after + 1);
    def.layers.extend(block.into_iter().map(Layer::new));
    def.layers.extend(tail);
}

/// Adds an SPP block to every detection head that lacks one.
pub fn insert_spp(def: &NetworkDef, opts: &SppOptions) -> Result<NetworkDef, SppError> {
    let heads = def.yolo_layers();
    if heads.is_empty() {
        return Err(SppError::NoHeads);
    }
    let mut points = Vec::new();
    for (h, &head) in heads.iter().enumerate() {
        if let Some(p) = insertion_point(def, head, opts.depth(h))? {
            points.push(p);
        }
    }
    let mut out = def.clone();
    // back to front so earlier insertion points stay valid
    points.sort_unstable();
    for &p in points.iter().rev() {
        insert_after(&mut out, p, block(opts));
    }
    Ok(out)
}
