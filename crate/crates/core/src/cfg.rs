//! Darknet-style network configuration documents.
//!
//! A document is a list of `[section]` headers, each followed by `key=value`
//! lines. The first section must be `[net]` (or `[network]`); every following
//! section is one layer, indexed from 0 in document order.
//!
//! Keys the toolkit does not interpret are kept verbatim in `options` and
//! written back on emission, so hyperparameters such as `burn_in` or `policy`
//! survive a parse/emit cycle.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::graph;

/// Ordered `key=value` pairs kept as written.
pub type Options = Vec<(String, String)>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CfgError {
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: layer type [{name}] is not supported by this toolkit")]
    UnsupportedSection { line: usize, name: String },
    #[error("document does not start with a [net] section")]
    MissingNet,
    #[error("line {line}: malformed line `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: invalid value `{value}` for key `{key}`")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("line {line}: [{section}] is missing required key `{key}`")]
    MissingKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("layer {layer}: reference {reference} does not resolve to an earlier layer")]
    Reference { layer: usize, reference: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Leaky,
    Relu,
    Logistic,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Leaky => "leaky",
            Activation::Relu => "relu",
            Activation::Logistic => "logistic",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "linear" => Activation::Linear,
            "leaky" => Activation::Leaky,
            "relu" => Activation::Relu,
            "logistic" => Activation::Logistic,
            _ => return None,
        })
    }

    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Linear => x,
            Activation::Leaky => {
                if x > 0.0 {
                    x
                } else {
                    0.1 * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Logistic => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Convolutional {
    pub filters: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: bool,
    /// Explicit padding, used only when `pad` is false.
    pub padding: usize,
    pub batch_normalize: bool,
    pub activation: Activation,
}

impl Convolutional {
    /// Padding applied on each border: `size/2` when `pad=1`.
    pub fn effective_padding(&self) -> usize {
        if self.pad {
            self.size / 2
        } else {
            self.padding
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool {
    pub size: usize,
    pub stride: usize,
    /// Total padding over both borders; Darknet's default is `size - 1`.
    pub padding: Option<usize>,
}

impl MaxPool {
    pub fn total_padding(&self) -> usize {
        self.padding.unwrap_or(self.size - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Upsample {
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    /// Source indices as written: negative values are relative to the route.
    pub layers: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shortcut {
    /// Second input as written; the first input is always the previous layer.
    pub from: i64,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Yolo {
    pub mask: Vec<usize>,
    pub anchors: Vec<(f32, f32)>,
    pub classes: usize,
}

impl Yolo {
    /// Anchor pairs selected by `mask`, in mask order.
    pub fn masked_anchors(&self) -> Vec<(f32, f32)> {
        self.mask.iter().map(|&m| self.anchors[m]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Convolutional(Convolutional),
    MaxPool(MaxPool),
    Upsample(Upsample),
    Route(Route),
    Shortcut(Shortcut),
    Yolo(Yolo),
}

impl LayerKind {
    pub fn section_name(&self) -> &'static str {
        match self {
            LayerKind::Convolutional(_) => "convolutional",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::Upsample(_) => "upsample",
            LayerKind::Route(_) => "route",
            LayerKind::Shortcut(_) => "shortcut",
            LayerKind::Yolo(_) => "yolo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    /// Keys not interpreted by the toolkit.
    pub options: Options,
}

impl Layer {
    pub fn new(kind: LayerKind) -> Self {
        Layer {
            kind,
            options: Vec::new(),
        }
    }

    pub fn conv(&self) -> Option<&Convolutional> {
        match &self.kind {
            LayerKind::Convolutional(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetHeader {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub options: Options,
}

impl NetHeader {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        NetHeader {
            width,
            height,
            channels,
            options: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDef {
    pub net: NetHeader,
    pub layers: Vec<Layer>,
}

/// Resolves a reference written at layer `at` to an absolute index.
pub fn resolve_ref(at: usize, reference: i64) -> Option<usize> {
    let abs = if reference < 0 {
        at as i64 + reference
    } else {
        reference
    };
    (abs >= 0 && (abs as usize) < at).then_some(abs as usize)
}

impl NetworkDef {
    pub fn new(net: NetHeader) -> Self {
        NetworkDef {
            net,
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, kind: LayerKind) -> usize {
        self.layers.push(Layer::new(kind));
        self.layers.len() - 1
    }

    /// Absolute indices of the layers feeding `index`, in evaluation order.
    /// `None` inside the result stands for the network input.
    pub fn inputs(&self, index: usize) -> Result<Vec<Option<usize>>, CfgError> {
        let prev = index.checked_sub(1);
        match &self.layers[index].kind {
            LayerKind::Route(r) => r
                .layers
                .iter()
                .map(|&l| {
                    resolve_ref(index, l)
                        .map(Some)
                        .ok_or(CfgError::Reference {
                            layer: index,
                            reference: l,
                        })
                })
                .collect(),
            LayerKind::Shortcut(s) => {
                let from = resolve_ref(index, s.from).ok_or(CfgError::Reference {
                    layer: index,
                    reference: s.from,
                })?;
                Ok(vec![prev, Some(from)])
            }
            _ => Ok(vec![prev]),
        }
    }

    pub fn yolo_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Yolo(_)))
            .map(|(i, _)| i)
            .collect()
    }
}

/// One problem found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    /// `None` for problems with the `[net]` header.
    pub layer: Option<usize>,
    pub reason: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer {l}: {}", self.reason),
            None => write!(f, "[net]: {}", self.reason),
        }
    }
}

const UNSUPPORTED: &[&str] = &[
    "connected",
    "local",
    "lstm",
    "rnn",
    "gru",
    "crnn",
    "region",
    "reorg",
    "reorg3d",
    "detection",
    "softmax",
    "dropout",
    "avgpool",
    "cost",
    "crop",
    "normalization",
    "batchnorm",
    "deconvolutional",
    "iseg",
    "l2norm",
    "logistic",
    "activation",
];

struct Section {
    name: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        // last occurrence wins, matching Darknet's option lookup
        let pos = self.entries.iter().rposition(|(k, _, _)| k == key)?;
        let (_, v, line) = self.entries.remove(pos);
        self.entries.retain(|(k, _, _)| k != key);
        Some((v, line))
    }

    fn int<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, CfgError> {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| CfgError::InvalidValue {
                line,
                key: key.to_string(),
                value: v,
            }),
        }
    }

    fn required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, CfgError> {
        self.int(key)?.ok_or_else(|| CfgError::MissingKey {
            line: self.line,
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    fn flag(&mut self, key: &str) -> Result<bool, CfgError> {
        Ok(self.int::<i64>(key)?.unwrap_or(0) != 0)
    }

    fn activation(&mut self, default: Activation) -> Result<Activation, CfgError> {
        match self.take("activation") {
            None => Ok(default),
            Some((v, line)) => Activation::parse(&v).ok_or(CfgError::InvalidValue {
                line,
                key: "activation".into(),
                value: v,
            }),
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>, CfgError> {
        let Some((v, line)) = self.take(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| CfgError::InvalidValue {
                    line,
                    key: key.to_string(),
                    value: v.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn rest(self) -> Options {
        self.entries.into_iter().map(|(k, v, _)| (k, v)).collect()
    }
}

fn split_sections(text: &str) -> Result<Vec<Section>, CfgError> {
    let mut sections: Vec<Section> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| CfgError::Malformed {
                line: line_no,
                text: raw.to_string(),
            })?;
            sections.push(Section {
                name: name.trim().to_string(),
                line: line_no,
                entries: Vec::new(),
            });
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CfgError::Malformed {
            line: line_no,
            text: raw.to_string(),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(CfgError::Malformed {
                line: line_no,
                text: raw.to_string(),
            });
        }
        let section = sections.last_mut().ok_or(CfgError::MissingNet)?;
        section
            .entries
            .push((key.to_string(), v.trim().to_string(), line_no));
    }
    Ok(sections)
}

fn positive(value: usize, key: &str, line: usize) -> Result<usize, CfgError> {
    if value == 0 {
        return Err(CfgError::InvalidValue {
            line,
            key: key.into(),
            value: value.to_string(),
        });
    }
    Ok(value)
}

fn parse_layer(mut s: Section) -> Result<Layer, CfgError> {
    let line = s.line;
    let kind = match s.name.as_str() {
        "convolutional" | "conv" => {
            let filters = s.int("filters")?.unwrap_or(1);
            let size = s.int("size")?.unwrap_or(1);
            let stride = s.int("stride")?.unwrap_or(1);
            LayerKind::Convolutional(Convolutional {
                filters: positive(filters, "filters", line)?,
                size: positive(size, "size", line)?,
                stride: positive(stride, "stride", line)?,
                pad: s.flag("pad")?,
                padding: s.int("padding")?.unwrap_or(0),
                batch_normalize: s.flag("batch_normalize")?,
                activation: s.activation(Activation::Logistic)?,
            })
        }
        "maxpool" | "max" => {
            let stride = s.int("stride")?.unwrap_or(1);
            let size = s.int("size")?.unwrap_or(stride);
            LayerKind::MaxPool(MaxPool {
                size: positive(size, "size", line)?,
                stride: positive(stride, "stride", line)?,
                padding: s.int("padding")?,
            })
        }
        "upsample" => {
            let stride = s.int("stride")?.unwrap_or(2);
            LayerKind::Upsample(Upsample {
                stride: positive(stride, "stride", line)?,
            })
        }
        "route" => {
            let layers: Vec<i64> = s.list("layers")?.unwrap_or_default();
            if layers.is_empty() {
                return Err(CfgError::MissingKey {
                    line,
                    section: s.name.clone(),
                    key: "layers".into(),
                });
            }
            LayerKind::Route(Route { layers })
        }
        "shortcut" => LayerKind::Shortcut(Shortcut {
            from: s.required("from")?,
            activation: s.activation(Activation::Linear)?,
        }),
        "yolo" => {
            let flat: Vec<f32> = s.list("anchors")?.unwrap_or_default();
            if flat.len() % 2 != 0 {
                return Err(CfgError::InvalidValue {
                    line,
                    key: "anchors".into(),
                    value: format!("{} values", flat.len()),
                });
            }
            let anchors: Vec<(f32, f32)> = flat.chunks(2).map(|p| (p[0], p[1])).collect();
            let mask = s
                .list("mask")?
                .unwrap_or_else(|| (0..anchors.len()).collect());
            let classes = s.int("classes")?.unwrap_or(20);
            LayerKind::Yolo(Yolo {
                mask,
                anchors,
                classes,
            })
        }
        other if UNSUPPORTED.contains(&other) => {
            return Err(CfgError::UnsupportedSection {
                line,
                name: other.to_string(),
            })
        }
        other => {
            return Err(CfgError::UnknownSection {
                line,
                name: other.to_string(),
            })
        }
    };
    Ok(Layer {
        kind,
        options: s.rest(),
    })
}

/// Parses a configuration document. LF and CRLF line endings are accepted.
pub fn parse_cfg(text: &str) -> Result<NetworkDef, CfgError> {
    let mut sections = split_sections(text)?.into_iter();
    let mut net = match sections.next() {
        Some(s) if s.name == "net" || s.name == "network" => s,
        _ => return Err(CfgError::MissingNet),
    };
    let width = positive(net.required("width")?, "width", net.line)?;
    let height = positive(net.required("height")?, "height", net.line)?;
    let channels = positive(net.required("channels")?, "channels", net.line)?;
    let mut def = NetworkDef::new(NetHeader {
        width,
        height,
        channels,
        options: net.rest(),
    });
    for section in sections {
        let layer = parse_layer(section)?;
        def.layers.push(layer);
    }
    for i in 0..def.layers.len() {
        def.inputs(i)?;
    }
    Ok(def)
}

fn push_list<T: fmt::Display>(out: &mut String, key: &str, values: &[T]) {
    let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(out, "{key}={}", joined.join(","));
}

/// Canonical text form of `def`. Relative references stay relative.
pub fn emit_cfg(def: &NetworkDef) -> String {
    let mut out = String::new();
    let net = &def.net;
    let _ = writeln!(out, "[net]");
    let _ = writeln!(out, "width={}", net.width);
    let _ = writeln!(out, "height={}", net.height);
    let _ = writeln!(out, "channels={}", net.channels);
    for (k, v) in &net.options {
        let _ = writeln!(out, "{k}={v}");
    }
    for layer in &def.layers {
        let _ = writeln!(out, "\n[{}]", layer.kind.section_name());
        match &layer.kind {
            LayerKind::Convolutional(c) => {
                if c.batch_normalize {
                    out.push_str("batch_normalize=1\n");
                }
                let _ = writeln!(out, "filters={}", c.filters);
                let _ = writeln!(out, "size={}", c.size);
                let _ = writeln!(out, "stride={}", c.stride);
                let _ = writeln!(out, "pad={}", u8::from(c.pad));
                if c.padding != 0 {
                    let _ = writeln!(out, "padding={}", c.padding);
                }
                let _ = writeln!(out, "activation={}", c.activation.name());
            }
            LayerKind::MaxPool(m) => {
                let _ = writeln!(out, "size={}", m.size);
                let _ = writeln!(out, "stride={}", m.stride);
                if let Some(p) = m.padding {
                    let _ = writeln!(out, "padding={p}");
                }
            }
            LayerKind::Upsample(u) => {
                let _ = writeln!(out, "stride={}", u.stride);
            }
            LayerKind::Route(r) => push_list(&mut out, "layers", &r.layers),
            LayerKind::Shortcut(s) => {
                let _ = writeln!(out, "from={}", s.from);
                let _ = writeln!(out, "activation={}", s.activation.name());
            }
            LayerKind::Yolo(y) => {
                push_list(&mut out, "mask", &y.mask);
                let flat: Vec<f32> = y.anchors.iter().flat_map(|&(w, h)| [w, h]).collect();
                push_list(&mut out, "anchors", &flat);
                let _ = writeln!(out, "classes={}", y.classes);
            }
        }
        for (k, v) in &layer.options {
            let _ = writeln!(out, "{k}={v}");
        }
    }
    out
}

/// Checks structural invariants. An empty result means `def` is valid.
pub fn validate(def: &NetworkDef) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let net = &def.net;
    for (name, v) in [
        ("width", net.width),
        ("height", net.height),
        ("channels", net.channels),
    ] {
        if v == 0 {
            diags.push(Diagnostic {
                layer: None,
                reason: format!("{name} must be positive"),
            });
        }
    }
    let mut refs_ok = true;
    for (i, layer) in def.layers.iter().enumerate() {
        let mut push = |reason: String| {
            diags.push(Diagnostic {
                layer: Some(i),
                reason,
            })
        };
        match &layer.kind {
            LayerKind::Convolutional(c) => {
                if c.filters == 0 || c.size == 0 || c.stride == 0 {
                    push("convolution needs filters, size and stride >= 1".into());
                }
            }
            LayerKind::MaxPool(m) => {
                if m.size == 0 || m.stride == 0 {
                    push("maxpool needs size and stride >= 1".into());
                }
            }
            LayerKind::Upsample(u) => {
                if u.stride == 0 {
                    push("upsample stride must be >= 1".into());
                }
            }
            LayerKind::Route(r) => {
                if r.layers.is_empty() {
                    push("route lists no layers".into());
                }
                for &l in &r.layers {
                    if resolve_ref(i, l).is_none() {
                        refs_ok = false;
                        push(format!("route reference {l} does not resolve to an earlier layer"));
                    }
                }
            }
            LayerKind::Shortcut(s) => {
                if i == 0 || resolve_ref(i, s.from).is_none() {
                    refs_ok = false;
                    push(format!(
                        "shortcut reference {} does not resolve to an earlier layer",
                        s.from
                    ));
                }
            }
            LayerKind::Yolo(y) => {
                if y.classes == 0 {
                    push("yolo classes must be >= 1".into());
                }
                if let Some(&bad) = y.mask.iter().find(|&&m| m >= y.anchors.len()) {
                    push(format!(
                        "mask index {bad} exceeds {} anchor pairs",
                        y.anchors.len()
                    ));
                }
            }
        }
    }
    if refs_ok && diags.is_empty() {
        if let Err(e) = graph::infer_shapes(def, None) {
            diags.push(Diagnostic {
                layer: e.layer(),
                reason: e.to_string(),
            });
        }
    }
    diags
}
