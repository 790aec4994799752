//! Computational graph shared by the source graph, the core-op-like
//! intermediate and the final core-op graph (distinguished by [`Stage`]).
//!
//! Vertices are stored in id order and may only consume earlier vertices, so
//! every graph built through [`CompGraph::add`] is acyclic by construction.
//! A vertex with several producers sees their outputs concatenated in port
//! order. Every vertex output is a flat per-sample vector; feature maps are
//! laid out height-width-channel.

use alloc::collections::BinaryHeap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ScalarFn, Taps};
use crate::codec::Codebook;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("cycle through edge {from} -> {to}")]
    Cycle { from: usize, to: usize },
    #[error("vertex {vertex}: input {input} does not exist or is not earlier")]
    BadInput { vertex: usize, input: usize },
    #[error("vertex {vertex}: {detail}")]
    Shape { vertex: usize, detail: String },
    #[error("vertex {vertex}: kind {kind} not allowed at stage {stage:?}")]
    Stage {
        vertex: usize,
        kind: &'static str,
        stage: Stage,
    },
    #[error("vertex {0} is stranded: no path to an anchor or graph output")]
    Stranded(usize),
    #[error("anchor {0:?} is not an edge of the graph")]
    UnknownAnchor(Edge),
    #[error("parts form a cycle in the quotient graph")]
    QuotientCycle,
    #[error("unknown vertex {0}")]
    Unknown(usize),
}

/// Which operation set a graph is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Unconstrained source operations.
    Source,
    /// Weighted-sum-plus-activation operations without precision limits.
    CoreLike,
    /// Hardware core-ops plus host-side ingress/egress.
    CoreOps,
}

/// 2-D convolution geometry over an HWC map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_c: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k_w) / self.stride + 1
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn kernel_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    pub fn valid(&self) -> bool {
        self.stride >= 1
            && self.k_h >= 1
            && self.k_w >= 1
            && self.in_h + 2 * self.pad >= self.k_h
            && self.in_w + 2 * self.pad >= self.k_w
    }

    /// im2col gather: slot `(ky, kx, c)` of output pixel `(oy, ox)`.
    pub fn taps(&self) -> Taps {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel_len());
        let mut idx = Vec::with_capacity(oh * ow * k);
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..self.k_h {
                    for kx in 0..self.k_w {
                        let y = (oy * self.stride + ky) as isize - self.pad as isize;
                        let x = (ox * self.stride + kx) as isize - self.pad as isize;
                        let inside = y >= 0 && x >= 0 && (y as usize) < self.in_h && (x as usize) < self.in_w;
                        for c in 0..self.in_c {
                            idx.push(if inside {
                                ((y as usize * self.in_w + x as usize) * self.in_c + c) as u32
                            } else {
                                Taps::ZERO
                            });
                        }
                    }
                }
            }
        }
        Taps::new(oh * ow, k, idx)
    }
}

/// Max-pool geometry (square window, no padding) over an HWC map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.k) / self.stride + 1
    }

    pub fn valid(&self) -> bool {
        self.k >= 1 && self.stride >= 1 && self.in_h >= self.k && self.in_w >= self.k
    }

    /// One window per output element (HWC order), elements row-major.
    pub fn windows(&self) -> Taps {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut idx = Vec::with_capacity(oh * ow * self.c * self.k * self.k);
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..self.c {
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let (y, x) = (oy * self.stride + ky, ox * self.stride + kx);
                            idx.push(((y * self.in_w + x) * self.c + c) as u32);
                        }
                    }
                }
            }
        }
        Taps::new(oh * ow * self.c, self.k * self.k, idx)
    }
}

/// Serializable gather table (padding is `-1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TapsRepr {
    positions: usize,
    k: usize,
    idx: Vec<i64>,
}

mod taps_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Arc<Taps>, s: S) -> Result<S::Ok, S::Error> {
        let idx = t
            .idx
            .iter()
            .map(|&i| if i == Taps::ZERO { -1 } else { i as i64 })
            .collect();
        TapsRepr {
            positions: t.positions,
            k: t.k,
            idx,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Arc<Taps>, D::Error> {
        let r = TapsRepr::deserialize(d)?;
        if r.idx.len() != r.positions * r.k {
            return Err(serde::de::Error::custom("taps length does not match positions * k"));
        }
        let mut idx = Vec::with_capacity(r.idx.len());
        for i in r.idx {
            if i == -1 {
                idx.push(Taps::ZERO);
            } else if (0..u32::MAX as i64).contains(&i) {
                idx.push(i as u32);
            } else {
                return Err(serde::de::Error::custom("tap index out of range"));
            }
        }
        Ok(Arc::new(Taps::new(r.positions, r.k, idx)))
    }
}

/// A hardware core-op: shared weights applied at every gather position,
/// `y[p, r] = clamp(round(ReLU(Σ_i W[r, i] · x[taps[p, i]])), 0, 2^B − 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreOp {
    #[serde(with = "taps_serde")]
    pub taps: Arc<Taps>,
    /// `[rows, k]`, every value a member of `codebook`.
    pub weight: Tensor,
    pub codebook: Codebook,
}

impl CoreOp {
    pub fn rows(&self) -> usize {
        self.weight.rows()
    }

    /// Connected input ports (padding taps excluded) of one position.
    pub fn fan_in(&self) -> usize {
        (0..self.taps.positions)
            .map(|p| {
                self.taps.idx[p * self.taps.k..(p + 1) * self.taps.k]
                    .iter()
                    .filter(|&&i| i != Taps::ZERO)
                    .count()
            })
            .max()
            .unwrap_or(0)
    }

    /// Logical core-ops in this shared-weight group.
    pub fn logical_count(&self) -> usize {
        self.taps.positions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpKind {
    // Source operations.
    Input {
        shape: Vec<usize>,
    },
    Dense {
        /// `[out, in]`.
        weight: Tensor,
    },
    Conv2d {
        geom: ConvGeom,
        /// `[out_c, k_h · k_w · in_c]`.
        weight: Tensor,
    },
    BiasAdd {
        bias: Tensor,
    },
    Relu,
    MaxPool {
        geom: PoolGeom,
    },
    Elementwise {
        f: ScalarFn,
    },
    // Core-op-like operations.
    DotLike {
        weight: Tensor,
        bias: Tensor,
        relu: bool,
    },
    ConvLike {
        geom: ConvGeom,
        weight: Tensor,
        bias: Tensor,
        relu: bool,
    },
    /// Shared-weight product over an arbitrary gather table. Output is
    /// position-major; `channels` gives the channel count of that layout.
    LocalLike {
        #[serde(with = "taps_serde")]
        taps: Arc<Taps>,
        weight: Tensor,
        bias: Tensor,
        relu: bool,
        channels: usize,
    },
    // Core-op graph.
    /// Host-side encoder: `X = clamp(round((2^B − 1)(x − lo)/(hi − lo)))`.
    Ingress {
        width: usize,
        lo: f64,
        hi: f64,
        bits: u32,
    },
    /// Constant I/O words (bias lines).
    Const {
        values: Vec<u32>,
    },
    CoreOp(CoreOp),
    /// Host-side decoder: `y = weight · X + offset`.
    Egress {
        weight: Tensor,
        offset: Tensor,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input { .. } => "input",
            OpKind::Dense { .. } => "dense",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::BiasAdd { .. } => "bias_add",
            OpKind::Relu => "relu",
            OpKind::MaxPool { .. } => "max_pool",
            OpKind::Elementwise { .. } => "elementwise",
            OpKind::DotLike { .. } => "dot_like",
            OpKind::ConvLike { .. } => "conv_like",
            OpKind::LocalLike { .. } => "local_like",
            OpKind::Ingress { .. } => "ingress",
            OpKind::Const { .. } => "const",
            OpKind::CoreOp(_) => "core_op",
            OpKind::Egress { .. } => "egress",
        }
    }

    pub fn allowed_in(&self, stage: Stage) -> bool {
        match self {
            OpKind::Input { .. } => stage != Stage::CoreOps,
            OpKind::Dense { .. }
            | OpKind::Conv2d { .. }
            | OpKind::BiasAdd { .. }
            | OpKind::Relu
            | OpKind::MaxPool { .. }
            | OpKind::Elementwise { .. } => stage == Stage::Source,
            // Weighted sums are ordinary operations too, so rewrites can run in stages.
            OpKind::DotLike { .. } | OpKind::ConvLike { .. } | OpKind::LocalLike { .. } => {
                stage != Stage::CoreOps
            }
            OpKind::Ingress { .. } | OpKind::Const { .. } | OpKind::CoreOp(_) | OpKind::Egress { .. } => {
                stage == Stage::CoreOps
            }
        }
    }

    pub fn is_source_input(&self) -> bool {
        matches!(self, OpKind::Input { .. } | OpKind::Ingress { .. })
    }

    /// Weighted-sum view of a core-op-like vertex: gather table, `[out, k]`
    /// weights, bias, ReLU flag, output channel count.
    pub fn as_local(&self) -> Option<LocalView<'_>> {
        match self {
            OpKind::DotLike { weight, bias, relu } => Some(LocalView {
                taps: Arc::new(Taps::new(1, weight.cols(), (0..weight.cols() as u32).collect())),
                weight,
                bias,
                relu: *relu,
                channels: weight.rows(),
            }),
            OpKind::ConvLike {
                geom,
                weight,
                bias,
                relu,
            } => Some(LocalView {
                taps: Arc::new(geom.taps()),
                weight,
                bias,
                relu: *relu,
                channels: geom.out_c,
            }),
            OpKind::LocalLike {
                taps,
                weight,
                bias,
                relu,
                channels,
            } => Some(LocalView {
                taps: taps.clone(),
                weight,
                bias,
                relu: *relu,
                channels: *channels,
            }),
            _ => None,
        }
    }

    /// Parameter tensors by name (used by the manifest writer and the trainer).
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            OpKind::Dense { weight } | OpKind::Conv2d { weight, .. } => vec![("weight", weight)],
            OpKind::BiasAdd { bias } => vec![("bias", bias)],
            OpKind::DotLike { weight, bias, .. }
            | OpKind::ConvLike { weight, bias, .. }
            | OpKind::LocalLike { weight, bias, .. } => vec![("weight", weight), ("bias", bias)],
            OpKind::CoreOp(op) => vec![("weight", &op.weight)],
            OpKind::Egress { weight, offset } => vec![("weight", weight), ("offset", offset)],
            _ => Vec::new(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            OpKind::Dense { weight } | OpKind::Conv2d { weight, .. } => vec![("weight", weight)],
            OpKind::BiasAdd { bias } => vec![("bias", bias)],
            OpKind::DotLike { weight, bias, .. }
            | OpKind::ConvLike { weight, bias, .. }
            | OpKind::LocalLike { weight, bias, .. } => vec![("weight", weight), ("bias", bias)],
            OpKind::CoreOp(op) => vec![("weight", &mut op.weight)],
            OpKind::Egress { weight, offset } => vec![("weight", weight), ("offset", offset)],
            _ => Vec::new(),
        }
    }
}

/// Borrowed weighted-sum description (see [`OpKind::as_local`]).
#[derive(Debug, Clone)]
pub struct LocalView<'a> {
    pub taps: Arc<Taps>,
    pub weight: &'a Tensor,
    pub bias: &'a Tensor,
    pub relu: bool,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: usize,
    pub kind: OpKind,
    /// Producers in port order.
    pub inputs: Vec<usize>,
    /// Source-graph vertex whose output this vertex reproduces, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub producer: usize,
    pub consumer: usize,
    pub port: usize,
}

/// Output layout of a vertex: `positions × channels` words or values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub positions: usize,
    pub channels: usize,
}

impl Layout {
    pub fn width(&self) -> usize {
        self.positions * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompGraph {
    pub stage: Stage,
    pub vertices: Vec<Vertex>,
    pub outputs: Vec<usize>,
}

impl CompGraph {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            vertices: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertex(&self, id: usize) -> &Vertex {
        &self.vertices[id]
    }

    /// Appends a vertex consuming earlier vertices; returns its id.
    pub fn add(&mut self, kind: OpKind, inputs: &[usize]) -> Result<usize, GraphError> {
        self.add_with_origin(kind, inputs, None)
    }

    pub fn add_with_origin(
        &mut self,
        kind: OpKind,
        inputs: &[usize],
        origin: Option<usize>,
    ) -> Result<usize, GraphError> {
        let id = self.vertices.len();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(GraphError::BadInput { vertex: id, input: bad });
        }
        if !kind.allowed_in(self.stage) {
            return Err(GraphError::Stage {
                vertex: id,
                kind: kind.name(),
                stage: self.stage,
            });
        }
        self.vertices.push(Vertex {
            id,
            kind,
            inputs: inputs.to_vec(),
            origin,
        });
        if let Err(e) = self.infer_layouts_upto(id + 1) {
            self.vertices.pop();
            return Err(e);
        }
        Ok(id)
    }

    /// Adds an extra input port `producer → consumer`, refusing cycles.
    pub fn add_edge(&mut self, producer: usize, consumer: usize) -> Result<(), GraphError> {
        let n = self.vertices.len();
        if producer >= n || consumer >= n {
            return Err(GraphError::Unknown(producer.max(consumer)));
        }
        let mut edges: Vec<(usize, usize)> = self.edges().iter().map(|e| (e.producer, e.consumer)).collect();
        edges.push((producer, consumer));
        topological_order_edges(n, &edges)?;
        self.vertices[consumer].inputs.push(producer);
        Ok(())
    }

    pub fn set_outputs(&mut self, outputs: &[usize]) -> Result<(), GraphError> {
        if let Some(&bad) = outputs.iter().find(|&&o| o >= self.vertices.len()) {
            return Err(GraphError::Unknown(bad));
        }
        self.outputs = outputs.to_vec();
        Ok(())
    }

    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for v in &self.vertices {
            for (port, &p) in v.inputs.iter().enumerate() {
                out.push(Edge {
                    producer: p,
                    consumer: v.id,
                    port,
                });
            }
        }
        out
    }

    /// Consumers of each vertex, ascending.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.vertices.len()];
        for v in &self.vertices {
            for &p in &v.inputs {
                if !out[p].contains(&v.id) {
                    out[p].push(v.id);
                }
            }
        }
        out
    }

    pub fn inputs(&self) -> Vec<usize> {
        self.vertices
            .iter()
            .filter(|v| v.kind.is_source_input())
            .map(|v| v.id)
            .collect()
    }

    /// Producer-before-consumer order, ties broken by ascending id.
    pub fn topological_order(&self) -> Result<Vec<usize>, GraphError> {
        let edges: Vec<(usize, usize)> = self.edges().iter().map(|e| (e.producer, e.consumer)).collect();
        topological_order_edges(self.vertices.len(), &edges)
    }

    /// Output layout of every vertex, checking input widths and stage membership.
    pub fn layouts(&self) -> Result<Vec<Layout>, GraphError> {
        self.topological_order()?;
        for v in &self.vertices {
            if let Some(&bad) = v.inputs.iter().find(|&&i| i >= self.vertices.len() || i == v.id) {
                return Err(GraphError::BadInput { vertex: v.id, input: bad });
            }
            if !v.kind.allowed_in(self.stage) {
                return Err(GraphError::Stage {
                    vertex: v.id,
                    kind: v.kind.name(),
                    stage: self.stage,
                });
            }
        }
        let order = self.topological_order()?;
        let mut out: Vec<Option<Layout>> = vec![None; self.vertices.len()];
        for id in order {
            let l = self.layout_of(id, &|i| out[i].expect("producer before consumer"))?;
            out[id] = Some(l);
        }
        Ok(out.into_iter().map(|l| l.expect("all visited")).collect())
    }

    fn infer_layouts_upto(&self, n: usize) -> Result<Vec<Layout>, GraphError> {
        let mut out: Vec<Layout> = Vec::with_capacity(n);
        for id in 0..n {
            let l = self.layout_of(id, &|i| out[i])?;
            out.push(l);
        }
        Ok(out)
    }

    /// Layout of vertex `id` given its producers' layouts.
    fn layout_of(&self, id: usize, producer: &dyn Fn(usize) -> Layout) -> Result<Layout, GraphError> {
        let v = &self.vertices[id];
        let in_width: usize = v.inputs.iter().map(|&i| producer(i).width()).sum();
        let single = v.inputs.first().map(|&i| producer(i));
        let err = |detail: String| GraphError::Shape { vertex: id, detail };
        let need_inputs = |n: usize| -> Result<(), GraphError> {
            if v.inputs.len() != n {
                Err(GraphError::Shape {
                    vertex: id,
                    detail: alloc::format!("expects {n} input(s), has {}", v.inputs.len()),
                })
            } else {
                Ok(())
            }
        };
        let flat = |w: usize| Layout {
            positions: 1,
            channels: w,
        };
        Ok(match &v.kind {
            OpKind::Input { shape } => {
                need_inputs(0)?;
                if shape.is_empty() || shape.iter().any(|&d| d == 0) {
                    return Err(err(alloc::format!("bad input shape {shape:?}")));
                }
                if shape.len() == 3 {
                    Layout {
                        positions: shape[0] * shape[1],
                        channels: shape[2],
                    }
                } else {
                    flat(shape.iter().product())
                }
            }
            OpKind::Dense { weight } => {
                need_inputs(1)?;
                if weight.shape().len() != 2 || weight.cols() != in_width {
                    return Err(err(alloc::format!(
                        "dense weight {:?} vs input width {in_width}",
                        weight.shape()
                    )));
                }
                flat(weight.rows())
            }
            OpKind::Conv2d { geom, weight } => {
                need_inputs(1)?;
                check_conv(geom, weight, in_width).map_err(err)?;
                Layout {
                    positions: geom.positions(),
                    channels: geom.out_c,
                }
            }
            OpKind::BiasAdd { bias } => {
                need_inputs(1)?;
                let l = single.expect("one input");
                if bias.len() != l.channels && bias.len() != l.width() {
                    return Err(err(alloc::format!(
                        "bias length {} vs {} channels",
                        bias.len(),
                        l.channels
                    )));
                }
                l
            }
            OpKind::Relu | OpKind::Elementwise { .. } => {
                need_inputs(1)?;
                single.expect("one input")
            }
            OpKind::MaxPool { geom } => {
                need_inputs(1)?;
                if !geom.valid() || geom.in_h * geom.in_w * geom.c != in_width {
                    return Err(err(alloc::format!("pool geometry {geom:?} vs input width {in_width}")));
                }
                Layout {
                    positions: geom.out_h() * geom.out_w(),
                    channels: geom.c,
                }
            }
            OpKind::DotLike { .. } | OpKind::ConvLike { .. } | OpKind::LocalLike { .. } => {
                if v.inputs.is_empty() {
                    return Err(err("weighted sum without input".into()));
                }
                if let OpKind::ConvLike { geom, weight, .. } = &v.kind {
                    check_conv(geom, weight, in_width).map_err(err)?;
                }
                let lv = v.kind.as_local().expect("weighted sum");
                check_local(&lv.taps, lv.weight, in_width).map_err(err)?;
                if lv.bias.len() != lv.weight.rows() {
                    return Err(err(alloc::format!(
                        "bias length {} vs {} rows",
                        lv.bias.len(),
                        lv.weight.rows()
                    )));
                }
                let width = lv.taps.positions * lv.weight.rows();
                if lv.channels == 0 || width % lv.channels != 0 {
                    return Err(err(alloc::format!("{} channels do not tile width {width}", lv.channels)));
                }
                Layout {
                    positions: width / lv.channels,
                    channels: lv.channels,
                }
            }
            OpKind::Ingress { width, lo, hi, bits } => {
                need_inputs(0)?;
                if !(hi > lo) || *bits == 0 || *bits > 32 {
                    return Err(err(alloc::format!("ingress range [{lo}, {hi}] with {bits} bits")));
                }
                flat(*width)
            }
            OpKind::Const { values } => {
                need_inputs(0)?;
                flat(values.len())
            }
            OpKind::CoreOp(op) => {
                if v.inputs.is_empty() {
                    return Err(err("core-op without input".into()));
                }
                check_local(&op.taps, &op.weight, in_width).map_err(err)?;
                flat(op.taps.positions * op.rows())
            }
            OpKind::Egress { weight, offset } => {
                if weight.shape().len() != 2 || weight.cols() != in_width || offset.len() != weight.rows() {
                    return Err(err(alloc::format!(
                        "egress weight {:?} / offset {} vs input width {in_width}",
                        weight.shape(),
                        offset.len()
                    )));
                }
                flat(weight.rows())
            }
        })
    }

    /// Output width per sample of every vertex.
    pub fn widths(&self) -> Result<Vec<usize>, GraphError> {
        Ok(self.layouts()?.iter().map(Layout::width).collect())
    }

    /// Checks stage membership, shapes and acyclicity.
    pub fn validate(&self) -> Result<(), GraphError> {
        self.layouts().map(|_| ())
    }

    /// Anchors of a core-op-like graph: every out-edge of a vertex that
    /// reproduces a source vertex (graph inputs included).
    pub fn origin_anchors(&self) -> AnchorSet {
        AnchorSet {
            edges: self
                .edges()
                .into_iter()
                .filter(|e| self.vertices[e.producer].origin.is_some())
                .collect(),
        }
    }

    /// Cuts the graph at `anchors` and returns the connected pieces in
    /// topological order. Graph inputs form the boundary and belong to no part.
    pub fn split_by_anchors(&self, anchors: &AnchorSet) -> Result<Vec<Part>, GraphError> {
        let all = self.edges();
        for a in &anchors.edges {
            if !all.contains(a) {
                return Err(GraphError::UnknownAnchor(*a));
            }
        }
        let order = self.topological_order()?;
        let n = self.vertices.len();
        let is_input: Vec<bool> = self.vertices.iter().map(|v| v.kind.is_source_input()).collect();
        let mut uf = UnionFind::new(n);
        for e in &all {
            if !anchors.edges.contains(e) && !is_input[e.producer] {
                uf.union(e.producer, e.consumer);
            }
        }
        // Component ids in order of first appearance along the topological order.
        let mut comp_of = vec![usize::MAX; n];
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut root_to_comp = vec![usize::MAX; n];
        for &v in &order {
            if is_input[v] {
                continue;
            }
            let r = uf.find(v);
            if root_to_comp[r] == usize::MAX {
                root_to_comp[r] = members.len();
                members.push(Vec::new());
            }
            comp_of[v] = root_to_comp[r];
            members[root_to_comp[r]].push(v);
        }
        let k = members.len();
        let mut q_edges: Vec<(usize, usize)> = Vec::new();
        for e in &all {
            let (a, b) = (comp_of[e.producer], comp_of[e.consumer]);
            if a != usize::MAX && a != b && !q_edges.contains(&(a, b)) {
                q_edges.push((a, b));
            }
        }
        let q_order = topological_order_edges(k, &q_edges).map_err(|_| GraphError::QuotientCycle)?;
        let consumers = self.consumers();
        let mut parts = Vec::with_capacity(k);
        for c in q_order {
            let vs = &members[c];
            let mut inputs: Vec<usize> = Vec::new();
            let mut outputs: Vec<usize> = Vec::new();
            for &v in vs {
                for &p in &self.vertices[v].inputs {
                    if comp_of[p] != c && !inputs.contains(&p) {
                        inputs.push(p);
                    }
                }
                let leaves = consumers[v].iter().any(|&q| comp_of[q] != c);
                if leaves || self.outputs.contains(&v) {
                    outputs.push(v);
                }
            }
            if outputs.is_empty() {
                let stranded = *vs.last().expect("non-empty component");
                return Err(GraphError::Stranded(stranded));
            }
            inputs.sort_unstable();
            let mut vertices = vs.clone();
            vertices.sort_unstable();
            parts.push(Part {
                vertices,
                inputs,
                outputs,
            });
        }
        Ok(parts)
    }

    /// Rebuilds the graph from its inputs plus the vertices of `parts`.
    pub fn reassemble(&self, parts: &[Part]) -> CompGraph {
        let mut ids: Vec<usize> = self.inputs();
        for p in parts {
            ids.extend_from_slice(&p.vertices);
        }
        ids.sort_unstable();
        ids.dedup();
        CompGraph {
            stage: self.stage,
            vertices: ids.iter().map(|&i| self.vertices[i].clone()).collect(),
            outputs: self.outputs.clone(),
        }
    }
}

fn check_conv(geom: &ConvGeom, weight: &Tensor, in_width: usize) -> Result<(), String> {
    if !geom.valid() || geom.in_h * geom.in_w * geom.in_c != in_width {
        return Err(alloc::format!("conv geometry {geom:?} vs input width {in_width}"));
    }
    if weight.shape() != [geom.out_c, geom.kernel_len()] {
        return Err(alloc::format!(
            "conv weight {:?}, expected [{}, {}]",
            weight.shape(),
            geom.out_c,
            geom.kernel_len()
        ));
    }
    Ok(())
}

fn check_local(taps: &Taps, weight: &Tensor, in_width: usize) -> Result<(), String> {
    if weight.shape().len() != 2 || weight.cols() != taps.k {
        return Err(alloc::format!("weight {:?} vs {} taps", weight.shape(), taps.k));
    }
    if taps.min_width() > in_width {
        return Err(alloc::format!(
            "taps reach word {} of a {in_width}-wide input",
            taps.min_width() - 1
        ));
    }
    Ok(())
}

/// Kahn's algorithm over `n` nodes with smallest-id-first tie breaking.
pub fn topological_order_edges(n: usize, edges: &[(usize, usize)]) -> Result<Vec<usize>, GraphError> {
    let mut indeg = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(GraphError::Unknown(a.max(b)));
        }
        indeg[b] += 1;
        succ[a].push(b);
    }
    let mut heap: BinaryHeap<Reverse<usize>> = (0..n).filter(|&v| indeg[v] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = heap.pop() {
        order.push(v);
        for &s in &succ[v] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                heap.push(Reverse(s));
            }
        }
    }
    if order.len() < n {
        let &(from, to) = edges
            .iter()
            .find(|&&(a, b)| indeg[a] > 0 && indeg[b] > 0)
            .expect("a remaining edge closes the cycle");
        return Err(GraphError::Cycle { from, to });
    }
    Ok(order)
}

/// Supervision edges of a core-op-like graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub edges: Vec<Edge>,
}

/// A connected piece of a graph between anchors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Part {
    /// Member vertices, ascending (which is also topological).
    pub vertices: Vec<usize>,
    /// Producers outside the part feeding it.
    pub inputs: Vec<usize>,
    /// Members whose output leaves the part or is a graph output.
    pub outputs: Vec<usize>,
}

/// Concatenates consecutive runs of `g` parts (the last run may be shorter).
pub fn group_parts(graph: &CompGraph, parts: &[Part], g: usize) -> Vec<Part> {
    let g = g.max(1);
    let consumers = graph.consumers();
    parts
        .chunks(g)
        .map(|chunk| {
            let mut vertices: Vec<usize> = chunk.iter().flat_map(|p| p.vertices.iter().copied()).collect();
            vertices.sort_unstable();
            let inside = |v: usize| vertices.binary_search(&v).is_ok();
            let mut inputs: Vec<usize> = chunk
                .iter()
                .flat_map(|p| p.inputs.iter().copied())
                .filter(|&i| !inside(i))
                .collect();
            inputs.sort_unstable();
            inputs.dedup();
            let outputs: Vec<usize> = chunk
                .iter()
                .flat_map(|p| p.outputs.iter().copied())
                .filter(|&o| graph.outputs.contains(&o) || consumers[o].iter().any(|&c| !inside(c)))
                .collect();
            Part {
                vertices,
                inputs,
                outputs,
            }
        })
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(out: usize, inp: usize, relu: bool) -> OpKind {
        OpKind::DotLike {
            weight: Tensor::zeros(&[out, inp]),
            bias: Tensor::zeros(&[out]),
            relu,
        }
    }

    fn mlp3() -> CompGraph {
        let mut g = CompGraph::new(Stage::CoreLike);
        let x = g.add_with_origin(OpKind::Input { shape: vec![4] }, &[], Some(0)).unwrap();
        let a = g.add_with_origin(dot(3, 4, true), &[x], Some(3)).unwrap();
        let b = g.add_with_origin(dot(3, 3, true), &[a], Some(6)).unwrap();
        let c = g.add_with_origin(dot(2, 3, false), &[b], Some(8)).unwrap();
        g.set_outputs(&[c]).unwrap();
        g
    }

    #[test]
    fn chain_order() {
        assert_eq!(topological_order_edges(3, &[(0, 1), (1, 2)]).unwrap(), [0, 1, 2]);
    }

    #[test]
    fn diamond_tie_break() {
        let e = [(0, 2), (0, 1), (1, 3), (2, 3)];
        assert_eq!(topological_order_edges(4, &e).unwrap(), [0, 1, 2, 3]);
    }

    #[test]
    fn cycle_is_reported() {
        let e = [(0, 1), (0, 2), (1, 3), (2, 3), (3, 0)];
        assert!(matches!(
            topological_order_edges(4, &e),
            Err(GraphError::Cycle { .. })
        ));
    }

    #[test]
    fn add_edge_refuses_cycle() {
        let mut g = mlp3();
        assert!(matches!(g.add_edge(3, 1), Err(GraphError::Cycle { .. })));
        assert_eq!(g, mlp3());
    }

    #[test]
    fn mlp_splits_into_layers() {
        let g = mlp3();
        let parts = g.split_by_anchors(&g.origin_anchors()).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0].vertices, [1]);
        assert_eq!(parts[0].inputs, [0]);
        assert_eq!(parts[2].outputs, [3]);
        assert_eq!(g.reassemble(&parts), g);
    }

    #[test]
    fn no_anchors_single_part() {
        let g = mlp3();
        let parts = g.split_by_anchors(&AnchorSet::default()).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].vertices, [1, 2, 3]);
    }

    #[test]
    fn grouping_pairs() {
        let mut g = CompGraph::new(Stage::CoreLike);
        let mut prev = g.add_with_origin(OpKind::Input { shape: vec![2] }, &[], Some(0)).unwrap();
        for i in 0..4 {
            prev = g.add_with_origin(dot(2, 2, true), &[prev], Some(i + 1)).unwrap();
        }
        g.set_outputs(&[prev]).unwrap();
        let parts = g.split_by_anchors(&g.origin_anchors()).unwrap();
        assert_eq!(parts.len(), 4);
        let grouped = group_parts(&g, &parts, 2);
        assert_eq!(grouped.len(), 2);
        assert_eq!(grouped[0].vertices, [1, 2]);
        assert_eq!(grouped[0].outputs, [2]);
        assert_eq!(grouped[1].inputs, [2]);
    }

    #[test]
    fn stranded_vertex() {
        let mut g = CompGraph::new(Stage::CoreLike);
        let x = g.add_with_origin(OpKind::Input { shape: vec![2] }, &[], Some(0)).unwrap();
        let a = g.add_with_origin(dot(2, 2, true), &[x], Some(1)).unwrap();
        let _dead = g.add(dot(2, 2, true), &[x]).unwrap();
        g.set_outputs(&[a]).unwrap();
        assert!(matches!(
            g.split_by_anchors(&g.origin_anchors()),
            Err(GraphError::Stranded(2))
        ));
    }

    #[test]
    fn stage_is_enforced() {
        let mut g = CompGraph::new(Stage::CoreOps);
        assert!(matches!(g.add(OpKind::Relu, &[]), Err(GraphError::Stage { .. })));
        let mut g = CompGraph::new(Stage::CoreLike);
        let x = g.add(OpKind::Input { shape: vec![2] }, &[]).unwrap();
        assert!(matches!(g.add(OpKind::Relu, &[x]), Err(GraphError::Stage { .. })));
    }

    #[test]
    fn shape_errors_name_vertex() {
        let mut g = CompGraph::new(Stage::Source);
        let x = g.add(OpKind::Input { shape: vec![3] }, &[]).unwrap();
        let err = g
            .add(
                OpKind::Dense {
                    weight: Tensor::zeros(&[2, 4]),
                },
                &[x],
            )
            .unwrap_err();
        assert!(matches!(err, GraphError::Shape { vertex: 1, .. }));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn conv_taps_hwc() {
        let geom = ConvGeom {
            in_h: 3,
            in_w: 3,
            in_c: 2,
            k_h: 2,
            k_w: 2,
            stride: 1,
            pad: 0,
            out_c: 1,
        };
        let t = geom.taps();
        assert_eq!((t.positions, t.k), (4, 8));
        assert_eq!(&t.idx[..8], &[0, 1, 2, 3, 6, 7, 8, 9]);
    }

    #[test]
    fn pool_windows_row_major() {
        let geom = PoolGeom {
            in_h: 2,
            in_w: 2,
            c: 1,
            k: 2,
            stride: 2,
        };
        assert_eq!(geom.windows().idx, [0, 1, 2, 3]);
    }
}
