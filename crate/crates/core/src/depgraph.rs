//! Weight–activation dependency graph and coupled-structure discovery.
//!
//! An activation `A` depends on a weight `W1` when `W1 ∈ In(A)` and `W1` has
//! out-degree 1; a weight `W2` depends on `A` when `W2 ∈ Out(A)` and `W2` has
//! in-degree 1. When both directions hold, `(In(A), Out(A))` form a coupled
//! structure whose shared axis (producer output axis, consumer input axis)
//! can be co-permuted without changing the model's outputs.
//!
//! MHA structures are tracked at head granularity (h slots of width d_h);
//! FFN structures per channel. Residual structures are discovered and
//! reported but never permuted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Axis;
use crate::model::{BlockWeight, DeepLinearNet, TransformerModel, WeightId};

/// One activation node with its producing and consuming weight sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActivationNode {
    pub id: String,
    /// In(A): weights that directly produce this activation.
    pub in_set: Vec<WeightId>,
    /// Out(A): weights that consume this activation downstream.
    pub out_set: Vec<WeightId>,
    /// Permutable slots along the shared axis (h for MHA, k for FFN).
    pub slots: usize,
    /// Scalar width of one slot (d_h for MHA, 1 otherwise).
    pub slot_width: usize,
    /// Whether the activation participates in a skip connection.
    pub in_skip: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub weights: Vec<WeightId>,
    pub activations: Vec<ActivationNode>,
}

impl DependencyGraph {
    /// Out-degree of a weight: number of activations it produces.
    pub fn out_degree(&self, w: WeightId) -> usize {
        self.activations.iter().filter(|a| a.in_set.contains(&w)).count()
    }

    /// In-degree of a weight: number of activations it consumes.
    pub fn in_degree(&self, w: WeightId) -> usize {
        self.activations.iter().filter(|a| a.out_set.contains(&w)).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StructureKind {
    /// Q/K/V → O over the head axis.
    MhaBasic,
    /// Up/Gate → Down over the FFN inner axis.
    FfnBasic,
    /// Consecutive layers of a deep linear chain.
    LinearBasic,
    /// Shared activation sits on a residual stream; reported, not permuted.
    Residual,
}

/// A (W1, W2) pair coupled through one activation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoupledStructure {
    pub kind: StructureKind,
    pub activation: String,
    /// W1 side; the co-permuted axis is their output axis.
    pub producers: Vec<WeightId>,
    /// W2 side; the co-permuted axis is their input axis.
    pub consumers: Vec<WeightId>,
    pub producer_axis: Axis,
    pub consumer_axis: Axis,
    /// Scalar length of the shared axis (d for MHA, k for FFN).
    pub axis_len: usize,
    /// Permutation granularity: slots × slot_width == axis_len.
    pub slots: usize,
    pub slot_width: usize,
}

/// Graph for a transformer block stack: per block the per-head mixing
/// activation, the FFN inner activation, and the residual streams, plus the
/// streams connecting consecutive blocks.
pub fn build_graph_block(model: &TransformerModel) -> DependencyGraph {
    let mut weights = Vec::new();
    let mut activations = Vec::new();
    let n = model.blocks.len();
    for (b, block) in model.blocks.iter().enumerate() {
        let w = |kind: BlockWeight| WeightId::Block { block: b, kind };
        for kind in crate::model::BLOCK_WEIGHTS {
            weights.push(w(kind));
        }

        // Input stream of this block: produced by the previous block's Down
        // (plus the skip), consumed by Q/K/V.
        if b == 0 {
            activations.push(ActivationNode {
                id: format!("block{b}.input"),
                in_set: vec![],
                out_set: vec![w(BlockWeight::Wq), w(BlockWeight::Wk), w(BlockWeight::Wv)],
                slots: block.d,
                slot_width: 1,
                in_skip: true,
            });
        }
        activations.push(ActivationNode {
            id: format!("block{b}.attn_mixed"),
            in_set: vec![w(BlockWeight::Wq), w(BlockWeight::Wk), w(BlockWeight::Wv)],
            out_set: vec![w(BlockWeight::Wo)],
            slots: block.h,
            slot_width: block.d_h(),
            in_skip: false,
        });
        activations.push(ActivationNode {
            id: format!("block{b}.resid_mid"),
            in_set: vec![w(BlockWeight::Wo)],
            out_set: vec![w(BlockWeight::Wup), w(BlockWeight::Wgate)],
            slots: block.d,
            slot_width: 1,
            in_skip: true,
        });
        activations.push(ActivationNode {
            id: format!("block{b}.ffn_inner"),
            in_set: vec![w(BlockWeight::Wup), w(BlockWeight::Wgate)],
            out_set: vec![w(BlockWeight::Wdown)],
            slots: block.k_inner,
            slot_width: 1,
            in_skip: false,
        });
        // Output stream: consumed by the next block's Q/K/V when stacked.
        let next_out = if b + 1 < n {
            vec![
                WeightId::Block { block: b + 1, kind: BlockWeight::Wq },
                WeightId::Block { block: b + 1, kind: BlockWeight::Wk },
                WeightId::Block { block: b + 1, kind: BlockWeight::Wv },
            ]
        } else {
            vec![]
        };
        activations.push(ActivationNode {
            id: format!("block{b}.resid_out"),
            in_set: vec![w(BlockWeight::Wdown)],
            out_set: next_out,
            slots: block.d,
            slot_width: 1,
            in_skip: true,
        });
    }
    DependencyGraph { weights, activations }
}

/// Graph for a deep linear chain: one activation between each consecutive
/// pair of layers.
pub fn build_graph_chain(net: &DeepLinearNet) -> DependencyGraph {
    let dims = net.dims();
    let weights: Vec<WeightId> =
        (1..=net.depth()).map(|layer| WeightId::Layer { layer }).collect();
    let activations = (1..net.depth())
        .map(|l| ActivationNode {
            id: format!("act{l}"),
            in_set: vec![WeightId::Layer { layer: l }],
            out_set: vec![WeightId::Layer { layer: l + 1 }],
            slots: dims[l],
            slot_width: 1,
            in_skip: false,
        })
        .collect();
    DependencyGraph { weights, activations }
}

/// All (W1, W2) pairs where both directional dependencies hold, in node-id
/// order. Classification follows the activation: attention mixing → MhaBasic,
/// FFN inner → FfnBasic, chain → LinearBasic, skip-connected → Residual.
pub fn discover_coupled(graph: &DependencyGraph) -> Vec<CoupledStructure> {
    let mut found = Vec::new();
    for node in &graph.activations {
        if node.in_set.is_empty() || node.out_set.is_empty() {
            continue;
        }
        let producers_ok = node.in_set.iter().all(|&w| graph.out_degree(w) == 1);
        let consumers_ok = node.out_set.iter().all(|&w| graph.in_degree(w) == 1);
        if !(producers_ok && consumers_ok) {
            continue;
        }
        let kind = if node.in_skip {
            StructureKind::Residual
        } else if node.id.ends_with("attn_mixed") {
            StructureKind::MhaBasic
        } else if node.id.ends_with("ffn_inner") {
            StructureKind::FfnBasic
        } else {
            StructureKind::LinearBasic
        };
        found.push(CoupledStructure {
            kind,
            activation: node.id.clone(),
            producers: node.in_set.clone(),
            consumers: node.out_set.clone(),
            producer_axis: Axis::Rows,
            consumer_axis: Axis::Cols,
            axis_len: node.slots * node.slot_width,
            slots: node.slots,
            slot_width: node.slot_width,
        });
    }
    found.sort_by(|a, b| a.activation.cmp(&b.activation));
    found
}

/// Basic (permutable) structures only.
pub fn basic_structures(structures: &[CoupledStructure]) -> Vec<&CoupledStructure> {
    structures.iter().filter(|s| s.kind != StructureKind::Residual).collect()
}

/// JSON export of nodes, edges and discovered structures.
#[derive(Debug, Serialize)]
pub struct GraphExport {
    pub schema_version: u32,
    pub weights: Vec<String>,
    pub activations: Vec<ActivationNode>,
    pub edges: Vec<GraphEdge>,
    pub structures: Vec<CoupledStructure>,
}

#[derive(Debug, Serialize)]
pub struct GraphEdge {
    pub from: String,
    pub to: String,
}

pub fn export_graph(graph: &DependencyGraph) -> GraphExport {
    let mut edges = Vec::new();
    for node in &graph.activations {
        for w in &node.in_set {
            edges.push(GraphEdge { from: w.to_string(), to: node.id.clone() });
        }
        for w in &node.out_set {
            edges.push(GraphEdge { from: node.id.clone(), to: w.to_string() });
        }
    }
    GraphExport {
        schema_version: 1,
        weights: graph.weights.iter().map(|w| w.to_string()).collect(),
        activations: graph.activations.clone(),
        edges,
        structures: discover_coupled(graph),
    }
}

pub fn export_graph_json(graph: &DependencyGraph) -> Result<String> {
    serde_json::to_string_pretty(&export_graph(graph)).map_err(Error::from)
}
