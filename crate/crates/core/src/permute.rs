//! Co-permutation of coupled structures.
//!
//! Both sides of each basic structure are reordered with the same index
//! permutation — producer output axis and consumer input axis — which only
//! reorders the intermediate activation and leaves the block's outputs
//! unchanged. Selected heads/channels land in a leading contiguous range
//! (selected ascending, then unselected ascending), which is what lets the
//! trainer compute dense-slice gradients. Permutations are materialized
//! physically; residual structures are never permuted.

use serde::{Deserialize, Serialize};

use crate::depgraph::{CoupledStructure, StructureKind};
use crate::error::{Error, Result};
use crate::linalg::{Axis, IndexPermutation, Matrix};
use crate::model::{
    forward_model, BlockWeight, TrainableRegion, TransformerModel, WeightId,
};
use crate::select::{SelectionMask, TrainableScope};

/// Per-block permutations plus the contiguous trainable ranges they create.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub scope: TrainableScope,
    pub blocks: Vec<BlockPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub block: usize,
    /// Permutation of head slots (length h).
    pub head_perm: IndexPermutation,
    /// Permutation of FFN inner channels (length k).
    pub channel_perm: IndexPermutation,
    pub n_heads_selected: usize,
    pub n_channels_selected: usize,
    pub trainable_ranges: Vec<TrainableRegion>,
}

/// Selected indices first (ascending), then the rest (ascending).
pub fn selected_first(selected: &[usize], n: usize) -> Result<IndexPermutation> {
    let mut sel = selected.to_vec();
    sel.sort_unstable();
    sel.dedup();
    if sel.len() != selected.len() {
        return Err(Error::Argument("duplicate indices in selection".into()));
    }
    if sel.iter().any(|&i| i >= n) {
        return Err(Error::Argument(format!("selection index out of range 0..{n}")));
    }
    let mut order = sel.clone();
    order.extend((0..n).filter(|i| sel.binary_search(i).is_err()));
    IndexPermutation::from_order(order)
}

/// Build the plan for one block from its mask and discovered structures.
/// Residual structures are ignored; MHA permutations move whole head slots.
pub fn plan_permutation(
    block_index: usize,
    mask: &SelectionMask,
    structures: &[CoupledStructure],
    scope: TrainableScope,
) -> Result<BlockPlan> {
    let mha = structures
        .iter()
        .find(|s| s.kind == StructureKind::MhaBasic)
        .ok_or_else(|| Error::Argument("no MHA structure for block".into()))?;
    let ffn = structures
        .iter()
        .find(|s| s.kind == StructureKind::FfnBasic)
        .ok_or_else(|| Error::Argument("no FFN structure for block".into()))?;
    let head_perm = selected_first(&mask.mha_heads, mha.slots)?;
    let channel_perm = selected_first(&mask.ffn_channels, ffn.slots)?;
    let d_h = mha.slot_width;
    let m = mask.mha_heads.len();
    let f = mask.ffn_channels.len();
    let w = |kind: BlockWeight| WeightId::Block { block: block_index, kind };

    let mut ranges = Vec::new();
    if m > 0 {
        ranges.push(TrainableRegion::new(w(BlockWeight::Wo), Axis::Cols, 0, m * d_h));
        if scope == TrainableScope::AllCoupled {
            for kind in [BlockWeight::Wq, BlockWeight::Wk, BlockWeight::Wv] {
                ranges.push(TrainableRegion::new(w(kind), Axis::Rows, 0, m * d_h));
            }
        }
    }
    if f > 0 {
        ranges.push(TrainableRegion::new(w(BlockWeight::Wdown), Axis::Cols, 0, f));
        if scope == TrainableScope::AllCoupled {
            for kind in [BlockWeight::Wup, BlockWeight::Wgate] {
                ranges.push(TrainableRegion::new(w(kind), Axis::Rows, 0, f));
            }
        }
    }
    Ok(BlockPlan {
        block: block_index,
        head_perm,
        channel_perm,
        n_heads_selected: m,
        n_channels_selected: f,
        trainable_ranges: ranges,
    })
}

/// Plan every block of a stack from its per-block masks.
pub fn plan_stack(
    model: &TransformerModel,
    masks: &[SelectionMask],
    scope: TrainableScope,
) -> Result<PermutationPlan> {
    if masks.len() != model.blocks.len() {
        return Err(Error::Argument(format!(
            "{} masks for {} blocks",
            masks.len(),
            model.blocks.len()
        )));
    }
    let graph = crate::depgraph::build_graph_block(model);
    let structures = crate::depgraph::discover_coupled(&graph);
    let mut blocks = Vec::with_capacity(masks.len());
    for (b, mask) in masks.iter().enumerate() {
        let prefix = format!("block{b}.");
        let block_structs: Vec<CoupledStructure> = structures
            .iter()
            .filter(|s| s.activation.starts_with(&prefix))
            .cloned()
            .collect();
        blocks.push(plan_permutation(b, mask, &block_structs, scope)?);
    }
    Ok(PermutationPlan { scope, blocks })
}

/// All trainable regions of the plan, in block order.
pub fn plan_regions(plan: &PermutationPlan) -> Vec<TrainableRegion> {
    plan.blocks.iter().flat_map(|b| b.trainable_ranges.iter().copied()).collect()
}

/// Apply the plan, returning a new model. Output-axis head blocks of Q/K/V
/// and input-axis head blocks of O move together; rows of Up/Gate and columns
/// of Down move together.
pub fn apply_permutation(
    model: &TransformerModel,
    plan: &PermutationPlan,
) -> Result<TransformerModel> {
    if plan.blocks.len() != model.blocks.len() {
        return Err(Error::Shape(format!(
            "plan covers {} blocks, model has {}",
            plan.blocks.len(),
            model.blocks.len()
        )));
    }
    let mut out = model.clone();
    for bp in &plan.blocks {
        let spec = out
            .blocks
            .get_mut(bp.block)
            .ok_or_else(|| Error::Shape(format!("plan block {} out of range", bp.block)))?;
        if bp.head_perm.len() != spec.h || bp.channel_perm.len() != spec.k_inner {
            return Err(Error::Shape(format!(
                "plan for block {} sized (h={}, k={}), model has (h={}, k={})",
                bp.block,
                bp.head_perm.len(),
                bp.channel_perm.len(),
                spec.h,
                spec.k_inner
            )));
        }
        let scalar = bp.head_perm.expand_blocks(spec.d_h());
        spec.wq = spec.wq.permute_axis(&scalar, Axis::Rows)?;
        spec.wk = spec.wk.permute_axis(&scalar, Axis::Rows)?;
        spec.wv = spec.wv.permute_axis(&scalar, Axis::Rows)?;
        spec.wo = spec.wo.permute_axis(&scalar, Axis::Cols)?;
        spec.wup = spec.wup.permute_axis(&bp.channel_perm, Axis::Rows)?;
        spec.wgate = spec.wgate.permute_axis(&bp.channel_perm, Axis::Rows)?;
        spec.wdown = spec.wdown.permute_axis(&bp.channel_perm, Axis::Cols)?;
    }
    Ok(out)
}

/// Plan whose permutations undo this plan (trainable ranges are dropped; the
/// inverse is only used to restore original index order).
pub fn inverse_plan(plan: &PermutationPlan) -> PermutationPlan {
    PermutationPlan {
        scope: plan.scope,
        blocks: plan
            .blocks
            .iter()
            .map(|b| BlockPlan {
                block: b.block,
                head_perm: b.head_perm.inverted(),
                channel_perm: b.channel_perm.inverted(),
                n_heads_selected: 0,
                n_channels_selected: 0,
                trainable_ranges: Vec::new(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InvarianceReport {
    pub max_abs_diff: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Evaluate both models on `x` and compare outputs element-wise.
pub fn verify_output_invariance(
    original: &TransformerModel,
    permuted: &TransformerModel,
    x: &Matrix,
    tol: f64,
) -> Result<InvarianceReport> {
    let (a, _) = forward_model(original, x)?;
    let (b, _) = forward_model(permuted, x)?;
    let max_abs_diff = a.max_abs_diff(&b);
    Ok(InvarianceReport { max_abs_diff, tol, pass: max_abs_diff <= tol })
}

/// Plan file persisted next to the mask; needed later to map adapters back
/// to original index space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema_version: u32,
    pub plan: PermutationPlan,
}

pub fn plan_to_json(plan: &PermutationPlan) -> Result<String> {
    serde_json::to_string_pretty(&PlanFile { schema_version: 1, plan: plan.clone() })
        .map_err(Error::from)
}

pub fn plan_from_json(json: &str) -> Result<PermutationPlan> {
    let file: PlanFile = serde_json::from_str(json)?;
    Ok(file.plan)
}
