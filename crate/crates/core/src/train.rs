//! Training engine: forward with partial activation taping, backward passes
//! that produce gradients only for selected dense submatrices, in-place
//! updates, and the LoRA / full-FT / unstructured-sparse baselines.
//!
//! The tape saves, per trainable region, exactly the input slice its weight
//! gradient multiplies (`activation[:, start:end]` for input-axis regions),
//! plus whatever flow context is needed to propagate the output gradient to
//! the regions — nothing for a block whose only region sits on Down, the FFN
//! pre-activations when a gradient must cross the FFN, and per-head attention
//! context only for heads that carry trainable rows or sit downstream of
//! another trainable block.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{Axis, Matrix};
use crate::model::{
    forward_model, silu, silu_prime, BlockWeight, DeepLinearNet,
    TrainableRegion, TransformerBlockSpec, TransformerModel, WeightId, BLOCK_WEIGHTS,
};
use crate::rng::{gaussian_matrix, rng_from_seed, EngineRng};

// ---------------------------------------------------------------------------
// Loss

/// Mean squared error per sample row: `‖pred − target‖_F² / rows`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> f64 {
    let d = pred.max_abs_diff(target); // shape assert
    let _ = d;
    let diff = pred.sub(target).expect("checked shapes");
    diff.frobenius_norm().powi(2) / pred.rows() as f64
}

/// Gradient of [`mse_loss`] with respect to `pred`.
pub fn mse_grad(pred: &Matrix, target: &Matrix) -> Matrix {
    pred.sub(target).expect("checked shapes").scaled(2.0 / pred.rows() as f64)
}

/// Column-sample variant used by the deep linear trainers: samples are
/// columns, loss is `‖pred − target‖_F² / n`.
pub fn mse_loss_cols(pred: &Matrix, target: &Matrix) -> f64 {
    let diff = pred.sub(target).expect("checked shapes");
    diff.frobenius_norm().powi(2) / pred.cols() as f64
}

pub fn mse_grad_cols(pred: &Matrix, target: &Matrix) -> Matrix {
    pred.sub(target).expect("checked shapes").scaled(2.0 / pred.cols() as f64)
}

// ---------------------------------------------------------------------------
// Tape

/// Attention context for one head whose gradient is needed.
#[derive(Debug, Clone)]
pub struct HeadFlow {
    pub head: usize,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Matrix,
}

/// Saved tensors for one block of the stack.
#[derive(Debug, Clone, Default)]
pub struct BlockTape {
    /// Regions of this block, in input order.
    pub regions: Vec<TrainableRegion>,
    /// `head_mix[:, start:end]` for a Wo column region.
    pub wo_input_slice: Option<Matrix>,
    /// `ffn_inner[:, start:end]` for a Wdown column region.
    pub wdown_input_slice: Option<Matrix>,
    /// Block input, required by Q/K/V row regions.
    pub block_input: Option<Matrix>,
    /// Residual-mid stream, required by Up/Gate row regions.
    pub resid_mid: Option<Matrix>,
    /// `(up_pre, gate_pre)` columns `[ffn_flow_start, ffn_flow_end)`.
    pub ffn_flow: Option<(Matrix, Matrix)>,
    pub ffn_flow_start: usize,
    pub ffn_flow_end: usize,
    /// Per-head attention context for heads that need backward.
    pub attn_flow: Vec<HeadFlow>,
    /// Whether this block must emit the gradient of its input.
    pub needs_dx: bool,
}

/// Partial activation tape for one forward pass over a block stack.
#[derive(Debug, Clone)]
pub struct Tape {
    pub tokens: usize,
    pub blocks: Vec<BlockTape>,
}

impl Tape {
    /// Bytes of saved forward activations (8 bytes per f64).
    pub fn bytes(&self) -> u64 {
        let mat = |m: &Option<Matrix>| {
            m.as_ref().map_or(0u64, |m| (m.rows() * m.cols()) as u64 * 8)
        };
        let mut total = 0u64;
        for b in &self.blocks {
            total += mat(&b.wo_input_slice)
                + mat(&b.wdown_input_slice)
                + mat(&b.block_input)
                + mat(&b.resid_mid);
            if let Some((u, g)) = &b.ffn_flow {
                total += ((u.rows() * u.cols() + g.rows() * g.cols()) as u64) * 8;
            }
            for hf in &b.attn_flow {
                total += ((hf.q.rows() * hf.q.cols()
                    + hf.k.rows() * hf.k.cols()
                    + hf.v.rows() * hf.v.cols()
                    + hf.probs.rows() * hf.probs.cols()) as u64)
                    * 8;
            }
        }
        total
    }
}

fn regions_by_block(model: &TransformerModel, regions: &[TrainableRegion]) -> Result<Vec<Vec<TrainableRegion>>> {
    let mut per_block: Vec<Vec<TrainableRegion>> = vec![Vec::new(); model.blocks.len()];
    for r in regions {
        match r.weight {
            WeightId::Block { block, kind: _ } => {
                let w = model.weight(r.weight)?;
                r.validate(w.rows(), w.cols())?;
                per_block[block].push(*r);
            }
            WeightId::Layer { .. } => {
                return Err(Error::Argument(format!(
                    "{} does not belong to a transformer model",
                    r.weight
                )))
            }
        }
    }
    Ok(per_block)
}

fn block_kind_region(regions: &[TrainableRegion], kind: BlockWeight) -> Option<TrainableRegion> {
    regions.iter().find(|r| matches!(r.weight, WeightId::Block { kind: k, .. } if k == kind)).copied()
}

/// Forward pass that records the partial tape for `regions`.
///
/// The output is the same value a plain [`forward_model`] produces; only the
/// set of saved tensors differs.
pub fn forward_with_tape(
    model: &TransformerModel,
    regions: &[TrainableRegion],
    x: &Matrix,
) -> Result<(Matrix, Tape)> {
    let per_block = regions_by_block(model, regions)?;
    let lowest = per_block.iter().position(|r| !r.is_empty());
    let (y, trace) = forward_model(model, x)?;

    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (b, spec) in model.blocks.iter().enumerate() {
        let bt = &trace.blocks[b];
        let own = &per_block[b];
        // Gradient must leave this block iff some earlier block trains.
        let needs_dx = lowest.is_some_and(|l| l < b);
        let mut tape = BlockTape { regions: own.clone(), needs_dx, ..Default::default() };
        if own.is_empty() && !needs_dx {
            blocks.push(tape);
            continue;
        }

        let wo_region = block_kind_region(own, BlockWeight::Wo);
        let wdown_region = block_kind_region(own, BlockWeight::Wdown);
        let q_region = block_kind_region(own, BlockWeight::Wq);
        let k_region = block_kind_region(own, BlockWeight::Wk);
        let v_region = block_kind_region(own, BlockWeight::Wv);
        let up_region = block_kind_region(own, BlockWeight::Wup);
        let gate_region = block_kind_region(own, BlockWeight::Wgate);

        if let Some(r) = wo_region {
            tape.wo_input_slice = Some(bt.head_mix.slice_cols(r.start, r.end));
        }
        if let Some(r) = wdown_region {
            tape.wdown_input_slice = Some(bt.ffn_inner.slice_cols(r.start, r.end));
        }
        if q_region.is_some() || k_region.is_some() || v_region.is_some() {
            tape.block_input = Some(bt.input.clone());
        }
        if up_region.is_some() || gate_region.is_some() {
            tape.resid_mid = Some(bt.resid_mid.clone());
        }

        let needs_dy1 = needs_dx
            || wo_region.is_some()
            || q_region.is_some()
            || k_region.is_some()
            || v_region.is_some();
        if needs_dy1 {
            tape.ffn_flow_start = 0;
            tape.ffn_flow_end = spec.k_inner;
            tape.ffn_flow = Some((bt.up_pre.clone(), bt.gate_pre.clone()));
        } else if up_region.is_some() || gate_region.is_some() {
            let s = up_region.iter().chain(gate_region.iter()).map(|r| r.start).min().unwrap();
            let e = up_region.iter().chain(gate_region.iter()).map(|r| r.end).max().unwrap();
            tape.ffn_flow_start = s;
            tape.ffn_flow_end = e;
            tape.ffn_flow =
                Some((bt.up_pre.slice_cols(s, e), bt.gate_pre.slice_cols(s, e)));
        }

        let d_h = spec.d_h();
        let heads: Vec<usize> = if needs_dx {
            (0..spec.h).collect()
        } else {
            let mut hs = Vec::new();
            for r in [q_region, k_region, v_region].into_iter().flatten() {
                for head in r.start / d_h..r.end.div_ceil(d_h) {
                    if !hs.contains(&head) {
                        hs.push(head);
                    }
                }
            }
            hs.sort_unstable();
            hs
        };
        for head in heads {
            let cols: Vec<usize> = (head * d_h..(head + 1) * d_h).collect();
            tape.attn_flow.push(HeadFlow {
                head,
                q: bt.q.select_cols(&cols),
                k: bt.k.select_cols(&cols),
                v: bt.v.select_cols(&cols),
                probs: bt.attn_probs[head].clone(),
            });
        }
        blocks.push(tape);
    }
    Ok((y, Tape { tokens: x.rows(), blocks }))
}

/// `dS = P ⊙ (dP − rowsum(dP ⊙ P))` for a row-stochastic `P`.
fn softmax_backward(probs: &Matrix, dprobs: &Matrix) -> Matrix {
    let t = probs.rows();
    let n = probs.cols();
    let mut out = Matrix::zeros(t, n);
    for i in 0..t {
        let mut c = 0.0;
        for j in 0..n {
            c += dprobs.get(i, j) * probs.get(i, j);
        }
        for j in 0..n {
            out.set(i, j, probs.get(i, j) * (dprobs.get(i, j) - c));
        }
    }
    out
}

/// Gradients for trainable regions, shaped as the region slice
/// (rows × region-len for column regions, region-len × cols for row regions).
#[derive(Debug, Clone)]
pub struct RegionGrads {
    pub grads: Vec<(TrainableRegion, Matrix)>,
}

impl RegionGrads {
    pub fn get(&self, weight: WeightId) -> Option<&Matrix> {
        self.grads.iter().find(|(r, _)| r.weight == weight).map(|(_, g)| g)
    }
}

/// Backward pass over the tape: produces gradients only for trainable
/// regions and touches only the saved slices plus flow context.
pub fn backward_partial(
    model: &TransformerModel,
    tape: &Tape,
    loss_grad: &Matrix,
) -> Result<RegionGrads> {
    if loss_grad.rows() != tape.tokens || loss_grad.cols() != model.d() {
        return Err(Error::State(format!(
            "stale tape: loss grad {}x{} vs tokens {} dim {}",
            loss_grad.rows(),
            loss_grad.cols(),
            tape.tokens,
            model.d()
        )));
    }
    if tape.blocks.len() != model.blocks.len() {
        return Err(Error::State("stale tape: block count mismatch".into()));
    }
    let lowest = tape.blocks.iter().position(|b| !b.regions.is_empty());
    let mut grads = Vec::new();
    let mut d_out = loss_grad.clone();
    for b in (0..model.blocks.len()).rev() {
        let Some(lowest) = lowest else { break };
        if b < lowest {
            break;
        }
        let spec = &model.blocks[b];
        let bt = &tape.blocks[b];
        let dx = backward_block_partial(spec, bt, &d_out, &mut grads)?;
        if let Some(dx) = dx {
            d_out = dx;
        }
    }
    Ok(RegionGrads { grads })
}

fn backward_block_partial(
    spec: &TransformerBlockSpec,
    tape: &BlockTape,
    d_out: &Matrix,
    grads: &mut Vec<(TrainableRegion, Matrix)>,
) -> Result<Option<Matrix>> {
    let own = &tape.regions;
    let wo_region = block_kind_region(own, BlockWeight::Wo);
    let wdown_region = block_kind_region(own, BlockWeight::Wdown);
    let q_region = block_kind_region(own, BlockWeight::Wq);
    let k_region = block_kind_region(own, BlockWeight::Wk);
    let v_region = block_kind_region(own, BlockWeight::Wv);
    let up_region = block_kind_region(own, BlockWeight::Wup);
    let gate_region = block_kind_region(own, BlockWeight::Wgate);
    let needs_dy1 = tape.needs_dx
        || wo_region.is_some()
        || q_region.is_some()
        || k_region.is_some()
        || v_region.is_some();

    // --- FFN module ---
    if let Some(r) = wdown_region {
        let slice = tape
            .wdown_input_slice
            .as_ref()
            .ok_or_else(|| Error::State("stale tape: missing Wdown input slice".into()))?;
        if slice.rows() != d_out.rows() || slice.cols() != r.len() {
            return Err(Error::State("stale tape: Wdown slice shape".into()));
        }
        grads.push((r, d_out.transpose().matmul(slice)?));
    }

    let mut d_y1: Option<Matrix> = None;
    let mut d_up_flow: Option<Matrix> = None; // dL/d(up_pre) over the flow range
    let mut d_gate_flow: Option<Matrix> = None;
    if needs_dy1 || up_region.is_some() || gate_region.is_some() {
        let (up, gate) = tape
            .ffn_flow
            .as_ref()
            .ok_or_else(|| Error::State("stale tape: missing FFN flow context".into()))?;
        let (s, e) = (tape.ffn_flow_start, tape.ffn_flow_end);
        // dL/d(inner) over the flow range via the Down columns it feeds.
        let d_inner = d_out.matmul(&spec.wdown.slice_cols(s, e))?;
        let silu_gate = gate.map(silu);
        let d_up = d_inner.mul_elem(&silu_gate)?;
        let d_gate = d_inner.mul_elem(up)?.mul_elem(&gate.map(silu_prime))?;
        if needs_dy1 {
            // Flow range is the whole inner axis here.
            let dy1 = d_out
                .add(&d_up.matmul(&spec.wup)?)?
                .add(&d_gate.matmul(&spec.wgate)?)?;
            d_y1 = Some(dy1);
        }
        d_up_flow = Some(d_up);
        d_gate_flow = Some(d_gate);
    }
    for (r, d_flow) in [(up_region, &d_up_flow), (gate_region, &d_gate_flow)] {
        if let Some(r) = r {
            let resid = tape
                .resid_mid
                .as_ref()
                .ok_or_else(|| Error::State("stale tape: missing resid_mid".into()))?;
            let d_flow = d_flow.as_ref().expect("ffn flow computed above");
            let local = d_flow.slice_cols(r.start - tape.ffn_flow_start, r.end - tape.ffn_flow_start);
            grads.push((r, local.transpose().matmul(resid)?));
        }
    }

    // --- MHA module ---
    if !needs_dy1 {
        return Ok(None);
    }
    let d_y1 = d_y1.expect("set when needs_dy1");
    if let Some(r) = wo_region {
        let slice = tape
            .wo_input_slice
            .as_ref()
            .ok_or_else(|| Error::State("stale tape: missing Wo input slice".into()))?;
        grads.push((r, d_y1.transpose().matmul(slice)?));
    }

    let needs_attn =
        tape.needs_dx || q_region.is_some() || k_region.is_some() || v_region.is_some();
    if !needs_attn {
        return Ok(None);
    }
    let d_h = spec.d_h();
    let t = d_out.rows();
    let scale = 1.0 / (d_h as f64).sqrt();
    let d_head_mix = d_y1.matmul(&spec.wo)?;
    let x = tape.block_input.as_ref();
    let mut d_q_full = Matrix::zeros(t, spec.d);
    let mut d_k_full = Matrix::zeros(t, spec.d);
    let mut d_v_full = Matrix::zeros(t, spec.d);
    let mut q_grad = q_region.map(|r| Matrix::zeros(r.len(), spec.d));
    let mut k_grad = k_region.map(|r| Matrix::zeros(r.len(), spec.d));
    let mut v_grad = v_region.map(|r| Matrix::zeros(r.len(), spec.d));
    for hf in &tape.attn_flow {
        let cols: Vec<usize> = (hf.head * d_h..(hf.head + 1) * d_h).collect();
        let d_mix = d_head_mix.select_cols(&cols);
        let d_probs = d_mix.matmul(&hf.v.transpose())?;
        let d_v = hf.probs.transpose().matmul(&d_mix)?;
        let d_scores = softmax_backward(&hf.probs, &d_probs).scaled(scale);
        let d_q = d_scores.matmul(&hf.k)?;
        let d_k = d_scores.transpose().matmul(&hf.q)?;
        if tape.needs_dx {
            for i in 0..t {
                for (jj, &c) in cols.iter().enumerate() {
                    d_q_full.set(i, c, d_q.get(i, jj));
                    d_k_full.set(i, c, d_k.get(i, jj));
                    d_v_full.set(i, c, d_v.get(i, jj));
                }
            }
        }
        // Row-region weight gradients for this head.
        for (region, acc, d_local) in [
            (&q_region, &mut q_grad, &d_q),
            (&k_region, &mut k_grad, &d_k),
            (&v_region, &mut v_grad, &d_v),
        ] {
            let (Some(region), Some(acc)) = (region, acc.as_mut()) else { continue };
            let lo = hf.head * d_h;
            if lo + d_h <= region.start || lo >= region.end {
                continue;
            }
            let x = x.ok_or_else(|| Error::State("stale tape: missing block input".into()))?;
            let g = d_local.transpose().matmul(x)?; // d_h × d
            for row in 0..d_h {
                let global = lo + row;
                if global < region.start || global >= region.end {
                    continue;
                }
                for j in 0..spec.d {
                    acc.set(global - region.start, j, g.get(row, j));
                }
            }
        }
    }
    for (region, grad) in [(q_region, q_grad), (k_region, k_grad), (v_region, v_grad)] {
        if let (Some(r), Some(g)) = (region, grad) {
            grads.push((r, g));
        }
    }

    if !tape.needs_dx {
        return Ok(None);
    }
    let dx = d_y1
        .add(&d_q_full.matmul(&spec.wq)?)?
        .add(&d_k_full.matmul(&spec.wk)?)?
        .add(&d_v_full.matmul(&spec.wv)?)?;
    Ok(Some(dx))
}

// ---------------------------------------------------------------------------
// Full reverse-mode oracle

/// Full gradients for every weight of a block stack, plus the input gradient.
#[derive(Debug, Clone)]
pub struct FullGrads {
    pub grads: Vec<(WeightId, Matrix)>,
    pub d_input: Matrix,
}

impl FullGrads {
    pub fn get(&self, id: WeightId) -> Option<&Matrix> {
        self.grads.iter().find(|(w, _)| *w == id).map(|(_, g)| g)
    }
}

/// Standard full reverse-mode gradients through the whole stack. Written as
/// an independent path from [`backward_partial`] so the two can check each
/// other.
pub fn full_grad_oracle(
    model: &TransformerModel,
    x: &Matrix,
    loss_grad: &Matrix,
) -> Result<FullGrads> {
    let (_, trace) = forward_model(model, x)?;
    let mut grads: Vec<(WeightId, Matrix)> = Vec::new();
    let mut d_out = loss_grad.clone();
    for b in (0..model.blocks.len()).rev() {
        let spec = &model.blocks[b];
        let bt = &trace.blocks[b];
        let t = x.rows();
        let d_h = spec.d_h();
        let scale = 1.0 / (d_h as f64).sqrt();
        let w = |kind: BlockWeight| WeightId::Block { block: b, kind };

        // FFN backward
        let d_inner = d_out.matmul(&spec.wdown)?;
        let silu_gate = bt.gate_pre.map(silu);
        let d_up = d_inner.mul_elem(&silu_gate)?;
        let d_gate = d_inner.mul_elem(&bt.up_pre)?.mul_elem(&bt.gate_pre.map(silu_prime))?;
        grads.push((w(BlockWeight::Wdown), d_out.transpose().matmul(&bt.ffn_inner)?));
        grads.push((w(BlockWeight::Wup), d_up.transpose().matmul(&bt.resid_mid)?));
        grads.push((w(BlockWeight::Wgate), d_gate.transpose().matmul(&bt.resid_mid)?));
        let d_y1 = d_out
            .add(&d_up.matmul(&spec.wup)?)?
            .add(&d_gate.matmul(&spec.wgate)?)?;

        // MHA backward
        grads.push((w(BlockWeight::Wo), d_y1.transpose().matmul(&bt.head_mix)?));
        let d_head_mix = d_y1.matmul(&spec.wo)?;
        let mut d_q_full = Matrix::zeros(t, spec.d);
        let mut d_k_full = Matrix::zeros(t, spec.d);
        let mut d_v_full = Matrix::zeros(t, spec.d);
        for head in 0..spec.h {
            let cols: Vec<usize> = (head * d_h..(head + 1) * d_h).collect();
            let qh = bt.q.select_cols(&cols);
            let kh = bt.k.select_cols(&cols);
            let vh = bt.v.select_cols(&cols);
            let probs = &bt.attn_probs[head];
            let d_mix = d_head_mix.select_cols(&cols);
            let d_probs = d_mix.matmul(&vh.transpose())?;
            let d_v = probs.transpose().matmul(&d_mix)?;
            let d_scores = softmax_backward(probs, &d_probs).scaled(scale);
            let d_q = d_scores.matmul(&kh)?;
            let d_k = d_scores.transpose().matmul(&qh)?;
            for i in 0..t {
                for (jj, &c) in cols.iter().enumerate() {
                    d_q_full.set(i, c, d_q.get(i, jj));
                    d_k_full.set(i, c, d_k.get(i, jj));
                    d_v_full.set(i, c, d_v.get(i, jj));
                }
            }
        }
        grads.push((w(BlockWeight::Wq), d_q_full.transpose().matmul(&bt.input)?));
        grads.push((w(BlockWeight::Wk), d_k_full.transpose().matmul(&bt.input)?));
        grads.push((w(BlockWeight::Wv), d_v_full.transpose().matmul(&bt.input)?));

        d_out = d_y1
            .add(&d_q_full.matmul(&spec.wq)?)?
            .add(&d_k_full.matmul(&spec.wk)?)?
            .add(&d_v_full.matmul(&spec.wv)?)?;
    }
    grads.reverse();
    Ok(FullGrads { grads, d_input: d_out })
}

/// Slice a full weight gradient down to a region, for oracle comparisons.
pub fn slice_region(full: &Matrix, region: &TrainableRegion) -> Matrix {
    match region.axis {
        Axis::Cols => full.slice_cols(region.start, region.end),
        Axis::Rows => full.slice_rows(region.start, region.end),
    }
}

// ---------------------------------------------------------------------------
// Deep linear chain

/// Tape for a one-layer adaptation of a deep linear chain: the layer input
/// `W_{ℓ-1}…W_1 X` is all that weight gradients need.
#[derive(Debug, Clone)]
pub struct ChainTape {
    pub layer: usize,
    pub below: Matrix,
}

/// Forward `p×n` samples through the chain, saving the adapted layer's input.
pub fn forward_chain_with_tape(
    net: &DeepLinearNet,
    layer: usize,
    x: &Matrix,
) -> Result<(Matrix, ChainTape)> {
    if layer == 0 || layer > net.depth() {
        return Err(Error::Argument(format!("layer {layer} out of range 1..={}", net.depth())));
    }
    if x.rows() != net.input_dim() {
        return Err(Error::Shape(format!(
            "chain input rows {} vs p={}",
            x.rows(),
            net.input_dim()
        )));
    }
    let mut below = x.clone();
    for w in &net.layers[..layer - 1] {
        below = w.matmul(&below)?;
    }
    let mut out = net.layer(layer)?.matmul(&below)?;
    for w in &net.layers[layer..] {
        out = w.matmul(&out)?;
    }
    Ok((out, ChainTape { layer, below }))
}

/// Gradient of the adapted layer (rows `region`) given `dL/d(output)`.
pub fn backward_chain_partial(
    net: &DeepLinearNet,
    tape: &ChainTape,
    loss_grad: &Matrix,
    region: &TrainableRegion,
) -> Result<RegionGrads> {
    if region.axis != Axis::Rows {
        return Err(Error::Argument("chain regions select rows".into()));
    }
    let above = net.partial_above(tape.layer + 1); // q × d_ℓ
    // rows [start,end) of  C^T · dY · P^T  =  C[:, start:end]^T · dY · P^T
    let c_sel = above.slice_cols(region.start, region.end);
    let g = c_sel.transpose().matmul(loss_grad)?.matmul(&tape.below.transpose())?;
    Ok(RegionGrads { grads: vec![(*region, g)] })
}

/// Full gradient of one chain layer.
pub fn chain_layer_grad(
    net: &DeepLinearNet,
    tape: &ChainTape,
    loss_grad: &Matrix,
) -> Result<Matrix> {
    let above = net.partial_above(tape.layer + 1);
    above.transpose().matmul(loss_grad)?.matmul(&tape.below.transpose())
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd,
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimKind {
    pub fn adamw_default() -> Self {
        OptimKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Linear decay from the base rate to zero over `total_steps`.
    LinearDecay { total_steps: u64 },
}

/// Optimizer state sized to the trainable regions only; moment buffers exist
/// for nothing else.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimKind,
    pub lr: f64,
    pub schedule: Schedule,
    pub step: u64,
    moments: HashMap<(WeightId, usize, usize), (Matrix, Matrix)>,
}

impl OptimizerState {
    pub fn new(kind: OptimKind, lr: f64, schedule: Schedule) -> Self {
        OptimizerState { kind, lr, schedule, step: 0, moments: HashMap::new() }
    }

    pub fn current_lr(&self) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::LinearDecay { total_steps } => {
                let frac = 1.0 - (self.step as f64 / total_steps.max(1) as f64).min(1.0);
                self.lr * frac
            }
        }
    }

    /// Bytes held in moment buffers (16 per tracked parameter for AdamW).
    pub fn state_bytes(&self) -> u64 {
        self.moments
            .values()
            .map(|(m, _)| (m.rows() * m.cols()) as u64 * 16)
            .sum()
    }
}

/// AdamW / SGD update applied to region slices only; all other elements stay
/// bit-identical. A non-finite gradient refuses the whole step.
pub fn step_inplace<M: WeightStore>(
    model: &mut M,
    grads: &RegionGrads,
    state: &mut OptimizerState,
) -> Result<()> {
    for (_, g) in &grads.grads {
        if g.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient; step refused".into()));
        }
    }
    state.step += 1;
    let lr = state.current_lr();
    for (region, g) in &grads.grads {
        let key = (region.weight, region.start, region.end);
        match state.kind {
            OptimKind::Sgd => {
                let w = model.weight_mut(region.weight)?;
                apply_region(w, region, |cur, idx| cur - lr * g.as_slice()[idx]);
            }
            OptimKind::AdamW { beta1, beta2, eps, weight_decay } => {
                let (m, v) = state
                    .moments
                    .entry(key)
                    .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
                let bc1 = 1.0 - beta1.powi(state.step as i32);
                let bc2 = 1.0 - beta2.powi(state.step as i32);
                for (idx, gv) in g.as_slice().iter().enumerate() {
                    let mv = beta1 * m.as_slice()[idx] + (1.0 - beta1) * gv;
                    let vv = beta2 * v.as_slice()[idx] + (1.0 - beta2) * gv * gv;
                    m.as_mut_slice()[idx] = mv;
                    v.as_mut_slice()[idx] = vv;
                }
                let (m, v) = (m.clone(), v.clone());
                let w = model.weight_mut(region.weight)?;
                apply_region(w, region, |cur, idx| {
                    let mhat = m.as_slice()[idx] / bc1;
                    let vhat = v.as_slice()[idx] / bc2;
                    cur - lr * (mhat / (vhat.sqrt() + eps) + weight_decay * cur)
                });
            }
        }
    }
    Ok(())
}

fn apply_region(w: &mut Matrix, region: &TrainableRegion, f: impl Fn(f64, usize) -> f64) {
    let len = region.len();
    match region.axis {
        Axis::Cols => {
            for i in 0..w.rows() {
                for jj in 0..len {
                    let j = region.start + jj;
                    let idx = i * len + jj;
                    w.set(i, j, f(w.get(i, j), idx));
                }
            }
        }
        Axis::Rows => {
            let cols = w.cols();
            for ii in 0..len {
                let i = region.start + ii;
                for j in 0..cols {
                    let idx = ii * cols + j;
                    w.set(i, j, f(w.get(i, j), idx));
                }
            }
        }
    }
}

/// Mutable access to weights by id, shared by both model families.
pub trait WeightStore {
    fn weight(&self, id: WeightId) -> Result<&Matrix>;
    fn weight_mut(&mut self, id: WeightId) -> Result<&mut Matrix>;
}

impl WeightStore for TransformerModel {
    fn weight(&self, id: WeightId) -> Result<&Matrix> {
        TransformerModel::weight(self, id)
    }
    fn weight_mut(&mut self, id: WeightId) -> Result<&mut Matrix> {
        TransformerModel::weight_mut(self, id)
    }
}

impl WeightStore for DeepLinearNet {
    fn weight(&self, id: WeightId) -> Result<&Matrix> {
        match id {
            WeightId::Layer { layer } => self.layer(layer),
            _ => Err(Error::Lookup(format!("{id} is not a chain layer"))),
        }
    }
    fn weight_mut(&mut self, id: WeightId) -> Result<&mut Matrix> {
        match id {
            WeightId::Layer { layer } => self.layer_mut(layer),
            _ => Err(Error::Lookup(format!("{id} is not a chain layer"))),
        }
    }
}

// ---------------------------------------------------------------------------
// LoRA baseline

/// One low-rank pair `ΔW = α · U V^T` with `U: d_out×r`, `V: d_in×r`.
/// `V` starts at zero so the adapted model initially equals the base model.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub u: Matrix,
    pub v: Matrix,
    pub alpha: f64,
}

impl LoraPair {
    pub fn init(rng: &mut EngineRng, d_out: usize, d_in: usize, rank: usize, alpha: f64) -> Self {
        LoraPair {
            u: gaussian_matrix(rng, d_out, rank, 1.0 / (d_in as f64).sqrt()),
            v: Matrix::zeros(d_in, rank),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn delta(&self) -> Matrix {
        self.u.matmul(&self.v.transpose()).expect("rank shapes").scaled(self.alpha)
    }

    pub fn param_count(&self) -> usize {
        self.u.rows() * self.u.cols() + self.v.rows() * self.v.cols()
    }
}

/// Adapter set for a block stack, keyed by weight.
#[derive(Debug, Clone, Default)]
pub struct LoraAdapters {
    pub pairs: Vec<(WeightId, LoraPair)>,
}

impl LoraAdapters {
    pub fn get(&self, id: WeightId) -> Option<&LoraPair> {
        self.pairs.iter().find(|(w, _)| *w == id).map(|(_, p)| p)
    }

    pub fn param_count(&self) -> usize {
        self.pairs.iter().map(|(_, p)| p.param_count()).sum()
    }

    /// Materialize `W + αUV^T` into a copy of the model.
    pub fn merged(&self, model: &TransformerModel) -> Result<TransformerModel> {
        let mut out = model.clone();
        for (id, pair) in &self.pairs {
            let w = out.weight_mut(*id)?;
            *w = w.add(&pair.delta())?;
        }
        Ok(out)
    }
}

/// Unmerged adapted projection: `X W^T + α (X V) U^T`.
fn lora_apply(x: &Matrix, w: &Matrix, pair: Option<&LoraPair>) -> Result<Matrix> {
    let base = x.matmul(&w.transpose())?;
    match pair {
        None => Ok(base),
        Some(p) => {
            let xv = x.matmul(&p.v)?;
            base.add(&xv.matmul(&p.u.transpose())?.scaled(p.alpha))
        }
    }
}

/// Forward trace for the LoRA block path; stores the full inputs of adapted
/// projections (both are needed for the `dV` gradients).
#[derive(Debug, Clone)]
pub struct LoraTrace {
    pub traces: Vec<crate::model::BlockTrace>,
}

impl LoraTrace {
    /// Activation bytes the LoRA backward needs: full inputs of adapted
    /// projections plus the FFN flow context.
    pub fn taped_bytes(&self, adapters: &LoraAdapters) -> u64 {
        let mut total = 0u64;
        for (b, t) in self.traces.iter().enumerate() {
            for (id, _) in &adapters.pairs {
                if let WeightId::Block { block, kind } = id {
                    if *block != b {
                        continue;
                    }
                    let input = match kind {
                        BlockWeight::Wo => &t.head_mix,
                        BlockWeight::Wdown => &t.ffn_inner,
                        BlockWeight::Wq | BlockWeight::Wk | BlockWeight::Wv => &t.input,
                        BlockWeight::Wup | BlockWeight::Wgate => &t.resid_mid,
                    };
                    total += (input.rows() * input.cols()) as u64 * 8;
                }
            }
            total += ((t.up_pre.rows() * t.up_pre.cols() + t.gate_pre.rows() * t.gate_pre.cols())
                as u64)
                * 8;
        }
        total
    }
}

/// Unmerged forward through the stack with adapters on Wo/Wdown (the default
/// adapted set; others pass through the base weights).
pub fn forward_lora(
    model: &TransformerModel,
    adapters: &LoraAdapters,
    x: &Matrix,
) -> Result<(Matrix, LoraTrace)> {
    let mut cur = x.clone();
    let mut traces = Vec::new();
    for (b, spec) in model.blocks.iter().enumerate() {
        let id = |kind: BlockWeight| WeightId::Block { block: b, kind };
        for kind in [BlockWeight::Wq, BlockWeight::Wk, BlockWeight::Wv, BlockWeight::Wup, BlockWeight::Wgate] {
            if adapters.get(id(kind)).is_some() {
                return Err(Error::Argument(format!(
                    "LoRA baseline adapts only Wo and Wdown, got {}",
                    id(kind)
                )));
            }
        }
        let t = cur.rows();
        let d_h = spec.d_h();
        let q = cur.matmul(&spec.wq.transpose())?;
        let k = cur.matmul(&spec.wk.transpose())?;
        let v = cur.matmul(&spec.wv.transpose())?;
        let mut head_mix = Matrix::zeros(t, spec.d);
        let mut attn_probs = Vec::with_capacity(spec.h);
        let scale = 1.0 / (d_h as f64).sqrt();
        for head in 0..spec.h {
            let cols: Vec<usize> = (head * d_h..(head + 1) * d_h).collect();
            let qh = q.select_cols(&cols);
            let kh = k.select_cols(&cols);
            let vh = v.select_cols(&cols);
            let probs = crate::model::softmax_rows(&qh.matmul(&kh.transpose())?.scaled(scale));
            let mix = probs.matmul(&vh)?;
            for i in 0..t {
                for (jj, &c) in cols.iter().enumerate() {
                    head_mix.set(i, c, mix.get(i, jj));
                }
            }
            attn_probs.push(probs);
        }
        let attn_out = lora_apply(&head_mix, &spec.wo, adapters.get(id(BlockWeight::Wo)))?;
        let resid_mid = cur.add(&attn_out)?;
        let up_pre = resid_mid.matmul(&spec.wup.transpose())?;
        let gate_pre = resid_mid.matmul(&spec.wgate.transpose())?;
        let ffn_inner = up_pre.mul_elem(&gate_pre.map(silu))?;
        let ffn_out = lora_apply(&ffn_inner, &spec.wdown, adapters.get(id(BlockWeight::Wdown)))?;
        let output = resid_mid.add(&ffn_out)?;
        traces.push(crate::model::BlockTrace {
            input: cur.clone(),
            q,
            k,
            v,
            attn_probs,
            head_mix,
            attn_out,
            resid_mid,
            up_pre,
            gate_pre,
            ffn_inner,
            output: output.clone(),
        });
        cur = output;
    }
    Ok((cur, LoraTrace { traces }))
}

/// Gradients of the adapter parameters (and nothing else).
#[derive(Debug, Clone)]
pub struct LoraGrads {
    pub grads: Vec<(WeightId, Matrix, Matrix)>, // (weight, dU, dV)
}

pub fn backward_lora(
    model: &TransformerModel,
    adapters: &LoraAdapters,
    trace: &LoraTrace,
    loss_grad: &Matrix,
) -> Result<LoraGrads> {
    let mut grads = Vec::new();
    let mut d_out = loss_grad.clone();
    for b in (0..model.blocks.len()).rev() {
        let spec = &model.blocks[b];
        let bt = &trace.traces[b];
        let id = |kind: BlockWeight| WeightId::Block { block: b, kind };

        // FFN: d(inner) through the effective Down weight.
        if let Some(pair) = adapters.get(id(BlockWeight::Wdown)) {
            // dU = α · dOut^T (inner V);  dV = α · inner^T (dOut U)
            let xv = bt.ffn_inner.matmul(&pair.v)?;
            let du = d_out.transpose().matmul(&xv)?.scaled(pair.alpha);
            let dv = bt.ffn_inner.transpose().matmul(&d_out.matmul(&pair.u)?)?.scaled(pair.alpha);
            grads.push((id(BlockWeight::Wdown), du, dv));
        }
        let mut d_inner = d_out.matmul(&spec.wdown)?;
        if let Some(pair) = adapters.get(id(BlockWeight::Wdown)) {
            d_inner = d_inner.add(&d_out.matmul(&pair.u)?.matmul(&pair.v.transpose())?.scaled(pair.alpha))?;
        }
        let silu_gate = bt.gate_pre.map(silu);
        let d_up = d_inner.mul_elem(&silu_gate)?;
        let d_gate = d_inner.mul_elem(&bt.up_pre)?.mul_elem(&bt.gate_pre.map(silu_prime))?;
        let d_y1 = d_out
            .add(&d_up.matmul(&spec.wup)?)?
            .add(&d_gate.matmul(&spec.wgate)?)?;

        if let Some(pair) = adapters.get(id(BlockWeight::Wo)) {
            let xv = bt.head_mix.matmul(&pair.v)?;
            let du = d_y1.transpose().matmul(&xv)?.scaled(pair.alpha);
            let dv = bt.head_mix.transpose().matmul(&d_y1.matmul(&pair.u)?)?.scaled(pair.alpha);
            grads.push((id(BlockWeight::Wo), du, dv));
        }

        if b == 0 {
            break;
        }
        // Propagate to the previous block through attention.
        let mut d_head_mix = d_y1.matmul(&spec.wo)?;
        if let Some(pair) = adapters.get(id(BlockWeight::Wo)) {
            d_head_mix =
                d_head_mix.add(&d_y1.matmul(&pair.u)?.matmul(&pair.v.transpose())?.scaled(pair.alpha))?;
        }
        let t = d_out.rows();
        let d_h = spec.d_h();
        let scale = 1.0 / (d_h as f64).sqrt();
        let mut d_q_full = Matrix::zeros(t, spec.d);
        let mut d_k_full = Matrix::zeros(t, spec.d);
        let mut d_v_full = Matrix::zeros(t, spec.d);
        for head in 0..spec.h {
            let cols: Vec<usize> = (head * d_h..(head + 1) * d_h).collect();
            let qh = bt.q.select_cols(&cols);
            let kh = bt.k.select_cols(&cols);
            let vh = bt.v.select_cols(&cols);
            let probs = &bt.attn_probs[head];
            let d_mix = d_head_mix.select_cols(&cols);
            let d_probs = d_mix.matmul(&vh.transpose())?;
            let d_v = probs.transpose().matmul(&d_mix)?;
            let d_scores = softmax_backward(probs, &d_probs).scaled(scale);
            let d_q = d_scores.matmul(&kh)?;
            let d_k = d_scores.transpose().matmul(&qh)?;
            for i in 0..t {
                for (jj, &c) in cols.iter().enumerate() {
                    d_q_full.set(i, c, d_q.get(i, jj));
                    d_k_full.set(i, c, d_k.get(i, jj));
                    d_v_full.set(i, c, d_v.get(i, jj));
                }
            }
        }
        d_out = d_y1
            .add(&d_q_full.matmul(&spec.wq)?)?
            .add(&d_k_full.matmul(&spec.wk)?)?
            .add(&d_v_full.matmul(&spec.wv)?)?;
    }
    Ok(LoraGrads { grads })
}

// ---------------------------------------------------------------------------
// Training loops

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    S2ft,
    Lora,
    FullFt,
    UnstructuredSparse,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::S2ft => "s2ft",
            Method::Lora => "lora",
            Method::FullFt => "full",
            Method::UnstructuredSparse => "spft",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "s2ft" => Ok(Method::S2ft),
            "lora" => Ok(Method::Lora),
            "full" => Ok(Method::FullFt),
            "spft" => Ok(Method::UnstructuredSparse),
            other => Err(Error::Argument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: OptimKind,
    pub schedule: Schedule,
    /// LoRA baseline rank and scaling.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Per-matrix learning-rate knob for the LoRA baseline: U trains at
    /// `lr × lora_lr_u_scale`, V at `lr`. Equal rates by default; the
    /// infinite-width analyses that want η_U ≫ η_V can raise it.
    pub lora_lr_u_scale: f64,
    /// Trainable ratio for the unstructured-sparse baseline.
    pub sparse_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-2,
            seed: 0,
            optimizer: OptimKind::adamw_default(),
            schedule: Schedule::Constant,
            lora_rank: 4,
            lora_alpha: 1.0,
            lora_lr_u_scale: 1.0,
            sparse_ratio: 0.1,
        }
    }
}

/// Token-row dataset for block training.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub inputs: Matrix,
    pub targets: Matrix,
}

#[derive(Debug, Clone)]
pub struct BlockTrainRun {
    pub model: TransformerModel,
    pub losses: Vec<f64>,
    pub adapters: Option<LoraAdapters>,
    pub optimizer_bytes: u64,
    pub taped_bytes_last: u64,
}

/// Fixed boolean mask over every entry of every weight, drawn once per run.
pub fn unstructured_mask(model: &TransformerModel, ratio: f64, seed: u64) -> Vec<(WeightId, Vec<bool>)> {
    let mut rng = rng_from_seed(seed ^ 0x5bd1_e995);
    let mut out = Vec::new();
    for (b, block) in model.blocks.iter().enumerate() {
        for kind in BLOCK_WEIGHTS {
            let w = block.weight(kind);
            let total = w.rows() * w.cols();
            let keep = ((total as f64) * ratio).round() as usize;
            let chosen = crate::rng::sample_distinct(&mut rng, total, keep.min(total));
            let mut mask = vec![false; total];
            for c in chosen {
                mask[c] = true;
            }
            out.push((WeightId::Block { block: b, kind }, mask));
        }
    }
    out
}

/// Full-matrix regions covering every weight of the stack.
pub fn full_regions(model: &TransformerModel) -> Vec<TrainableRegion> {
    let mut out = Vec::new();
    for (b, block) in model.blocks.iter().enumerate() {
        for kind in BLOCK_WEIGHTS {
            let w = block.weight(kind);
            out.push(TrainableRegion::new(
                WeightId::Block { block: b, kind },
                Axis::Cols,
                0,
                w.cols(),
            ));
        }
    }
    out
}

/// One-method training state over a block stack: owns the model, optimizer
/// state, and method-specific extras, and advances one batch per [`step`].
///
/// [`step`]: BlockStepper::step
pub struct BlockStepper {
    pub method: Method,
    pub model: TransformerModel,
    regions: Vec<TrainableRegion>,
    state: OptimizerState,
    adapters: Option<LoraAdapters>,
    lora_moments: HashMap<(WeightId, bool), (Matrix, Matrix)>,
    sparse_mask: Option<Vec<(WeightId, Vec<bool>)>>,
    full_regs: Vec<TrainableRegion>,
    lora_lr_u_scale: f64,
    pub taped_bytes_last: u64,
}

impl BlockStepper {
    pub fn new(
        method: Method,
        model: &TransformerModel,
        regions: &[TrainableRegion],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let model = model.clone();
        let adapters = if method == Method::Lora {
            let mut rng = rng_from_seed(cfg.seed ^ 0xa5a5_5a5a);
            let mut pairs = Vec::new();
            for (b, block) in model.blocks.iter().enumerate() {
                pairs.push((
                    WeightId::Block { block: b, kind: BlockWeight::Wo },
                    LoraPair::init(&mut rng, block.d, block.d, cfg.lora_rank, cfg.lora_alpha),
                ));
                pairs.push((
                    WeightId::Block { block: b, kind: BlockWeight::Wdown },
                    LoraPair::init(&mut rng, block.d, block.k_inner, cfg.lora_rank, cfg.lora_alpha),
                ));
            }
            Some(LoraAdapters { pairs })
        } else {
            None
        };
        let sparse_mask = (method == Method::UnstructuredSparse)
            .then(|| unstructured_mask(&model, cfg.sparse_ratio, cfg.seed));
        let full_regs = full_regions(&model);
        Ok(BlockStepper {
            method,
            regions: regions.to_vec(),
            state: OptimizerState::new(cfg.optimizer, cfg.lr, cfg.schedule),
            adapters,
            lora_moments: HashMap::new(),
            sparse_mask,
            full_regs,
            lora_lr_u_scale: cfg.lora_lr_u_scale,
            taped_bytes_last: 0,
            model,
        })
    }

    /// One forward + backward + update on a batch; returns the batch loss.
    pub fn step(&mut self, xb: &Matrix, yb: &Matrix) -> Result<f64> {
        match self.method {
            Method::S2ft => {
                let (pred, tape) = forward_with_tape(&self.model, &self.regions, xb)?;
                let loss = mse_loss(&pred, yb);
                let grads = backward_partial(&self.model, &tape, &mse_grad(&pred, yb))?;
                step_inplace(&mut self.model, &grads, &mut self.state)?;
                self.taped_bytes_last = tape.bytes();
                Ok(loss)
            }
            Method::FullFt | Method::UnstructuredSparse => {
                let (pred, _) = forward_model(&self.model, xb)?;
                let loss = mse_loss(&pred, yb);
                let full = full_grad_oracle(&self.model, xb, &mse_grad(&pred, yb))?;
                let mut grads = Vec::new();
                for region in &self.full_regs {
                    let id = &region.weight;
                    let mut g = full
                        .get(*id)
                        .ok_or_else(|| Error::State(format!("missing gradient for {id}")))?
                        .clone();
                    if let Some(masks) = &self.sparse_mask {
                        let mask = &masks.iter().find(|(w, _)| w == id).unwrap().1;
                        for (i, keep) in mask.iter().enumerate() {
                            if !keep {
                                g.as_mut_slice()[i] = 0.0;
                            }
                        }
                    }
                    grads.push((*region, g));
                }
                step_inplace(&mut self.model, &RegionGrads { grads }, &mut self.state)?;
                self.taped_bytes_last = full_trace_bytes(&self.model, xb.rows());
                Ok(loss)
            }
            Method::Lora => {
                let ad = self.adapters.as_mut().expect("lora adapters");
                let (pred, trace) = forward_lora(&self.model, ad, xb)?;
                let loss = mse_loss(&pred, yb);
                let grads = backward_lora(&self.model, ad, &trace, &mse_grad(&pred, yb))?;
                self.state.step += 1;
                let lr = self.state.current_lr();
                for (id, du, dv) in &grads.grads {
                    let pair =
                        ad.pairs.iter_mut().find(|(w, _)| w == id).map(|(_, p)| p).unwrap();
                    let lr_u = lr * self.lora_lr_u_scale;
                    adapter_update(&mut pair.u, du, (*id, false), &mut self.lora_moments, &self.state, lr_u)?;
                    adapter_update(&mut pair.v, dv, (*id, true), &mut self.lora_moments, &self.state, lr)?;
                }
                self.taped_bytes_last = trace.taped_bytes(ad);
                Ok(loss)
            }
        }
    }

    pub fn optimizer_bytes(&self) -> u64 {
        match self.method {
            Method::Lora => self
                .lora_moments
                .values()
                .map(|(m, _)| (m.rows() * m.cols()) as u64 * 16)
                .sum(),
            _ => self.state.state_bytes(),
        }
    }

    /// Merged model for evaluation (folds LoRA adapters into the weights).
    pub fn merged_model(&self) -> Result<TransformerModel> {
        match &self.adapters {
            Some(ad) => ad.merged(&self.model),
            None => Ok(self.model.clone()),
        }
    }
}

/// Train a block stack. `regions` drives the `S2ft` method; the baselines
/// derive their own parameter sets from the config. Deterministic for a fixed
/// (seed, config, data): batches run in order, no hidden entropy.
pub fn train_block(
    method: Method,
    model: &TransformerModel,
    regions: &[TrainableRegion],
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<BlockTrainRun> {
    let rows = data.inputs.rows();
    if rows == 0 || data.targets.rows() != rows {
        return Err(Error::Argument("empty or mismatched training data".into()));
    }
    let batch = cfg.batch_size.max(1).min(rows);
    let mut stepper = BlockStepper::new(method, model, regions, cfg)?;
    let mut losses = Vec::new();
    for _epoch in 0..cfg.epochs {
        let mut start = 0;
        while start < rows {
            let end = (start + batch).min(rows);
            let xb = data.inputs.slice_rows(start, end);
            let yb = data.targets.slice_rows(start, end);
            start = end;
            let loss = stepper.step(&xb, &yb)?;
            record_loss(&mut losses, loss)?;
        }
    }
    Ok(BlockTrainRun {
        optimizer_bytes: stepper.optimizer_bytes(),
        taped_bytes_last: stepper.taped_bytes_last,
        model: stepper.model,
        losses,
        adapters: stepper.adapters,
    })
}

/// Activation bytes a full backward keeps per step (everything the oracle
/// reads from the trace).
pub fn full_trace_bytes(model: &TransformerModel, tokens: usize) -> u64 {
    let mut total = 0u64;
    for block in &model.blocks {
        let (d, h, k) = (block.d, block.h, block.k_inner);
        let t = tokens as u64;
        // input, q, k, v, head_mix, resid_mid: t×d each; probs: h·t·t;
        // up_pre, gate_pre, ffn_inner: t×k each.
        total += 8 * (6 * t * d as u64 + h as u64 * t * t + 3 * t * k as u64);
    }
    total
}

fn adapter_update(
    w: &mut Matrix,
    g: &Matrix,
    key: (WeightId, bool),
    moments: &mut HashMap<(WeightId, bool), (Matrix, Matrix)>,
    state: &OptimizerState,
    lr: f64,
) -> Result<()> {
    if g.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite adapter gradient; step refused".into()));
    }
    match state.kind {
        OptimKind::Sgd => {
            for (idx, gv) in g.as_slice().iter().enumerate() {
                w.as_mut_slice()[idx] -= lr * gv;
            }
        }
        OptimKind::AdamW { beta1, beta2, eps, weight_decay } => {
            let (m, v) = moments
                .entry(key)
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let bc1 = 1.0 - beta1.powi(state.step as i32);
            let bc2 = 1.0 - beta2.powi(state.step as i32);
            for (idx, gv) in g.as_slice().iter().enumerate() {
                let mv = beta1 * m.as_slice()[idx] + (1.0 - beta1) * gv;
                let vv = beta2 * v.as_slice()[idx] + (1.0 - beta2) * gv * gv;
                m.as_mut_slice()[idx] = mv;
                v.as_mut_slice()[idx] = vv;
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                let cur = w.as_slice()[idx];
                w.as_mut_slice()[idx] = cur - lr * (mhat / (vhat.sqrt() + eps) + weight_decay * cur);
            }
        }
    }
    Ok(())
}

fn record_loss(losses: &mut Vec<f64>, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "training diverged at step {} (loss {loss})",
            losses.len()
        )));
    }
    losses.push(loss);
    Ok(())
}

/// Column-sample dataset for chain training.
#[derive(Debug, Clone)]
pub struct ChainData {
    /// p × n
    pub x: Matrix,
    /// q × n
    pub y: Matrix,
}

#[derive(Debug, Clone)]
pub struct ChainTrainRun {
    pub net: DeepLinearNet,
    pub losses: Vec<f64>,
    pub lora: Option<LoraPair>,
}

/// Train one layer of a deep linear chain. For `S2ft`, `rows` lists the
/// trainable channel rows of layer ℓ (contiguity is not required here; the
/// chain trainer is the theory-lab path, not the permuted engine path).
pub fn train_chain(
    method: Method,
    net: &DeepLinearNet,
    layer: usize,
    rows: &[usize],
    data: &ChainData,
    cfg: &TrainConfig,
) -> Result<ChainTrainRun> {
    let mut net = net.clone();
    let mut losses = Vec::new();
    let mut state = OptimizerState::new(cfg.optimizer, cfg.lr, cfg.schedule);
    let (d_l, d_lm1) = {
        let w = net.layer(layer)?;
        (w.rows(), w.cols())
    };
    let mut lora = if method == Method::Lora {
        let mut rng = rng_from_seed(cfg.seed ^ 0xa5a5_5a5a);
        Some(LoraPair::init(&mut rng, d_l, d_lm1, cfg.lora_rank, cfg.lora_alpha))
    } else {
        None
    };
    let mut lora_moments: HashMap<(WeightId, bool), (Matrix, Matrix)> = HashMap::new();
    let sparse_mask = if method == Method::UnstructuredSparse {
        let total = d_l * d_lm1;
        let keep = ((total as f64) * cfg.sparse_ratio).round() as usize;
        let mut rng = rng_from_seed(cfg.seed ^ 0x5bd1_e995);
        let chosen = crate::rng::sample_distinct(&mut rng, total, keep.min(total));
        let mut mask = vec![false; total];
        for c in chosen {
            mask[c] = true;
        }
        Some(mask)
    } else {
        None
    };

    let id = WeightId::Layer { layer };
    for _step in 0..cfg.epochs {
        match method {
            Method::S2ft => {
                let (pred0, tape) = forward_chain_with_tape(&net, layer, &data.x)?;
                record_loss(&mut losses, mse_loss_cols(&pred0, &data.y))?;
                let lg = mse_grad_cols(&pred0, &data.y);
                let above = net.partial_above(layer + 1);
                let mut grads = Vec::new();
                for &row in rows {
                    let region = TrainableRegion::new(id, Axis::Rows, row, row + 1);
                    let g = backward_chain_partial(&net, &tape, &lg, &region)?;
                    grads.extend(g.grads);
                }
                let _ = above;
                step_inplace(&mut net, &RegionGrads { grads }, &mut state)?;
            }
            Method::FullFt | Method::UnstructuredSparse => {
                let (pred0, tape) = forward_chain_with_tape(&net, layer, &data.x)?;
                record_loss(&mut losses, mse_loss_cols(&pred0, &data.y))?;
                let lg = mse_grad_cols(&pred0, &data.y);
                let mut g = chain_layer_grad(&net, &tape, &lg)?;
                if let Some(mask) = &sparse_mask {
                    for (i, keep) in mask.iter().enumerate() {
                        if !keep {
                            g.as_mut_slice()[i] = 0.0;
                        }
                    }
                }
                let region = TrainableRegion::new(id, Axis::Rows, 0, d_l);
                step_inplace(&mut net, &RegionGrads { grads: vec![(region, g)] }, &mut state)?;
            }
            Method::Lora => {
                let pair = lora.as_mut().expect("lora pair");
                // Effective layer: W + αUV^T, evaluated unmerged.
                let mut tmp = net.clone();
                {
                    let w = tmp.layer_mut(layer)?;
                    *w = w.add(&pair.delta())?;
                }
                let (pred0, tape) = forward_chain_with_tape(&tmp, layer, &data.x)?;
                record_loss(&mut losses, mse_loss_cols(&pred0, &data.y))?;
                let lg = mse_grad_cols(&pred0, &data.y);
                let d_delta = chain_layer_grad(&tmp, &tape, &lg)?;
                let du = d_delta.matmul(&pair.v)?.scaled(pair.alpha);
                let dv = d_delta.transpose().matmul(&pair.u)?.scaled(pair.alpha);
                state.step += 1;
                let lr = state.current_lr();
                adapter_update(&mut pair.u, &du, (id, false), &mut lora_moments, &state, lr * cfg.lora_lr_u_scale)?;
                adapter_update(&mut pair.v, &dv, (id, true), &mut lora_moments, &state, lr)?;
            }
        }
    }
    if let Some(pair) = &lora {
        let w = net.layer_mut(layer)?;
        *w = w.add(&pair.delta())?;
    }
    Ok(ChainTrainRun { net, losses, lora })
}

// ---------------------------------------------------------------------------
// Finite-difference checks

pub mod gradcheck {
    //! Central-difference probes against the analytic gradients.

    use super::*;

    /// d(mse_loss)/d(weight[i][j]) by central differences on a block stack.
    pub fn central_diff_block(
        model: &TransformerModel,
        weight: WeightId,
        i: usize,
        j: usize,
        x: &Matrix,
        y: &Matrix,
        eps: f64,
    ) -> Result<f64> {
        let mut plus = model.clone();
        let w = plus.weight_mut(weight)?;
        w.set(i, j, w.get(i, j) + eps);
        let (pred_p, _) = forward_model(&plus, x)?;
        let mut minus = model.clone();
        let w = minus.weight_mut(weight)?;
        w.set(i, j, w.get(i, j) - eps);
        let (pred_m, _) = forward_model(&minus, x)?;
        Ok((mse_loss(&pred_p, y) - mse_loss(&pred_m, y)) / (2.0 * eps))
    }

    /// Same probe for a chain layer under the column-sample loss.
    pub fn central_diff_chain(
        net: &DeepLinearNet,
        layer: usize,
        i: usize,
        j: usize,
        x: &Matrix,
        y: &Matrix,
        eps: f64,
    ) -> Result<f64> {
        let mut plus = net.clone();
        let w = plus.layer_mut(layer)?;
        w.set(i, j, w.get(i, j) + eps);
        let (pred_p, _) = forward_chain_with_tape(&plus, layer, x)?;
        let mut minus = net.clone();
        let w = minus.layer_mut(layer)?;
        w.set(i, j, w.get(i, j) - eps);
        let (pred_m, _) = forward_chain_with_tape(&minus, layer, x)?;
        Ok((mse_loss_cols(&pred_p, y) - mse_loss_cols(&pred_m, y)) / (2.0 * eps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_block_model, init_linear_net, BlockConfig};
    use crate::rng::gaussian_matrix;

    fn cfg_small() -> BlockConfig {
        BlockConfig { d: 8, h: 2, k_inner: 12, n_blocks: 1 }
    }

    fn default_regions(block: usize, heads: usize, ch: usize, d_h: usize) -> Vec<TrainableRegion> {
        vec![
            TrainableRegion::new(
                WeightId::Block { block, kind: BlockWeight::Wo },
                Axis::Cols,
                0,
                heads * d_h,
            ),
            TrainableRegion::new(
                WeightId::Block { block, kind: BlockWeight::Wdown },
                Axis::Cols,
                0,
                ch,
            ),
        ]
    }

    #[test]
    fn empty_regions_empty_tape_same_output() {
        let model = init_block_model(&cfg_small(), 1).unwrap();
        let mut rng = rng_from_seed(2);
        let x = gaussian_matrix(&mut rng, 5, 8, 1.0);
        let (y_tape, tape) = forward_with_tape(&model, &[], &x).unwrap();
        let (y_plain, _) = forward_model(&model, &x).unwrap();
        assert_eq!(y_tape, y_plain);
        assert_eq!(tape.bytes(), 0);
    }

    #[test]
    fn down_only_region_tapes_exactly_the_channel_slice() {
        let model = init_block_model(&cfg_small(), 3).unwrap();
        let mut rng = rng_from_seed(4);
        let x = gaussian_matrix(&mut rng, 5, 8, 1.0);
        let region = TrainableRegion::new(
            WeightId::Block { block: 0, kind: BlockWeight::Wdown },
            Axis::Cols,
            0,
            4,
        );
        let (_, tape) = forward_with_tape(&model, &[region], &x).unwrap();
        let bt = &tape.blocks[0];
        let slice = bt.wdown_input_slice.as_ref().unwrap();
        assert_eq!((slice.rows(), slice.cols()), (5, 4));
        assert!(bt.ffn_flow.is_none());
        assert!(bt.wo_input_slice.is_none());
        assert_eq!(tape.bytes(), 5 * 4 * 8);
        let (_, trace) = forward_model(&model, &x).unwrap();
        assert_eq!(*slice, trace.blocks[0].ffn_inner.slice_cols(0, 4));
    }

    #[test]
    fn taped_bytes_below_full_for_proper_subsets() {
        let model = init_block_model(&cfg_small(), 5).unwrap();
        let mut rng = rng_from_seed(6);
        let x = gaussian_matrix(&mut rng, 6, 8, 1.0);
        let regions = default_regions(0, 1, 4, 4);
        let (_, tape) = forward_with_tape(&model, &regions, &x).unwrap();
        assert!(tape.bytes() < full_trace_bytes(&model, 6));
    }

    #[test]
    fn region_grads_match_full_oracle_slices() {
        let cfg = BlockConfig { d: 8, h: 4, k_inner: 10, n_blocks: 2 };
        let model = init_block_model(&cfg, 7).unwrap();
        let mut rng = rng_from_seed(8);
        let x = gaussian_matrix(&mut rng, 6, 8, 1.0);
        let y = gaussian_matrix(&mut rng, 6, 8, 1.0);
        // Regions across both blocks and every projection kind.
        let d_h = 2;
        let mut regions = vec![
            TrainableRegion::new(WeightId::Block { block: 0, kind: BlockWeight::Wq }, Axis::Rows, 0, 2 * d_h),
            TrainableRegion::new(WeightId::Block { block: 0, kind: BlockWeight::Wk }, Axis::Rows, 0, 2 * d_h),
            TrainableRegion::new(WeightId::Block { block: 0, kind: BlockWeight::Wv }, Axis::Rows, 0, 2 * d_h),
            TrainableRegion::new(WeightId::Block { block: 0, kind: BlockWeight::Wup }, Axis::Rows, 0, 3),
            TrainableRegion::new(WeightId::Block { block: 0, kind: BlockWeight::Wgate }, Axis::Rows, 0, 3),
        ];
        regions.extend(default_regions(1, 2, 5, d_h));
        let (pred, tape) = forward_with_tape(&model, &regions, &x).unwrap();
        let lg = mse_grad(&pred, &y);
        let partial = backward_partial(&model, &tape, &lg).unwrap();
        let full = full_grad_oracle(&model, &x, &lg).unwrap();
        assert_eq!(partial.grads.len(), regions.len());
        for (region, g) in &partial.grads {
            let full_g = full.get(region.weight).unwrap();
            let want = slice_region(full_g, region);
            let rel = g.sub(&want).unwrap().frobenius_norm() / want.frobenius_norm().max(1e-300);
            assert!(rel <= 1e-10, "{} region grad rel err {rel:.3e}", region.weight);
        }
    }

    #[test]
    fn zero_upstream_grad_gives_zero_region_grads() {
        let model = init_block_model(&cfg_small(), 9).unwrap();
        let mut rng = rng_from_seed(10);
        let x = gaussian_matrix(&mut rng, 4, 8, 1.0);
        let regions = default_regions(0, 1, 4, 4);
        let (_, tape) = forward_with_tape(&model, &regions, &x).unwrap();
        let zero = Matrix::zeros(4, 8);
        let grads = backward_partial(&model, &tape, &zero).unwrap();
        for (_, g) in &grads.grads {
            assert_eq!(g.max_abs(), 0.0);
        }
    }

    #[test]
    fn finite_differences_agree_with_partial_grads() {
        let model = init_block_model(&cfg_small(), 11).unwrap();
        let mut rng = rng_from_seed(12);
        let x = gaussian_matrix(&mut rng, 5, 8, 1.0);
        let y = gaussian_matrix(&mut rng, 5, 8, 1.0);
        let regions = default_regions(0, 1, 4, 4);
        let (pred, tape) = forward_with_tape(&model, &regions, &x).unwrap();
        let grads = backward_partial(&model, &tape, &mse_grad(&pred, &y)).unwrap();
        for (region, g) in &grads.grads {
            for &(i, jj) in &[(0usize, 0usize), (3, 2), (7, 3)] {
                let (wi, wj) = match region.axis {
                    Axis::Cols => (i % g.rows(), region.start + (jj % region.len())),
                    Axis::Rows => (region.start + (i % region.len()), jj % g.cols()),
                };
                let analytic = match region.axis {
                    Axis::Cols => g.get(wi, wj - region.start),
                    Axis::Rows => g.get(wi - region.start, wj),
                };
                let fd = gradcheck::central_diff_block(&model, region.weight, wi, wj, &x, &y, 1e-6)
                    .unwrap();
                let rel = (analytic - fd).abs() / fd.abs().max(1e-8);
                assert!(rel <= 1e-4, "{}[{wi}][{wj}]: {analytic} vs fd {fd}", region.weight);
            }
        }
    }

    #[test]
    fn oracle_matches_finite_differences() {
        let model = init_block_model(&cfg_small(), 13).unwrap();
        let mut rng = rng_from_seed(14);
        let x = gaussian_matrix(&mut rng, 4, 8, 1.0);
        let y = gaussian_matrix(&mut rng, 4, 8, 1.0);
        let (pred, _) = forward_model(&model, &x).unwrap();
        let full = full_grad_oracle(&model, &x, &mse_grad(&pred, &y)).unwrap();
        let probes = [(BlockWeight::Wq, 1, 2), (BlockWeight::Wv, 0, 5), (BlockWeight::Wo, 3, 3),
                      (BlockWeight::Wup, 2, 1), (BlockWeight::Wgate, 9, 0), (BlockWeight::Wdown, 4, 7),
                      (BlockWeight::Wk, 6, 6)];
        for (kind, i, j) in probes {
            let id = WeightId::Block { block: 0, kind };
            let analytic = full.get(id).unwrap().get(i, j);
            let fd = gradcheck::central_diff_block(&model, id, i, j, &x, &y, 1e-6).unwrap();
            let rel = (analytic - fd).abs() / fd.abs().max(1e-8);
            assert!(rel <= 1e-4, "{id} [{i}][{j}]: {analytic} vs {fd}");
        }
    }

    #[test]
    fn linear_model_gradient_closed_form() {
        // For L(W) = ½‖Wx − y‖², dL/dW = (Wx − y) x^T; feed the ½-loss grad
        // directly into the chain backward and compare exactly.
        let net = init_linear_net(&[3, 2], 15).unwrap();
        let mut rng = rng_from_seed(16);
        let x = gaussian_matrix(&mut rng, 3, 1, 1.0);
        let y = gaussian_matrix(&mut rng, 2, 1, 1.0);
        let (pred, tape) = forward_chain_with_tape(&net, 1, &x).unwrap();
        let resid = pred.sub(&y).unwrap();
        let g = chain_layer_grad(&net, &tape, &resid).unwrap();
        let want = resid.matmul(&x.transpose()).unwrap();
        assert!(g.max_abs_diff(&want) <= 1e-14);
    }

    #[test]
    fn constant_loss_zero_gradients() {
        let model = init_block_model(&cfg_small(), 17).unwrap();
        let mut rng = rng_from_seed(18);
        let x = gaussian_matrix(&mut rng, 4, 8, 1.0);
        let zero = Matrix::zeros(4, 8);
        let full = full_grad_oracle(&model, &x, &zero).unwrap();
        for (_, g) in &full.grads {
            assert_eq!(g.max_abs(), 0.0);
        }
    }

    #[test]
    fn chain_gradcheck() {
        let net = init_linear_net(&[4, 6, 5, 3], 19).unwrap();
        let mut rng = rng_from_seed(20);
        let x = gaussian_matrix(&mut rng, 4, 9, 1.0);
        let y = gaussian_matrix(&mut rng, 3, 9, 1.0);
        let (pred, tape) = forward_chain_with_tape(&net, 2, &x).unwrap();
        let g = chain_layer_grad(&net, &tape, &mse_grad_cols(&pred, &y)).unwrap();
        for (i, j) in [(0usize, 0usize), (2, 3), (4, 5)] {
            let fd = gradcheck::central_diff_chain(&net, 2, i, j, &x, &y, 1e-6).unwrap();
            let rel = (g.get(i, j) - fd).abs() / fd.abs().max(1e-8);
            assert!(rel <= 1e-4);
        }
    }

    #[test]
    fn step_zero_gradient_is_noop() {
        let mut model = init_block_model(&cfg_small(), 21).unwrap();
        let before = model.clone();
        let region = TrainableRegion::new(
            WeightId::Block { block: 0, kind: BlockWeight::Wdown },
            Axis::Cols,
            0,
            4,
        );
        let grads = RegionGrads { grads: vec![(region, Matrix::zeros(8, 4))] };
        let mut state = OptimizerState::new(OptimKind::Sgd, 0.1, Schedule::Constant);
        step_inplace(&mut model, &grads, &mut state).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn sgd_scalar_arithmetic() {
        let mut net = DeepLinearNet::new(vec![Matrix::from_vec(1, 1, vec![1.0]).unwrap()]).unwrap();
        let region = TrainableRegion::new(WeightId::Layer { layer: 1 }, Axis::Rows, 0, 1);
        let grads = RegionGrads {
            grads: vec![(region, Matrix::from_vec(1, 1, vec![2.0]).unwrap())],
        };
        let mut state = OptimizerState::new(OptimKind::Sgd, 0.1, Schedule::Constant);
        step_inplace(&mut net, &grads, &mut state).unwrap();
        assert!((net.layer(1).unwrap().get(0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn off_region_weights_bit_identical_after_training() {
        let model = init_block_model(&cfg_small(), 22).unwrap();
        let mut rng = rng_from_seed(23);
        let data = TrainData {
            inputs: gaussian_matrix(&mut rng, 16, 8, 1.0),
            targets: gaussian_matrix(&mut rng, 16, 8, 1.0),
        };
        let regions = default_regions(0, 1, 4, 4);
        let cfg = TrainConfig { epochs: 25, batch_size: 4, lr: 1e-3, ..Default::default() };
        let run = train_block(Method::S2ft, &model, &regions, &data, &cfg).unwrap();
        assert_eq!(run.losses.len(), 100);
        // Off-region checks: Wq untouched entirely; Wo cols ≥ 4; Wdown cols ≥ 4.
        assert_eq!(run.model.blocks[0].wq, model.blocks[0].wq);
        assert_eq!(run.model.blocks[0].wk, model.blocks[0].wk);
        assert_eq!(run.model.blocks[0].wv, model.blocks[0].wv);
        assert_eq!(run.model.blocks[0].wup, model.blocks[0].wup);
        assert_eq!(run.model.blocks[0].wgate, model.blocks[0].wgate);
        for i in 0..8 {
            for j in 4..8 {
                assert_eq!(run.model.blocks[0].wo.get(i, j), model.blocks[0].wo.get(i, j));
            }
            for j in 4..12 {
                assert_eq!(run.model.blocks[0].wdown.get(i, j), model.blocks[0].wdown.get(i, j));
            }
        }
        // And the trained region did move.
        assert!(run.model.blocks[0].wdown.max_abs_diff(&model.blocks[0].wdown) > 0.0);
    }

    #[test]
    fn stale_tape_is_a_state_error() {
        let model = init_block_model(&cfg_small(), 50).unwrap();
        let mut rng = rng_from_seed(51);
        let x = gaussian_matrix(&mut rng, 5, 8, 1.0);
        let regions = default_regions(0, 1, 4, 4);
        let (_, tape) = forward_with_tape(&model, &regions, &x).unwrap();
        // Wrong token count in the upstream gradient.
        let bad = Matrix::zeros(3, 8);
        assert!(matches!(
            backward_partial(&model, &tape, &bad),
            Err(Error::State(_))
        ));
        // Tape from a different stack depth.
        let deeper =
            init_block_model(&BlockConfig { n_blocks: 2, ..cfg_small() }, 50).unwrap();
        let good = Matrix::zeros(5, 8);
        assert!(matches!(
            backward_partial(&deeper, &tape, &good),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn nan_gradient_refuses_step() {
        let mut model = init_block_model(&cfg_small(), 24).unwrap();
        let before = model.clone();
        let region = TrainableRegion::new(
            WeightId::Block { block: 0, kind: BlockWeight::Wdown },
            Axis::Cols,
            0,
            1,
        );
        let mut bad = Matrix::zeros(8, 1);
        bad.as_mut_slice()[0] = 1.0;
        // splice a NaN in through the raw slice
        bad.as_mut_slice()[1] = f64::NAN;
        let grads = RegionGrads { grads: vec![(region, bad)] };
        let mut state = OptimizerState::new(OptimKind::Sgd, 0.1, Schedule::Constant);
        assert!(matches!(
            step_inplace(&mut model, &grads, &mut state),
            Err(Error::Numeric(_))
        ));
        assert_eq!(model, before);
    }

    #[test]
    fn training_is_deterministic() {
        let model = init_block_model(&cfg_small(), 25).unwrap();
        let mut rng = rng_from_seed(26);
        let data = TrainData {
            inputs: gaussian_matrix(&mut rng, 12, 8, 1.0),
            targets: gaussian_matrix(&mut rng, 12, 8, 1.0),
        };
        let regions = default_regions(0, 1, 4, 4);
        let cfg = TrainConfig { epochs: 5, batch_size: 4, lr: 1e-3, seed: 7, ..Default::default() };
        let a = train_block(Method::S2ft, &model, &regions, &data, &cfg).unwrap();
        let b = train_block(Method::S2ft, &model, &regions, &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn full_ft_linear_regression_reaches_least_squares() {
        // One-layer chain = plain linear regression; 400 GD steps reach the
        // exact least-squares optimum on a well-conditioned instance.
        let net = init_linear_net(&[4, 3], 27).unwrap();
        let mut rng = rng_from_seed(28);
        let x = gaussian_matrix(&mut rng, 4, 40, 1.0);
        let w_true = gaussian_matrix(&mut rng, 3, 4, 1.0);
        let y = w_true.matmul(&x).unwrap();
        let data = ChainData { x: x.clone(), y: y.clone() };
        let cfg = TrainConfig {
            epochs: 400,
            lr: 0.05,
            optimizer: OptimKind::Sgd,
            ..Default::default()
        };
        let run = train_chain(Method::FullFt, &net, 1, &[], &data, &cfg).unwrap();
        let final_loss = *run.losses.last().unwrap();
        // Realizable target: least-squares optimum is zero loss.
        assert!(final_loss <= 1e-6, "final loss {final_loss}");
    }

    #[test]
    fn s2ft_full_selection_matches_full_ft_trajectory() {
        // All heads and channels selected on every projection = the same
        // parameter set as full fine-tuning, so per-step trajectories agree.
        let cfg_m = BlockConfig { d: 8, h: 2, k_inner: 6, n_blocks: 1 };
        let model = init_block_model(&cfg_m, 29).unwrap();
        let mut rng = rng_from_seed(30);
        let data = TrainData {
            inputs: gaussian_matrix(&mut rng, 8, 8, 1.0),
            targets: gaussian_matrix(&mut rng, 8, 8, 1.0),
        };
        let all_regions: Vec<TrainableRegion> = vec![
            (BlockWeight::Wq, Axis::Rows, 8),
            (BlockWeight::Wk, Axis::Rows, 8),
            (BlockWeight::Wv, Axis::Rows, 8),
            (BlockWeight::Wo, Axis::Cols, 8),
            (BlockWeight::Wup, Axis::Rows, 6),
            (BlockWeight::Wgate, Axis::Rows, 6),
            (BlockWeight::Wdown, Axis::Cols, 6),
        ]
        .into_iter()
        .map(|(kind, axis, len)| {
            TrainableRegion::new(WeightId::Block { block: 0, kind }, axis, 0, len)
        })
        .collect();
        let cfg = TrainConfig { epochs: 5, batch_size: 8, lr: 1e-2, ..Default::default() };
        let s2 = train_block(Method::S2ft, &model, &all_regions, &data, &cfg).unwrap();
        let full = train_block(Method::FullFt, &model, &[], &data, &cfg).unwrap();
        for (a, b) in s2.losses.iter().zip(&full.losses) {
            assert!((a - b).abs() <= 1e-9, "loss trajectory {a} vs {b}");
        }
        for kind in BLOCK_WEIGHTS {
            let d = s2.model.blocks[0].weight(kind).max_abs_diff(full.model.blocks[0].weight(kind));
            assert!(d <= 1e-9, "{} diverged by {d:.3e}", kind.name());
        }
    }

    #[test]
    fn lora_zero_init_initial_loss_equals_base() {
        let model = init_block_model(&cfg_small(), 31).unwrap();
        let mut rng = rng_from_seed(32);
        let data = TrainData {
            inputs: gaussian_matrix(&mut rng, 8, 8, 1.0),
            targets: gaussian_matrix(&mut rng, 8, 8, 1.0),
        };
        let (base_pred, _) = forward_model(&model, &data.inputs).unwrap();
        let base_loss = mse_loss(&base_pred, &data.targets);
        let cfg = TrainConfig { epochs: 1, batch_size: 8, lr: 1e-3, ..Default::default() };
        let run = train_block(Method::Lora, &model, &[], &data, &cfg).unwrap();
        assert_eq!(run.losses[0], base_loss);
    }

    #[test]
    fn lora_merged_equals_unmerged_forward() {
        let model = init_block_model(&cfg_small(), 33).unwrap();
        let mut rng = rng_from_seed(34);
        let x = gaussian_matrix(&mut rng, 6, 8, 1.0);
        let mut adapters = LoraAdapters::default();
        let mut arng = rng_from_seed(35);
        adapters.pairs.push((
            WeightId::Block { block: 0, kind: BlockWeight::Wo },
            LoraPair { u: gaussian_matrix(&mut arng, 8, 3, 0.3), v: gaussian_matrix(&mut arng, 8, 3, 0.3), alpha: 1.0 },
        ));
        adapters.pairs.push((
            WeightId::Block { block: 0, kind: BlockWeight::Wdown },
            LoraPair { u: gaussian_matrix(&mut arng, 8, 3, 0.3), v: gaussian_matrix(&mut arng, 12, 3, 0.3), alpha: 0.5 },
        ));
        let (unmerged, _) = forward_lora(&model, &adapters, &x).unwrap();
        let merged_model = adapters.merged(&model).unwrap();
        let (merged, _) = forward_model(&merged_model, &x).unwrap();
        assert!(unmerged.max_abs_diff(&merged) <= 1e-10);
    }

    #[test]
    fn lora_grads_match_finite_differences() {
        let model = init_block_model(&cfg_small(), 36).unwrap();
        let mut rng = rng_from_seed(37);
        let x = gaussian_matrix(&mut rng, 5, 8, 1.0);
        let y = gaussian_matrix(&mut rng, 5, 8, 1.0);
        let mut arng = rng_from_seed(38);
        let adapters = LoraAdapters {
            pairs: vec![
                (
                    WeightId::Block { block: 0, kind: BlockWeight::Wo },
                    LoraPair { u: gaussian_matrix(&mut arng, 8, 2, 0.3), v: gaussian_matrix(&mut arng, 8, 2, 0.3), alpha: 1.0 },
                ),
                (
                    WeightId::Block { block: 0, kind: BlockWeight::Wdown },
                    LoraPair { u: gaussian_matrix(&mut arng, 8, 2, 0.3), v: gaussian_matrix(&mut arng, 12, 2, 0.3), alpha: 1.0 },
                ),
            ],
        };
        let (pred, trace) = forward_lora(&model, &adapters, &x).unwrap();
        let grads = backward_lora(&model, &adapters, &trace, &mse_grad(&pred, &y)).unwrap();
        let eps = 1e-6;
        for (id, du, dv) in &grads.grads {
            for (which_v, g) in [(false, du), (true, dv)] {
                let (i, j) = (1usize, 1usize);
                let mut pert = adapters.clone();
                let pair = pert.pairs.iter_mut().find(|(w, _)| w == id).map(|(_, p)| p).unwrap();
                let m = if which_v { &mut pair.v } else { &mut pair.u };
                m.set(i, j, m.get(i, j) + eps);
                let (pp, _) = forward_lora(&model, &pert, &x).unwrap();
                let pair = pert.pairs.iter_mut().find(|(w, _)| w == id).map(|(_, p)| p).unwrap();
                let m = if which_v { &mut pair.v } else { &mut pair.u };
                m.set(i, j, m.get(i, j) - 2.0 * eps);
                let (pm, _) = forward_lora(&model, &pert, &x).unwrap();
                let fd = (mse_loss(&pp, &y) - mse_loss(&pm, &y)) / (2.0 * eps);
                let rel = (g.get(i, j) - fd).abs() / fd.abs().max(1e-8);
                assert!(rel <= 1e-4, "{id} adapter grad vs fd: {} vs {fd}", g.get(i, j));
            }
        }
    }
}
