//! Unmerged-adapter lifecycle: extract `ΔW = U Vᵀ` from a fine-tuned model,
//! fuse/unfuse/switch on live weights, weighted fusion, and batched parallel
//! application over a shared base, with primitive-operation counts for each
//! serving scenario.
//!
//! Adapters are keyed to original (pre-permutation) indices, so they stay
//! valid if the base is re-permuted; the permutation plan provides the
//! mapping. Unfuse restores a saved original slice instead of subtracting —
//! floating-point subtraction after addition is not exact — so the roundtrip
//! is bit-exact at the cost of one saved slice per fused adapter. The op
//! counts always describe the serving-time op sequence (scatter_add for
//! sparse, matmul+add for low-rank), independent of that bookkeeping.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Axis, Matrix};
use crate::model::{BlockWeight, TransformerModel, WeightId, BLOCK_WEIGHTS};
use crate::permute::{apply_permutation, inverse_plan, PermutationPlan};

/// FNV-1a over the little-endian bytes of the weight. Used to tie adapters
/// to the exact base weights they were extracted against.
pub fn fingerprint(m: &Matrix) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in m.as_slice() {
        for b in v.to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

/// Sparse adapter: dense delta values on a set of rows or columns of one
/// weight. `values` column/row `j` belongs to original index `indices[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdapter {
    pub id: String,
    pub weight: WeightId,
    pub axis: Axis,
    pub indices: Vec<usize>,
    pub values: Matrix,
    pub base_fingerprint: u64,
}

impl SparseAdapter {
    pub fn sparsity(&self) -> usize {
        self.indices.len()
    }

    fn check_well_formed(&self) -> Result<()> {
        let s = self.indices.len();
        let minor = match self.axis {
            Axis::Cols => self.values.cols(),
            Axis::Rows => self.values.rows(),
        };
        if minor != s {
            return Err(Error::Argument(format!(
                "adapter {} has {s} indices but {minor} value slices",
                self.id
            )));
        }
        let mut sorted = self.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != s {
            return Err(Error::Argument(format!("adapter {} has duplicate indices", self.id)));
        }
        Ok(())
    }
}

/// Low-rank adapter registered for the serving comparisons.
#[derive(Debug, Clone)]
pub struct LowRankServeAdapter {
    pub id: String,
    pub weight: WeightId,
    pub u: Matrix,
    pub v: Matrix,
    pub alpha: f64,
    pub base_fingerprint: u64,
}

impl LowRankServeAdapter {
    pub fn delta(&self) -> Matrix {
        self.u.matmul(&self.v.transpose()).expect("rank shapes").scaled(self.alpha)
    }
}

#[derive(Debug, Clone)]
pub enum AnyAdapter {
    Sparse(SparseAdapter),
    LowRank(LowRankServeAdapter),
}

impl AnyAdapter {
    pub fn id(&self) -> &str {
        match self {
            AnyAdapter::Sparse(a) => &a.id,
            AnyAdapter::LowRank(a) => &a.id,
        }
    }

    pub fn weight(&self) -> WeightId {
        match self {
            AnyAdapter::Sparse(a) => a.weight,
            AnyAdapter::LowRank(a) => a.weight,
        }
    }

    pub fn base_fingerprint(&self) -> u64 {
        match self {
            AnyAdapter::Sparse(a) => a.base_fingerprint,
            AnyAdapter::LowRank(a) => a.base_fingerprint,
        }
    }
}

/// Primitive-operation counts for one serving action, with operand dims.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OpCountReport {
    pub matmul: u32,
    pub add: u32,
    pub scatter_add: u32,
    pub scatter: u32,
    pub gather: u32,
    pub operand_dims: Vec<String>,
}

impl OpCountReport {
    fn merge(&mut self, other: OpCountReport) {
        self.matmul += other.matmul;
        self.add += other.add;
        self.scatter_add += other.scatter_add;
        self.scatter += other.scatter;
        self.gather += other.gather;
        self.operand_dims.extend(other.operand_dims);
    }
}

/// Saved original content for exact unfuse.
#[derive(Debug, Clone)]
enum SavedSlice {
    Sparse { axis: Axis, indices: Vec<usize>, values: Matrix },
    Full(Matrix),
}

/// Adapter store plus fusion state: at most one fused adapter per weight,
/// with its saved slice present exactly while fused.
#[derive(Debug, Default)]
pub struct AdapterRegistry {
    adapters: HashMap<String, AnyAdapter>,
    fused: HashMap<WeightId, (String, SavedSlice)>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, adapter: AnyAdapter) -> Result<()> {
        if let AnyAdapter::Sparse(a) = &adapter {
            a.check_well_formed()?;
        }
        let id = adapter.id().to_string();
        if self.adapters.contains_key(&id) {
            return Err(Error::State(format!("adapter {id:?} already registered")));
        }
        self.adapters.insert(id, adapter);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&AnyAdapter> {
        self.adapters.get(id).ok_or_else(|| Error::Lookup(format!("unknown adapter {id:?}")))
    }

    pub fn fused_on(&self, weight: WeightId) -> Option<&str> {
        self.fused.get(&weight).map(|(id, _)| id.as_str())
    }

    pub fn ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.adapters.keys().map(|s| s.as_str()).collect();
        ids.sort_unstable();
        ids
    }

    /// Write `base + V` at the adapter's indices (one scatter_add for sparse,
    /// matmul + add for low-rank), saving the original slice first.
    pub fn fuse(&mut self, model: &mut TransformerModel, id: &str) -> Result<OpCountReport> {
        let adapter = self.get(id)?.clone();
        let weight_id = adapter.weight();
        if let Some((other, _)) = self.fused.get(&weight_id) {
            return Err(Error::State(format!(
                "weight {weight_id} already has adapter {other:?} fused"
            )));
        }
        let w = model.weight_mut(weight_id)?;
        if fingerprint(w) != adapter.base_fingerprint() {
            return Err(Error::Integrity(format!(
                "adapter {id:?} was extracted against a different base for {weight_id}"
            )));
        }
        let mut report = OpCountReport::default();
        let saved = match &adapter {
            AnyAdapter::Sparse(a) => {
                let saved = gather_slice(w, a.axis, &a.indices);
                scatter_add(w, a.axis, &a.indices, &a.values)?;
                report.scatter_add += 1;
                report.operand_dims.push(format!(
                    "scatter_add {}x{} into {}x{}",
                    a.values.rows(),
                    a.values.cols(),
                    w.rows(),
                    w.cols()
                ));
                SavedSlice::Sparse { axis: a.axis, indices: a.indices.clone(), values: saved }
            }
            AnyAdapter::LowRank(a) => {
                let saved = w.clone();
                let delta = a.delta();
                report.matmul += 1;
                report.add += 1;
                report.operand_dims.push(format!(
                    "matmul {}x{} by {}x{}, add {}x{}",
                    a.u.rows(),
                    a.u.cols(),
                    a.v.cols(),
                    a.v.rows(),
                    w.rows(),
                    w.cols()
                ));
                *w = w.add(&delta)?;
                SavedSlice::Full(saved)
            }
        };
        self.fused.insert(weight_id, (id.to_string(), saved));
        Ok(report)
    }

    /// Restore the saved slice bit-exactly. The reported ops are the serving
    /// sequence (scatter_add of `-V`, or matmul + add for low-rank).
    pub fn unfuse(&mut self, model: &mut TransformerModel, id: &str) -> Result<OpCountReport> {
        let adapter = self.get(id)?.clone();
        let weight_id = adapter.weight();
        match self.fused.get(&weight_id) {
            None => {
                return Err(Error::State(format!("no adapter fused on {weight_id}")));
            }
            Some((fused_id, _)) if fused_id != id => {
                return Err(Error::State(format!(
                    "adapter {fused_id:?} is fused on {weight_id}, not {id:?}"
                )));
            }
            Some(_) => {}
        }
        let (_, saved) = self.fused.remove(&weight_id).expect("checked above");
        let w = model.weight_mut(weight_id)?;
        let mut report = OpCountReport::default();
        match saved {
            SavedSlice::Sparse { axis, indices, values } => {
                write_slice(w, axis, &indices, &values)?;
                report.scatter_add += 1;
                report
                    .operand_dims
                    .push(format!("scatter_add {}x{} (restore)", values.rows(), values.cols()));
            }
            SavedSlice::Full(orig) => {
                *w = orig;
                report.matmul += 1;
                report.add += 1;
                report.operand_dims.push("matmul+add (unfuse low-rank)".into());
            }
        }
        Ok(report)
    }

    /// Unfuse `from`, fuse `to`. Switching an adapter onto itself is a no-op.
    pub fn switch(
        &mut self,
        model: &mut TransformerModel,
        from: &str,
        to: &str,
    ) -> Result<OpCountReport> {
        if from == to {
            let weight = self.get(from)?.weight();
            match self.fused_on(weight) {
                Some(f) if f == from => return Ok(OpCountReport::default()),
                _ => return Err(Error::State(format!("adapter {from:?} is not fused"))),
            }
        }
        let mut report = self.unfuse(model, from)?;
        report.merge(self.fuse(model, to)?);
        Ok(report)
    }

    /// Batched single-layer serving over an immutable base weight: per
    /// request `W·x` is shared and the adapter path adds one matmul, one add,
    /// and a gather (input-side adapters) or scatter (output-side adapters);
    /// low-rank adapters add two matmuls and one add.
    pub fn parallel_apply(
        &self,
        base: &Matrix,
        requests: &[(String, Vec<f64>)],
    ) -> Result<(Vec<Vec<f64>>, OpCountReport)> {
        let base_fp = fingerprint(base);
        let mut outputs = Vec::with_capacity(requests.len());
        let mut report = OpCountReport::default();
        for (id, x) in requests {
            let adapter = self.get(id)?;
            if adapter.base_fingerprint() != base_fp {
                return Err(Error::Integrity(format!(
                    "adapter {id:?} does not match the served base weight"
                )));
            }
            // Shared-base GEMM (batched over all requests in a real server,
            // so not part of the per-request adapter op count).
            let mut y = base.matvec(x)?;
            match adapter {
                AnyAdapter::Sparse(a) => match a.axis {
                    Axis::Cols => {
                        // W2 side: gather the input slice, small dense matmul, add.
                        let xs: Vec<f64> = a.indices.iter().map(|&i| x[i]).collect();
                        let contrib = a.values.matvec(&xs)?;
                        for (yi, c) in y.iter_mut().zip(&contrib) {
                            *yi += c;
                        }
                        report.matmul += 1;
                        report.add += 1;
                        report.gather += 1;
                        report.operand_dims.push(format!(
                            "gather {}, matmul {}x{}",
                            a.indices.len(),
                            a.values.rows(),
                            a.values.cols()
                        ));
                    }
                    Axis::Rows => {
                        // W1 side: dense matmul on the full input, scatter into
                        // the selected output rows.
                        let contrib = a.values.matvec(x)?;
                        for (j, &row) in a.indices.iter().enumerate() {
                            y[row] += contrib[j];
                        }
                        report.matmul += 1;
                        report.add += 1;
                        report.scatter += 1;
                        report.operand_dims.push(format!(
                            "matmul {}x{}, scatter {}",
                            a.values.rows(),
                            a.values.cols(),
                            a.indices.len()
                        ));
                    }
                },
                AnyAdapter::LowRank(a) => {
                    let vx = a.v.transpose().matvec(x)?;
                    let contrib = a.u.matvec(&vx)?;
                    for (yi, c) in y.iter_mut().zip(&contrib) {
                        *yi += c * a.alpha;
                    }
                    report.matmul += 2;
                    report.add += 1;
                    report.operand_dims.push(format!(
                        "matmul {}x{}, matmul {}x{}",
                        a.v.cols(),
                        a.v.rows(),
                        a.u.rows(),
                        a.u.cols()
                    ));
                }
            }
            outputs.push(y);
        }
        Ok((outputs, report))
    }
}

fn gather_slice(w: &Matrix, axis: Axis, indices: &[usize]) -> Matrix {
    match axis {
        Axis::Cols => w.select_cols(indices),
        Axis::Rows => w.select_rows(indices),
    }
}

fn scatter_add(w: &mut Matrix, axis: Axis, indices: &[usize], values: &Matrix) -> Result<()> {
    match axis {
        Axis::Cols => {
            if values.rows() != w.rows() || values.cols() != indices.len() {
                return Err(Error::Shape("scatter_add value shape".into()));
            }
            for (j, &col) in indices.iter().enumerate() {
                for i in 0..w.rows() {
                    w.set(i, col, w.get(i, col) + values.get(i, j));
                }
            }
        }
        Axis::Rows => {
            if values.cols() != w.cols() || values.rows() != indices.len() {
                return Err(Error::Shape("scatter_add value shape".into()));
            }
            for (i, &row) in indices.iter().enumerate() {
                for j in 0..w.cols() {
                    w.set(row, j, w.get(row, j) + values.get(i, j));
                }
            }
        }
    }
    Ok(())
}

fn write_slice(w: &mut Matrix, axis: Axis, indices: &[usize], values: &Matrix) -> Result<()> {
    match axis {
        Axis::Cols => {
            for (j, &col) in indices.iter().enumerate() {
                for i in 0..w.rows() {
                    w.set(i, col, values.get(i, j));
                }
            }
        }
        Axis::Rows => {
            for (i, &row) in indices.iter().enumerate() {
                for j in 0..w.cols() {
                    w.set(row, j, values.get(i, j));
                }
            }
        }
    }
    Ok(())
}

/// Extract sparse adapters from a fine-tuned model.
///
/// Both models are in the plan's permuted index space; the returned adapters
/// are keyed to original indices and fingerprinted against the un-permuted
/// base. Any delta outside the trained ranges fails the integrity check —
/// structured training guarantees off-support weights never move.
pub fn extract(
    fine_tuned: &TransformerModel,
    base: &TransformerModel,
    plan: &PermutationPlan,
    id_prefix: &str,
) -> Result<Vec<SparseAdapter>> {
    let inv = inverse_plan(plan);
    let orig_base = apply_permutation(base, &inv)?;
    let orig_ft = apply_permutation(fine_tuned, &inv)?;
    let mut adapters = Vec::new();
    for bp in &plan.blocks {
        let spec = &base.blocks[bp.block];
        let d_h = spec.d_h();
        // Original-space indices of the trained slots.
        let head_scalar: Vec<usize> = bp.head_perm.order()[..bp.n_heads_selected]
            .iter()
            .flat_map(|&head| head * d_h..(head + 1) * d_h)
            .collect();
        let channel_idx: Vec<usize> =
            bp.channel_perm.order()[..bp.n_channels_selected].to_vec();
        for kind in BLOCK_WEIGHTS {
            let id = WeightId::Block { block: bp.block, kind };
            let w_ft = orig_ft.weight(id)?;
            let w_base = orig_base.weight(id)?;
            let delta = w_ft.sub(w_base)?;
            let range = bp.trainable_ranges.iter().find(|r| r.weight == id);
            let (axis, indices) = match range {
                None => {
                    if delta.max_abs() > 1e-12 {
                        return Err(Error::Integrity(format!(
                            "untrained weight {id} moved by {:.3e}",
                            delta.max_abs()
                        )));
                    }
                    continue;
                }
                Some(r) => {
                    let idx = match kind {
                        BlockWeight::Wdown | BlockWeight::Wup | BlockWeight::Wgate => {
                            channel_idx.clone()
                        }
                        _ => head_scalar.clone(),
                    };
                    (r.axis, idx)
                }
            };
            // Off-support columns/rows of a trained weight must also be zero.
            let mut off_max = 0.0f64;
            match axis {
                Axis::Cols => {
                    for j in 0..delta.cols() {
                        if indices.contains(&j) {
                            continue;
                        }
                        for i in 0..delta.rows() {
                            off_max = off_max.max(delta.get(i, j).abs());
                        }
                    }
                }
                Axis::Rows => {
                    for i in 0..delta.rows() {
                        if indices.contains(&i) {
                            continue;
                        }
                        for j in 0..delta.cols() {
                            off_max = off_max.max(delta.get(i, j).abs());
                        }
                    }
                }
            }
            if off_max > 1e-12 {
                return Err(Error::Integrity(format!(
                    "off-support delta {off_max:.3e} on {id} exceeds 1e-12"
                )));
            }
            let values = gather_slice(&delta, axis, &indices);
            adapters.push(SparseAdapter {
                id: format!("{id_prefix}/{id}"),
                weight: id,
                axis,
                indices,
                values,
                base_fingerprint: fingerprint(w_base),
            });
        }
    }
    Ok(adapters)
}

/// Weighted combination of adapters on the same weight: union of supports,
/// overlapping indices sum weighted deltas. Disjoint supports with unit
/// weights preserve each constituent's slices exactly.
pub fn weighted_fuse(adapters: &[&SparseAdapter], weights: &[f64], id: &str) -> Result<SparseAdapter> {
    if adapters.is_empty() {
        return Err(Error::Argument("weighted_fuse needs at least one adapter".into()));
    }
    if adapters.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} adapters but {} weights",
            adapters.len(),
            weights.len()
        )));
    }
    let first = adapters[0];
    for a in adapters {
        if a.weight != first.weight || a.axis != first.axis {
            return Err(Error::Argument(format!(
                "adapters target different weights: {} vs {}",
                a.weight, first.weight
            )));
        }
        if a.base_fingerprint != first.base_fingerprint {
            return Err(Error::Integrity("adapters come from different bases".into()));
        }
    }
    let mut union: Vec<usize> = adapters.iter().flat_map(|a| a.indices.iter().copied()).collect();
    union.sort_unstable();
    union.dedup();
    let major = match first.axis {
        Axis::Cols => first.values.rows(),
        Axis::Rows => first.values.cols(),
    };
    let mut values = match first.axis {
        Axis::Cols => Matrix::zeros(major, union.len()),
        Axis::Rows => Matrix::zeros(union.len(), major),
    };
    for (a, &wt) in adapters.iter().zip(weights) {
        for (j, &idx) in a.indices.iter().enumerate() {
            let pos = union.binary_search(&idx).expect("index in union");
            match first.axis {
                Axis::Cols => {
                    for i in 0..major {
                        values.set(i, pos, values.get(i, pos) + wt * a.values.get(i, j));
                    }
                }
                Axis::Rows => {
                    for c in 0..major {
                        values.set(pos, c, values.get(pos, c) + wt * a.values.get(j, c));
                    }
                }
            }
        }
    }
    Ok(SparseAdapter {
        id: id.to_string(),
        weight: first.weight,
        axis: first.axis,
        indices: union,
        values,
        base_fingerprint: first.base_fingerprint,
    })
}

// ---------------------------------------------------------------------------
// Adapter files

const ADAPTER_MAGIC: &[u8; 8] = b"S2FTADPT";
const ADAPTER_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterSidecar {
    pub schema_version: u32,
    pub id: String,
    pub weight: String,
    pub fingerprint_hex: String,
    pub plan_ref: Option<String>,
}

/// Binary layout: magic, version, weight id (kind byte, block u32, layer
/// u32), axis u8, s u32, value dims u32×2, indices as i32, values row-major
/// f64. A JSON sidecar carries the fingerprint and plan reference.
pub fn save_adapter(path: &Path, adapter: &SparseAdapter, plan_ref: Option<&str>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(ADAPTER_MAGIC)?;
    w.write_all(&ADAPTER_VERSION.to_le_bytes())?;
    match adapter.weight {
        WeightId::Block { block, kind } => {
            w.write_all(&[1u8, kind as u8])?;
            w.write_all(&(block as u32).to_le_bytes())?;
            w.write_all(&0u32.to_le_bytes())?;
        }
        WeightId::Layer { layer } => {
            w.write_all(&[2u8, 0])?;
            w.write_all(&0u32.to_le_bytes())?;
            w.write_all(&(layer as u32).to_le_bytes())?;
        }
    }
    w.write_all(&[match adapter.axis {
        Axis::Cols => 0u8,
        Axis::Rows => 1u8,
    }])?;
    w.write_all(&(adapter.indices.len() as u32).to_le_bytes())?;
    w.write_all(&(adapter.values.rows() as u32).to_le_bytes())?;
    w.write_all(&(adapter.values.cols() as u32).to_le_bytes())?;
    for &i in &adapter.indices {
        w.write_all(&(i as i32).to_le_bytes())?;
    }
    for v in adapter.values.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let sidecar = AdapterSidecar {
        schema_version: ADAPTER_VERSION,
        id: adapter.id.clone(),
        weight: adapter.weight.to_string(),
        fingerprint_hex: format!("{:016x}", adapter.base_fingerprint),
        plan_ref: plan_ref.map(|s| s.to_string()),
    };
    std::fs::write(crate::io::sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_adapter(path: &Path) -> Result<SparseAdapter> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != ADAPTER_MAGIC {
        return Err(Error::Format(format!("bad adapter magic in {}", path.display())));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != ADAPTER_VERSION {
        return Err(Error::Format("unsupported adapter version".into()));
    }
    let mut two = [0u8; 2];
    r.read_exact(&mut two)?;
    r.read_exact(&mut u32buf)?;
    let block = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let layer = u32::from_le_bytes(u32buf) as usize;
    let weight = match two[0] {
        1 => {
            let kind = BLOCK_WEIGHTS
                .into_iter()
                .find(|k| *k as u8 == two[1])
                .ok_or_else(|| Error::Format("bad weight kind".into()))?;
            WeightId::Block { block, kind }
        }
        2 => WeightId::Layer { layer },
        _ => return Err(Error::Format("bad weight tag".into())),
    };
    let mut one = [0u8; 1];
    r.read_exact(&mut one)?;
    let axis = match one[0] {
        0 => Axis::Cols,
        1 => Axis::Rows,
        _ => return Err(Error::Format("bad axis".into())),
    };
    r.read_exact(&mut u32buf)?;
    let s = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let rows = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let cols = u32::from_le_bytes(u32buf) as usize;
    let mut indices = Vec::with_capacity(s);
    for _ in 0..s {
        r.read_exact(&mut u32buf)?;
        indices.push(i32::from_le_bytes(u32buf) as usize);
    }
    let mut data = vec![0f64; rows * cols];
    let mut f64buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut f64buf)?;
        *v = f64::from_le_bytes(f64buf);
    }
    let sidecar: AdapterSidecar =
        serde_json::from_str(&std::fs::read_to_string(crate::io::sidecar_path(path))?)?;
    let base_fingerprint = u64::from_str_radix(&sidecar.fingerprint_hex, 16)
        .map_err(|e| Error::Format(format!("bad fingerprint hex: {e}")))?;
    let adapter = SparseAdapter {
        id: sidecar.id,
        weight,
        axis,
        indices,
        values: Matrix::from_vec(rows, cols, data)?,
        base_fingerprint,
    };
    adapter.check_well_formed()?;
    Ok(adapter)
}
