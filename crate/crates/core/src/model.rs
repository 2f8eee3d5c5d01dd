//! Model families: a toy LLaMA-style transformer block (MHA + SwiGLU FFN with
//! residuals) and an L-layer deep linear network.
//!
//! Conventions: token matrices are rows = tokens; a weight `W` of shape
//! out×in acts as `x ↦ Wx`, i.e. `X · W^T` on token rows. Attention uses
//! `1/√d_h` scaling and no mask by default (a causal flag exists on
//! [`forward_block_with`]). Layer norms are omitted: the linear-path coupled
//! structure is what matters here and norms would not change it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{gaussian_matrix, rng_from_seed, EngineRng};

/// The seven weight matrices of one transformer block, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockWeight {
    Wq,
    Wk,
    Wv,
    Wo,
    Wup,
    Wgate,
    Wdown,
}

pub const BLOCK_WEIGHTS: [BlockWeight; 7] = [
    BlockWeight::Wq,
    BlockWeight::Wk,
    BlockWeight::Wv,
    BlockWeight::Wo,
    BlockWeight::Wup,
    BlockWeight::Wgate,
    BlockWeight::Wdown,
];

impl BlockWeight {
    pub fn name(&self) -> &'static str {
        match self {
            BlockWeight::Wq => "wq",
            BlockWeight::Wk => "wk",
            BlockWeight::Wv => "wv",
            BlockWeight::Wo => "wo",
            BlockWeight::Wup => "wup",
            BlockWeight::Wgate => "wgate",
            BlockWeight::Wdown => "wdown",
        }
    }
}

/// Identifies one weight matrix anywhere in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightId {
    /// Weight `kind` of block `block` in a transformer stack.
    Block { block: usize, kind: BlockWeight },
    /// Layer `layer` (1-based, matching W_1..W_L) of a deep linear network.
    Layer { layer: usize },
}

impl std::fmt::Display for WeightId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightId::Block { block, kind } => write!(f, "block{}.{}", block, kind.name()),
            WeightId::Layer { layer } => write!(f, "layer{layer}"),
        }
    }
}

/// A contiguous post-permutation index range of one weight matrix that
/// receives gradients and optimizer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableRegion {
    pub weight: WeightId,
    pub axis: crate::linalg::Axis,
    pub start: usize,
    pub end: usize,
}

impl TrainableRegion {
    pub fn new(weight: WeightId, axis: crate::linalg::Axis, start: usize, end: usize) -> Self {
        TrainableRegion { weight, axis, start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    /// Check `0 ≤ start < end ≤ axis length` against an actual weight shape.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        let len = match self.axis {
            crate::linalg::Axis::Rows => rows,
            crate::linalg::Axis::Cols => cols,
        };
        if self.start >= self.end || self.end > len {
            return Err(Error::Argument(format!(
                "region [{}, {}) out of range for axis of length {len} on {}",
                self.start, self.end, self.weight
            )));
        }
        Ok(())
    }
}

/// One toy LLaMA-style block: four MHA projections and three FFN projections.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlockSpec {
    pub d: usize,
    pub h: usize,
    pub k_inner: usize,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub wup: Matrix,
    pub wgate: Matrix,
    pub wdown: Matrix,
}

impl TransformerBlockSpec {
    pub fn d_h(&self) -> usize {
        self.d / self.h
    }

    pub fn weight(&self, kind: BlockWeight) -> &Matrix {
        match kind {
            BlockWeight::Wq => &self.wq,
            BlockWeight::Wk => &self.wk,
            BlockWeight::Wv => &self.wv,
            BlockWeight::Wo => &self.wo,
            BlockWeight::Wup => &self.wup,
            BlockWeight::Wgate => &self.wgate,
            BlockWeight::Wdown => &self.wdown,
        }
    }

    pub fn weight_mut(&mut self, kind: BlockWeight) -> &mut Matrix {
        match kind {
            BlockWeight::Wq => &mut self.wq,
            BlockWeight::Wk => &mut self.wk,
            BlockWeight::Wv => &mut self.wv,
            BlockWeight::Wo => &mut self.wo,
            BlockWeight::Wup => &mut self.wup,
            BlockWeight::Wgate => &mut self.wgate,
            BlockWeight::Wdown => &mut self.wdown,
        }
    }

    /// Expected shape of each weight.
    pub fn weight_shape(&self, kind: BlockWeight) -> (usize, usize) {
        match kind {
            BlockWeight::Wq | BlockWeight::Wk | BlockWeight::Wv | BlockWeight::Wo => {
                (self.d, self.d)
            }
            BlockWeight::Wup | BlockWeight::Wgate => (self.k_inner, self.d),
            BlockWeight::Wdown => (self.d, self.k_inner),
        }
    }

    fn check_shapes(&self) -> Result<()> {
        if !self.d.is_multiple_of(self.h) {
            return Err(Error::Config(format!(
                "model dim {} not divisible by head count {}",
                self.d, self.h
            )));
        }
        for kind in BLOCK_WEIGHTS {
            let w = self.weight(kind);
            let want = self.weight_shape(kind);
            if (w.rows(), w.cols()) != want {
                return Err(Error::Config(format!(
                    "{} has shape {}x{}, expected {}x{}",
                    kind.name(),
                    w.rows(),
                    w.cols(),
                    want.0,
                    want.1
                )));
            }
        }
        Ok(())
    }
}

/// A small stack of transformer blocks sharing one (d, h, k) geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub blocks: Vec<TransformerBlockSpec>,
}

impl TransformerModel {
    pub fn d(&self) -> usize {
        self.blocks[0].d
    }

    pub fn weight(&self, id: WeightId) -> Result<&Matrix> {
        match id {
            WeightId::Block { block, kind } => self
                .blocks
                .get(block)
                .map(|b| b.weight(kind))
                .ok_or_else(|| Error::Lookup(format!("no block {block}"))),
            WeightId::Layer { .. } => {
                Err(Error::Lookup(format!("{id} does not address a transformer weight")))
            }
        }
    }

    pub fn weight_mut(&mut self, id: WeightId) -> Result<&mut Matrix> {
        match id {
            WeightId::Block { block, kind } => self
                .blocks
                .get_mut(block)
                .map(|b| b.weight_mut(kind))
                .ok_or_else(|| Error::Lookup(format!("no block {block}"))),
            WeightId::Layer { .. } => {
                Err(Error::Lookup(format!("{id} does not address a transformer weight")))
            }
        }
    }
}

/// Dimensions and seed for [`init_block_model`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d: usize,
    pub h: usize,
    pub k_inner: usize,
    #[serde(default = "one")]
    pub n_blocks: usize,
}

fn one() -> usize {
    1
}

/// Weights i.i.d. Gaussian with std `1/√fan_in`, drawn in checkpoint order
/// from the engine PRNG; identical seeds give bit-identical models.
pub fn init_block_model(cfg: &BlockConfig, seed: u64) -> Result<TransformerModel> {
    if cfg.d == 0 || cfg.h == 0 || cfg.k_inner == 0 || cfg.n_blocks == 0 {
        return Err(Error::Config("block dims must be positive".into()));
    }
    if !cfg.d.is_multiple_of(cfg.h) {
        return Err(Error::Config(format!(
            "model dim {} not divisible by head count {}",
            cfg.d, cfg.h
        )));
    }
    let mut rng = rng_from_seed(seed);
    let blocks = (0..cfg.n_blocks)
        .map(|_| init_block(cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(TransformerModel { blocks })
}

fn init_block(cfg: &BlockConfig, rng: &mut EngineRng) -> Result<TransformerBlockSpec> {
    let gauss = |rng: &mut EngineRng, rows: usize, cols: usize| {
        gaussian_matrix(rng, rows, cols, 1.0 / (cols as f64).sqrt())
    };
    let block = TransformerBlockSpec {
        d: cfg.d,
        h: cfg.h,
        k_inner: cfg.k_inner,
        wq: gauss(rng, cfg.d, cfg.d),
        wk: gauss(rng, cfg.d, cfg.d),
        wv: gauss(rng, cfg.d, cfg.d),
        wo: gauss(rng, cfg.d, cfg.d),
        wup: gauss(rng, cfg.k_inner, cfg.d),
        wgate: gauss(rng, cfg.k_inner, cfg.d),
        wdown: gauss(rng, cfg.d, cfg.k_inner),
    };
    block.check_shapes()?;
    Ok(block)
}

/// L-layer deep linear network `x ↦ W_L … W_1 x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepLinearNet {
    /// `layers[i]` is `W_{i+1}`, shaped `d_{i+1} × d_i`.
    pub layers: Vec<Matrix>,
}

impl DeepLinearNet {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("deep linear net needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[1].cols() != w[0].rows() {
                return Err(Error::Config(format!(
                    "layer shapes do not chain: {}x{} after {}x{}",
                    w[1].rows(),
                    w[1].cols(),
                    w[0].rows(),
                    w[0].cols()
                )));
            }
        }
        Ok(DeepLinearNet { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `[d_0=p, …, d_L=q]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut out = vec![self.layers[0].cols()];
        out.extend(self.layers.iter().map(|w| w.rows()));
        out
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().rows()
    }

    pub fn layer(&self, layer: usize) -> Result<&Matrix> {
        self.layers
            .get(layer.wrapping_sub(1))
            .ok_or_else(|| Error::Lookup(format!("no layer {layer} (1-based)")))
    }

    pub fn layer_mut(&mut self, layer: usize) -> Result<&mut Matrix> {
        self.layers
            .get_mut(layer.wrapping_sub(1))
            .ok_or_else(|| Error::Lookup(format!("no layer {layer} (1-based)")))
    }

    /// Product `W_L … W_1` of the whole chain.
    pub fn full_product(&self) -> Matrix {
        self.partial_above(1)
    }

    /// `W_L … W_ℓ` (1-based); `ℓ = L+1` gives the identity on the output dim.
    pub fn partial_above(&self, l: usize) -> Matrix {
        let q = self.output_dim();
        let mut acc = Matrix::identity(q);
        for w in self.layers[l.saturating_sub(1)..].iter().rev() {
            acc = acc.matmul(w).expect("chained shapes");
        }
        acc
    }

    /// `W_ℓ … W_1` (1-based); `ℓ = 0` gives the identity on the input dim.
    pub fn partial_below(&self, l: usize) -> Matrix {
        let p = self.input_dim();
        let mut acc = Matrix::identity(p);
        for w in self.layers[..l].iter() {
            acc = w.matmul(&acc).expect("chained shapes");
        }
        acc
    }
}

/// Random chain with std `1/√fan_in` entries per layer.
pub fn init_linear_net(dims: &[usize], seed: u64) -> Result<DeepLinearNet> {
    if dims.len() < 2 {
        return Err(Error::Config("need at least [p, q] dims".into()));
    }
    if dims.contains(&0) {
        return Err(Error::Config("dims must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let layers = dims
        .windows(2)
        .map(|w| gaussian_matrix(&mut rng, w[1], w[0], 1.0 / (w[0] as f64).sqrt()))
        .collect();
    DeepLinearNet::new(layers)
}

/// Everything the forward pass of one block computes between input and output.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub input: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Row-stochastic attention matrix per head.
    pub attn_probs: Vec<Matrix>,
    /// Concatenated per-head mixing outputs `Softmax(QK^T)V`, tokens × d;
    /// columns `[i·d_h, (i+1)·d_h)` belong to head `i`.
    pub head_mix: Matrix,
    pub attn_out: Matrix,
    /// Residual stream between the MHA and FFN modules.
    pub resid_mid: Matrix,
    pub up_pre: Matrix,
    pub gate_pre: Matrix,
    /// `Up(x) ⊙ SiLU(Gate(x))`, tokens × k.
    pub ffn_inner: Matrix,
    pub output: Matrix,
}

/// Per-block traces for a stack.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub blocks: Vec<BlockTrace>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub causal: bool,
}

pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

pub fn silu_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s + z * s * (1.0 - s)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for i in 0..scores.rows() {
        let row = scores.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut exps = vec![0.0; row.len()];
        for (j, &s) in row.iter().enumerate() {
            let e = (s - max).exp();
            exps[j] = e;
            sum += e;
        }
        for (j, e) in exps.iter().enumerate() {
            out.set(i, j, e / sum);
        }
    }
    out
}

pub fn forward_block(spec: &TransformerBlockSpec, x: &Matrix) -> Result<(Matrix, BlockTrace)> {
    forward_block_with(spec, x, ForwardOptions::default())
}

/// Residual + O(per-head Softmax(QK^T/√d_h)V), then residual +
/// Down(Up ⊙ SiLU(Gate)).
pub fn forward_block_with(
    spec: &TransformerBlockSpec,
    x: &Matrix,
    opts: ForwardOptions,
) -> Result<(Matrix, BlockTrace)> {
    if x.cols() != spec.d {
        return Err(Error::Shape(format!(
            "input has {} columns, model dim is {}",
            x.cols(),
            spec.d
        )));
    }
    let t = x.rows();
    let d_h = spec.d_h();
    let q = x.matmul(&spec.wq.transpose())?;
    let k = x.matmul(&spec.wk.transpose())?;
    let v = x.matmul(&spec.wv.transpose())?;

    let mut head_mix = Matrix::zeros(t, spec.d);
    let mut attn_probs = Vec::with_capacity(spec.h);
    let scale = 1.0 / (d_h as f64).sqrt();
    for head in 0..spec.h {
        let cols: Vec<usize> = (head * d_h..(head + 1) * d_h).collect();
        let qh = q.select_cols(&cols);
        let kh = k.select_cols(&cols);
        let vh = v.select_cols(&cols);
        let mut scores = qh.matmul(&kh.transpose())?.scaled(scale);
        if opts.causal {
            for i in 0..t {
                for j in (i + 1)..t {
                    scores.set(i, j, f64::NEG_INFINITY.max(-1e30));
                }
            }
        }
        let probs = softmax_rows(&scores);
        let mix = probs.matmul(&vh)?;
        for i in 0..t {
            for (jj, &c) in cols.iter().enumerate() {
                head_mix.set(i, c, mix.get(i, jj));
            }
        }
        attn_probs.push(probs);
    }

    let attn_out = head_mix.matmul(&spec.wo.transpose())?;
    let resid_mid = x.add(&attn_out)?;

    let up_pre = resid_mid.matmul(&spec.wup.transpose())?;
    let gate_pre = resid_mid.matmul(&spec.wgate.transpose())?;
    let ffn_inner = Matrix::from_fn(t, spec.k_inner, |i, j| {
        up_pre.get(i, j) * silu(gate_pre.get(i, j))
    });
    let ffn_out = ffn_inner.matmul(&spec.wdown.transpose())?;
    let output = resid_mid.add(&ffn_out)?;

    let trace = BlockTrace {
        input: x.clone(),
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
    };
    Ok((output, trace))
}

/// Run a stack of blocks, collecting one trace per block.
pub fn forward_model(model: &TransformerModel, x: &Matrix) -> Result<(Matrix, ActivationTrace)> {
    let mut cur = x.clone();
    let mut traces = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let (out, trace) = forward_block(block, &cur)?;
        traces.push(trace);
        cur = out;
    }
    Ok((cur, ActivationTrace { blocks: traces }))
}

/// `W_L … W_1 x`.
pub fn forward_linear_chain(net: &DeepLinearNet, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != net.input_dim() {
        return Err(Error::Shape(format!(
            "input length {} vs first layer input dim {}",
            x.len(),
            net.input_dim()
        )));
    }
    let mut cur = x.to_vec();
    for w in &net.layers {
        cur = w.matvec(&cur)?;
    }
    Ok(cur)
}
