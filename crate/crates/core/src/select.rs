//! Trainable-parameter budgets and head/channel selection.
//!
//! Selection granularity is a whole attention head on the MHA side and a
//! single inner channel on the FFN side. Scores are read from the consumer
//! projections (Output column blocks, Down columns); budgets split fairly
//! between the two, with the rounding remainder going to the FFN because its
//! granule is smaller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{forward_block, BlockWeight, TransformerBlockSpec, TransformerModel, WeightId};
use crate::rng::{derive_rng, sample_distinct};
use crate::train::{full_grad_oracle, mse_grad};

/// Which projections receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainableScope {
    /// Output and Down only (the default allocation).
    OutputDownOnly,
    /// Every projection touched by a basic coupled structure.
    AllCoupled,
}

impl TrainableScope {
    /// Trainable parameters contributed by one selected head.
    pub fn head_cost(&self, d: usize, d_h: usize) -> usize {
        match self {
            TrainableScope::OutputDownOnly => d * d_h,
            TrainableScope::AllCoupled => 4 * d * d_h,
        }
    }

    /// Trainable parameters contributed by one selected FFN channel.
    pub fn channel_cost(&self, d: usize) -> usize {
        match self {
            TrainableScope::OutputDownOnly => d,
            TrainableScope::AllCoupled => 3 * d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionBudget {
    pub ratio: f64,
    pub heads_per_block: usize,
    pub ffn_channels_per_block: usize,
    pub scope: TrainableScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Random,
    Weight,
    Activation,
    Product,
    Gradient,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Strategy> {
        match s.to_ascii_uppercase().as_str() {
            "R" | "RANDOM" => Ok(Strategy::Random),
            "W" | "WEIGHT" => Ok(Strategy::Weight),
            "A" | "ACTIVATION" => Ok(Strategy::Activation),
            "S" | "PRODUCT" => Ok(Strategy::Product),
            "G" | "GRADIENT" => Ok(Strategy::Gradient),
            other => Err(Error::Argument(format!("unknown strategy {other:?}"))),
        }
    }

    pub fn letter(&self) -> &'static str {
        match self {
            Strategy::Random => "R",
            Strategy::Weight => "W",
            Strategy::Activation => "A",
            Strategy::Product => "S",
            Strategy::Gradient => "G",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Largest,
    Smallest,
    /// Random selection has no polarity.
    Na,
}

impl Polarity {
    pub fn parse(s: &str) -> Result<Polarity> {
        match s.to_ascii_lowercase().as_str() {
            "largest" | "large" => Ok(Polarity::Largest),
            "smallest" | "small" => Ok(Polarity::Smallest),
            "na" | "n/a" => Ok(Polarity::Na),
            other => Err(Error::Argument(format!("unknown polarity {other:?}"))),
        }
    }
}

/// Selected heads and channels for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub mha_heads: Vec<usize>,
    pub ffn_channels: Vec<usize>,
    pub strategy: Strategy,
    pub polarity: Polarity,
    pub seed: Option<u64>,
}

/// Inputs (and targets, for the gradient strategy) used to score heads and
/// channels. Intended to be a small calibration slice, on the order of 1% of
/// the fine-tuning data.
#[derive(Debug, Clone)]
pub struct CalibrationBatch {
    pub inputs: Matrix,
    pub targets: Option<Matrix>,
    pub fraction_of_train: Option<f64>,
}

/// Sparsity level matching a LoRA rank: `s = ⌊r (d_ℓ + d_{ℓ-1}) / d_{ℓ-1}⌋`.
pub fn sparsity_for_rank(rank: usize, d_out: usize, d_in: usize) -> usize {
    rank * (d_out + d_in) / d_in
}

/// Heads/channels whose realized trainable count best matches
/// `ratio × total`, rounding down, half the budget to each module with the
/// remainder going to FFN channels. Ratios above the scope's capacity
/// saturate at full selection.
pub fn budget_from_ratio(
    ratio: f64,
    block: &TransformerBlockSpec,
    scope: TrainableScope,
) -> Result<SelectionBudget> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Argument(format!("ratio {ratio} outside (0, 1]")));
    }
    let d = block.d;
    let d_h = block.d_h();
    let k = block.k_inner;
    let total = 4 * d * d + 3 * k * d;
    let target = (ratio * total as f64).floor() as usize;
    let head_cost = scope.head_cost(d, d_h);
    let channel_cost = scope.channel_cost(d);
    let heads = ((target / 2) / head_cost).min(block.h);
    let channels = ((target - heads * head_cost) / channel_cost).min(k);
    Ok(SelectionBudget { ratio, heads_per_block: heads, ffn_channels_per_block: channels, scope })
}

/// Analytic trainable-parameter count for a (heads, channels) selection.
pub fn trainable_param_count(
    block: &TransformerBlockSpec,
    heads: usize,
    channels: usize,
    scope: TrainableScope,
) -> usize {
    heads * scope.head_cost(block.d, block.d_h()) + channels * scope.channel_cost(block.d)
}

/// Total parameters of one block.
pub fn total_param_count(block: &TransformerBlockSpec) -> usize {
    4 * block.d * block.d + 3 * block.k_inner * block.d
}

fn top_k(scores: &[f64], k: usize, polarity: Polarity) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Argument(format!(
            "cannot select {k} of {} candidates",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    match polarity {
        Polarity::Largest => {
            idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)))
        }
        Polarity::Smallest | Polarity::Na => {
            idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)))
        }
    }
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Per-head and per-channel consumer-side weight norms (Wo column blocks,
/// Wdown columns).
pub fn weight_scores(block: &TransformerBlockSpec) -> (Vec<f64>, Vec<f64>) {
    let d_h = block.d_h();
    let head_scores: Vec<f64> = (0..block.h)
        .map(|i| block.wo.slice_cols(i * d_h, (i + 1) * d_h).frobenius_norm())
        .collect();
    let channel_scores: Vec<f64> = (0..block.k_inner)
        .map(|c| block.wdown.slice_cols(c, c + 1).frobenius_norm())
        .collect();
    (head_scores, channel_scores)
}

/// Per-head and per-channel activation norms over a calibration batch.
pub fn activation_scores(
    block: &TransformerBlockSpec,
    calib: &CalibrationBatch,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, trace) = forward_block(block, &calib.inputs)?;
    let d_h = block.d_h();
    let heads = (0..block.h)
        .map(|i| trace.head_mix.slice_cols(i * d_h, (i + 1) * d_h).frobenius_norm())
        .collect();
    let channels = (0..block.k_inner)
        .map(|c| trace.ffn_inner.slice_cols(c, c + 1).frobenius_norm())
        .collect();
    Ok((heads, channels))
}

/// Per-head and per-channel consumer-side gradient norms from one full
/// backward pass under squared-error loss (no optimizer state retained).
pub fn gradient_scores(
    block: &TransformerBlockSpec,
    calib: &CalibrationBatch,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let targets = calib
        .targets
        .as_ref()
        .ok_or_else(|| Error::Argument("gradient strategy needs calibration targets".into()))?;
    let model = TransformerModel { blocks: vec![block.clone()] };
    let (pred, _) = crate::model::forward_model(&model, &calib.inputs)?;
    let full = full_grad_oracle(&model, &calib.inputs, &mse_grad(&pred, targets))?;
    let d_wo = full.get(WeightId::Block { block: 0, kind: BlockWeight::Wo }).unwrap();
    let d_down = full.get(WeightId::Block { block: 0, kind: BlockWeight::Wdown }).unwrap();
    let d_h = block.d_h();
    let heads = (0..block.h)
        .map(|i| d_wo.slice_cols(i * d_h, (i + 1) * d_h).frobenius_norm())
        .collect();
    let channels =
        (0..block.k_inner).map(|c| d_down.slice_cols(c, c + 1).frobenius_norm()).collect();
    Ok((heads, channels))
}

/// Produce a mask of exactly the budgeted cardinalities for one block.
///
/// `calib` is required for the activation, product, and gradient strategies;
/// the gradient strategy additionally needs targets. The seed is used only by
/// random selection. Equal scores break toward the lower index.
pub fn select(
    strategy: Strategy,
    polarity: Polarity,
    block: &TransformerBlockSpec,
    calib: Option<&CalibrationBatch>,
    budget: &SelectionBudget,
    seed: u64,
) -> Result<SelectionMask> {
    if budget.heads_per_block > block.h || budget.ffn_channels_per_block > block.k_inner {
        return Err(Error::Argument("budget exceeds head/channel counts".into()));
    }
    let (mha_heads, ffn_channels, polarity) = match strategy {
        Strategy::Random => {
            let mut rng = derive_rng(seed, 0x51);
            let heads = sample_distinct(&mut rng, block.h, budget.heads_per_block);
            let channels = sample_distinct(&mut rng, block.k_inner, budget.ffn_channels_per_block);
            (heads, channels, Polarity::Na)
        }
        Strategy::Weight | Strategy::Activation | Strategy::Product | Strategy::Gradient => {
            if polarity == Polarity::Na {
                return Err(Error::Argument(
                    "score-based strategies need a largest/smallest polarity".into(),
                ));
            }
            let (hs, cs) = match strategy {
                Strategy::Weight => weight_scores(block),
                Strategy::Activation => {
                    let calib = calib.ok_or_else(|| {
                        Error::Argument("activation strategy needs a calibration batch".into())
                    })?;
                    activation_scores(block, calib)?
                }
                Strategy::Product => {
                    let calib = calib.ok_or_else(|| {
                        Error::Argument("product strategy needs a calibration batch".into())
                    })?;
                    let (wh, wc) = weight_scores(block);
                    let (ah, ac) = activation_scores(block, calib)?;
                    (
                        wh.iter().zip(&ah).map(|(a, b)| a * b).collect(),
                        wc.iter().zip(&ac).map(|(a, b)| a * b).collect(),
                    )
                }
                Strategy::Gradient => {
                    let calib = calib.ok_or_else(|| {
                        Error::Argument("gradient strategy needs a calibration batch".into())
                    })?;
                    gradient_scores(block, calib)?
                }
                Strategy::Random => unreachable!(),
            };
            (
                top_k(&hs, budget.heads_per_block, polarity)?,
                top_k(&cs, budget.ffn_channels_per_block, polarity)?,
                polarity,
            )
        }
    };
    Ok(SelectionMask {
        mha_heads,
        ffn_channels,
        strategy,
        polarity,
        seed: (strategy == Strategy::Random).then_some(seed),
    })
}

/// Select per block of a stack; block `b` uses stream `b` of the seed and the
/// calibration activations of its own input.
pub fn select_stack(
    strategy: Strategy,
    polarity: Polarity,
    model: &TransformerModel,
    calib: Option<&CalibrationBatch>,
    budget: &SelectionBudget,
    seed: u64,
) -> Result<Vec<SelectionMask>> {
    let mut masks = Vec::with_capacity(model.blocks.len());
    let mut cur_input = calib.map(|c| c.inputs.clone());
    for (b, block) in model.blocks.iter().enumerate() {
        let block_calib = match (&cur_input, calib) {
            (Some(x), Some(c)) => Some(CalibrationBatch {
                inputs: x.clone(),
                targets: c.targets.clone(),
                fraction_of_train: c.fraction_of_train,
            }),
            _ => None,
        };
        masks.push(select(
            strategy,
            polarity,
            block,
            block_calib.as_ref(),
            budget,
            seed.wrapping_add(b as u64),
        )?);
        if let Some(x) = cur_input {
            let (y, _) = forward_block(block, &x)?;
            cur_input = Some(y);
        }
    }
    Ok(masks)
}

/// Mask file: JSON with per-block head and channel indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskFile {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub polarity: Polarity,
    pub seed: Option<u64>,
    pub ratio: f64,
    pub scope: TrainableScope,
    pub blocks: Vec<BlockMaskEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockMaskEntry {
    pub mha_heads: Vec<usize>,
    pub ffn_channels: Vec<usize>,
}

pub fn mask_file(budget: &SelectionBudget, masks: &[SelectionMask]) -> MaskFile {
    MaskFile {
        schema_version: 1,
        strategy: masks.first().map_or(Strategy::Random, |m| m.strategy),
        polarity: masks.first().map_or(Polarity::Na, |m| m.polarity),
        seed: masks.first().and_then(|m| m.seed),
        ratio: budget.ratio,
        scope: budget.scope,
        blocks: masks
            .iter()
            .map(|m| BlockMaskEntry {
                mha_heads: m.mha_heads.clone(),
                ffn_channels: m.ffn_channels.clone(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_block_model, BlockConfig};
    use crate::rng::{gaussian_matrix, rng_from_seed};

    fn model_64() -> TransformerModel {
        init_block_model(&BlockConfig { d: 64, h: 8, k_inner: 128, n_blocks: 1 }, 1).unwrap()
    }

    /// Brute-force trainable-entry count: mark every trainable element.
    fn brute_force_count(
        block: &TransformerBlockSpec,
        heads: &[usize],
        channels: &[usize],
        scope: TrainableScope,
    ) -> usize {
        let d_h = block.d_h();
        let mut count = 0usize;
        let head_rows: Vec<usize> =
            heads.iter().flat_map(|&h| (h * d_h..(h + 1) * d_h)).collect();
        // Wo columns (always trainable for selected heads)
        count += block.wo.rows() * head_rows.len();
        // Wdown columns
        count += block.wdown.rows() * channels.len();
        if scope == TrainableScope::AllCoupled {
            count += 3 * block.wq.cols() * head_rows.len(); // Q, K, V rows
            count += 2 * block.wup.cols() * channels.len(); // Up, Gate rows
        }
        count
    }

    #[test]
    fn rank_sparsity_parity() {
        assert_eq!(sparsity_for_rank(16, 100, 100), 32);
        assert_eq!(sparsity_for_rank(16, 64, 64), 32);
        // For d_out == d_in, V at sparsity s holds exactly the LoRA count.
        let (d_out, d_in, r) = (64usize, 64usize, 16usize);
        let s = sparsity_for_rank(r, d_out, d_in);
        assert_eq!(s * d_in, r * (d_out + d_in));
    }

    #[test]
    fn ratio_one_selects_everything() {
        let m = model_64();
        let b = budget_from_ratio(1.0, &m.blocks[0], TrainableScope::AllCoupled).unwrap();
        assert_eq!(b.heads_per_block, 8);
        assert_eq!(b.ffn_channels_per_block, 128);
    }

    #[test]
    fn budget_realized_within_one_granule() {
        let m = model_64();
        let block = &m.blocks[0];
        let total = total_param_count(block);
        assert_eq!(total, 40960);
        for scope in [TrainableScope::OutputDownOnly, TrainableScope::AllCoupled] {
            for ratio in [0.125, 0.05, 0.21] {
                let b = budget_from_ratio(ratio, block, scope).unwrap();
                let realized =
                    trainable_param_count(block, b.heads_per_block, b.ffn_channels_per_block, scope);
                let brute = brute_force_count(
                    block,
                    &(0..b.heads_per_block).collect::<Vec<_>>(),
                    &(0..b.ffn_channels_per_block).collect::<Vec<_>>(),
                    scope,
                );
                assert_eq!(realized, brute, "analytic vs brute force");
                let target = (ratio * total as f64).floor();
                let granule = scope.head_cost(block.d, block.d_h()).max(scope.channel_cost(block.d));
                assert!(
                    (realized as f64 - target).abs() <= granule as f64,
                    "ratio {ratio}: realized {realized} vs target {target} (granule {granule})"
                );
            }
        }
        // The documented example: 12.5% of a (64, 8, 128) block is exact.
        let b = budget_from_ratio(0.125, block, TrainableScope::OutputDownOnly).unwrap();
        let realized = trainable_param_count(block, b.heads_per_block, b.ffn_channels_per_block, b.scope);
        assert_eq!(realized, 5120);
    }

    #[test]
    fn ratio_out_of_range_rejected() {
        let m = model_64();
        for bad in [0.0, -0.5, 1.5] {
            assert!(budget_from_ratio(bad, &m.blocks[0], TrainableScope::OutputDownOnly).is_err());
        }
    }

    #[test]
    fn random_selection_reproducible_and_seed_sensitive() {
        let cfg = BlockConfig { d: 64, h: 32, k_inner: 64, n_blocks: 1 };
        let m = init_block_model(&cfg, 2).unwrap();
        let budget = SelectionBudget {
            ratio: 0.1,
            heads_per_block: 4,
            ffn_channels_per_block: 8,
            scope: TrainableScope::OutputDownOnly,
        };
        let a = select(Strategy::Random, Polarity::Na, &m.blocks[0], None, &budget, 7).unwrap();
        let b = select(Strategy::Random, Polarity::Na, &m.blocks[0], None, &budget, 7).unwrap();
        assert_eq!(a, b);
        let c = select(Strategy::Random, Polarity::Na, &m.blocks[0], None, &budget, 8).unwrap();
        assert!(a.mha_heads != c.mha_heads || a.ffn_channels != c.ffn_channels);
        assert_eq!(a.mha_heads.len(), 4);
        assert_eq!(a.ffn_channels.len(), 8);
    }

    #[test]
    fn weight_largest_finds_scaled_channel() {
        let mut m = model_64();
        let block = &mut m.blocks[0];
        for i in 0..block.d {
            let v = block.wdown.get(i, 7) * 100.0;
            block.wdown.set(i, 7, v);
        }
        let budget = SelectionBudget {
            ratio: 0.05,
            heads_per_block: 1,
            ffn_channels_per_block: 3,
            scope: TrainableScope::OutputDownOnly,
        };
        let mask =
            select(Strategy::Weight, Polarity::Largest, &m.blocks[0], None, &budget, 0).unwrap();
        assert!(mask.ffn_channels.contains(&7));
    }

    #[test]
    fn activation_polarities_disjoint_and_match_score_sort() {
        let m = model_64();
        let mut rng = rng_from_seed(3);
        let calib = CalibrationBatch {
            inputs: gaussian_matrix(&mut rng, 16, 64, 1.0),
            targets: None,
            fraction_of_train: Some(0.01),
        };
        let budget = SelectionBudget {
            ratio: 0.1,
            heads_per_block: 3,
            ffn_channels_per_block: 10,
            scope: TrainableScope::OutputDownOnly,
        };
        let large =
            select(Strategy::Activation, Polarity::Largest, &m.blocks[0], Some(&calib), &budget, 0)
                .unwrap();
        let small =
            select(Strategy::Activation, Polarity::Smallest, &m.blocks[0], Some(&calib), &budget, 0)
                .unwrap();
        assert!(large.ffn_channels.iter().all(|c| !small.ffn_channels.contains(c)));
        assert!(large.mha_heads.iter().all(|c| !small.mha_heads.contains(c)));

        // Direct score-sort oracle.
        let (_, cs) = activation_scores(&m.blocks[0], &calib).unwrap();
        let mut order: Vec<usize> = (0..cs.len()).collect();
        order.sort_by(|&a, &b| cs[b].partial_cmp(&cs[a]).unwrap());
        let mut want: Vec<usize> = order[..10].to_vec();
        want.sort_unstable();
        assert_eq!(large.ffn_channels, want);
    }

    #[test]
    fn score_strategies_are_deterministic() {
        let m = model_64();
        let mut rng = rng_from_seed(4);
        let calib = CalibrationBatch {
            inputs: gaussian_matrix(&mut rng, 8, 64, 1.0),
            targets: Some(gaussian_matrix(&mut rng, 8, 64, 1.0)),
            fraction_of_train: None,
        };
        let budget = SelectionBudget {
            ratio: 0.1,
            heads_per_block: 2,
            ffn_channels_per_block: 6,
            scope: TrainableScope::OutputDownOnly,
        };
        for strategy in [Strategy::Weight, Strategy::Activation, Strategy::Product, Strategy::Gradient] {
            let a = select(strategy, Polarity::Largest, &m.blocks[0], Some(&calib), &budget, 1)
                .unwrap();
            let b = select(strategy, Polarity::Largest, &m.blocks[0], Some(&calib), &budget, 99)
                .unwrap();
            assert_eq!(a.mha_heads, b.mha_heads, "{strategy:?}");
            assert_eq!(a.ffn_channels, b.ffn_channels, "{strategy:?}");
        }
    }

    #[test]
    fn missing_calibration_errors() {
        let m = model_64();
        let budget = SelectionBudget {
            ratio: 0.1,
            heads_per_block: 1,
            ffn_channels_per_block: 1,
            scope: TrainableScope::OutputDownOnly,
        };
        for strategy in [Strategy::Activation, Strategy::Product, Strategy::Gradient] {
            assert!(matches!(
                select(strategy, Polarity::Largest, &m.blocks[0], None, &budget, 0),
                Err(Error::Argument(_))
            ));
        }
        // Gradient with calibration but without targets also fails.
        let mut rng = rng_from_seed(5);
        let calib = CalibrationBatch {
            inputs: gaussian_matrix(&mut rng, 4, 64, 1.0),
            targets: None,
            fraction_of_train: None,
        };
        assert!(matches!(
            select(Strategy::Gradient, Polarity::Largest, &m.blocks[0], Some(&calib), &budget, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn equal_scores_break_toward_low_indices() {
        // Zero weights give all-equal (zero) scores.
        let cfg = BlockConfig { d: 8, h: 4, k_inner: 6, n_blocks: 1 };
        let mut m = init_block_model(&cfg, 6).unwrap();
        m.blocks[0].wo = Matrix::zeros(8, 8);
        m.blocks[0].wdown = Matrix::zeros(8, 6);
        let budget = SelectionBudget {
            ratio: 0.5,
            heads_per_block: 2,
            ffn_channels_per_block: 3,
            scope: TrainableScope::OutputDownOnly,
        };
        let mask =
            select(Strategy::Weight, Polarity::Largest, &m.blocks[0], None, &budget, 0).unwrap();
        assert_eq!(mask.mha_heads, vec![0, 1]);
        assert_eq!(mask.ffn_channels, vec![0, 1, 2]);
    }

    #[test]
    fn mask_file_roundtrip() {
        let m = model_64();
        let budget = budget_from_ratio(0.125, &m.blocks[0], TrainableScope::OutputDownOnly).unwrap();
        let masks = select_stack(Strategy::Random, Polarity::Na, &m, None, &budget, 3).unwrap();
        let file = mask_file(&budget, &masks);
        let json = serde_json::to_string(&file).unwrap();
        let back: MaskFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.blocks[0].mha_heads, masks[0].mha_heads);
        assert_eq!(back.ratio, 0.125);
    }
}
