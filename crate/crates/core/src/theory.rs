//! Theory lab for one-layer adaptation of deep linear networks: the
//! regression data model, closed-form minimum-norm LoRA and structured-sparse
//! solutions (empirical and population), the full fine-tuning excess risk,
//! gradient-descent oracles, and the out-of-distribution bound suite.
//!
//! Notation follows the adapted layer ℓ of a chain `W_L … W_1`: `above` is
//! `W_L … W_{ℓ+1}`, `below` is `W_{ℓ-1} … W_1`, `D = B − W_pre`, and
//! `A = (below · Σ_x · belowᵀ)^{1/2}`. Empirical quantities replace `Σ_x`
//! with the sample covariance and `D Σ_x` with `(Y − W_pre X) Xᵀ / n`, which
//! folds the noise cross-term into the target. The population regime is the
//! same code path with the hats dropped.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::DeepLinearNet;
use crate::rng::{derive_rng, gaussian_matrix, sample_distinct, EngineRng};

// ---------------------------------------------------------------------------
// Task and data

/// Linear regression task pair: in-distribution and out-of-distribution label
/// maps over (usually) a shared covariate distribution.
#[derive(Debug, Clone)]
pub struct RegressionTask {
    pub b_id: Matrix,
    pub b_ood: Matrix,
    pub sigma_x_id: Matrix,
    pub sigma_x_ood: Matrix,
    pub sigma_eps_id: Matrix,
    pub sigma_eps_ood: Matrix,
}

fn check_psd(name: &str, m: &Matrix) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(Error::Argument(format!("{name} covariance must be square")));
    }
    let (_, lam) = m.sym_eig()?;
    let lmax = lam.first().copied().unwrap_or(0.0).max(0.0);
    if lam.iter().any(|&l| l < -1e-10 * lmax.max(1.0)) {
        return Err(Error::Argument(format!(
            "{name} is not PSD (min eigenvalue {:.3e})",
            lam.last().copied().unwrap_or(0.0)
        )));
    }
    Ok(())
}

impl RegressionTask {
    pub fn new(
        b_id: Matrix,
        b_ood: Matrix,
        sigma_x: Matrix,
        sigma_eps_id: Matrix,
        sigma_eps_ood: Matrix,
    ) -> Result<Self> {
        Self::with_covariate_shift(b_id, b_ood, sigma_x.clone(), sigma_x, sigma_eps_id, sigma_eps_ood)
    }

    pub fn with_covariate_shift(
        b_id: Matrix,
        b_ood: Matrix,
        sigma_x_id: Matrix,
        sigma_x_ood: Matrix,
        sigma_eps_id: Matrix,
        sigma_eps_ood: Matrix,
    ) -> Result<Self> {
        if b_id.rows() != b_ood.rows() || b_id.cols() != b_ood.cols() {
            return Err(Error::Argument("label maps must share shape".into()));
        }
        check_psd("sigma_x_id", &sigma_x_id)?;
        check_psd("sigma_x_ood", &sigma_x_ood)?;
        check_psd("sigma_eps_id", &sigma_eps_id)?;
        check_psd("sigma_eps_ood", &sigma_eps_ood)?;
        Ok(RegressionTask { b_id, b_ood, sigma_x_id, sigma_x_ood, sigma_eps_id, sigma_eps_ood })
    }

    pub fn p(&self) -> usize {
        self.b_id.cols()
    }

    pub fn q(&self) -> usize {
        self.b_id.rows()
    }

    pub fn has_covariate_shift(&self) -> bool {
        self.sigma_x_id.max_abs_diff(&self.sigma_x_ood) > 1e-12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskDist {
    InDistribution,
    OutOfDistribution,
}

/// Column-sample dataset `X: p×n`, `Y: q×n`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
}

/// Draw `n` i.i.d. Gaussian samples from `y = Bx + ε` with the task's
/// in-distribution covariances (Gaussian realizes the sub-Gaussian data
/// assumption).
pub fn sample_dataset(task: &RegressionTask, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Argument("need at least one sample".into()));
    }
    let mut rng = derive_rng(seed, 0xda7a);
    sample_from(&task.b_id, &task.sigma_x_id, &task.sigma_eps_id, n, &mut rng)
}

pub fn sample_from(
    b: &Matrix,
    sigma_x: &Matrix,
    sigma_eps: &Matrix,
    n: usize,
    rng: &mut EngineRng,
) -> Result<Dataset> {
    let p = sigma_x.rows();
    let q = sigma_eps.rows();
    let sx = sigma_x.psd_sqrt()?;
    let se = sigma_eps.psd_sqrt()?;
    let x = sx.matmul(&gaussian_matrix(rng, p, n, 1.0))?;
    let eps = se.matmul(&gaussian_matrix(rng, q, n, 1.0))?;
    let y = b.matmul(&x)?.add(&eps)?;
    Ok(Dataset { x, y })
}

// ---------------------------------------------------------------------------
// Layer context and regimes

/// Products around the adapted layer.
#[derive(Debug, Clone)]
pub struct LayerCtx {
    pub layer: usize,
    /// `W_L … W_{ℓ+1}`: q × d_ℓ
    pub above: Matrix,
    /// `W_{ℓ-1} … W_1`: d_{ℓ-1} × p
    pub below: Matrix,
    /// Full pre-trained product q × p.
    pub w_pre: Matrix,
}

pub fn layer_ctx(net: &DeepLinearNet, layer: usize) -> Result<LayerCtx> {
    if layer == 0 || layer > net.depth() {
        return Err(Error::Argument(format!("layer {layer} out of range 1..={}", net.depth())));
    }
    Ok(LayerCtx {
        layer,
        above: net.partial_above(layer + 1),
        below: net.partial_below(layer - 1),
        w_pre: net.full_product(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Population,
    Empirical,
}

/// The moment quantities the closed forms consume; the population regime and
/// the empirical regime build the same struct.
#[derive(Debug, Clone)]
pub struct Moments {
    pub regime: Regime,
    /// `D Σ_x` (population) or `(Y − W_pre X) Xᵀ / n` (empirical).
    pub d_sigma: Matrix,
    /// `Σ_x` or the sample covariance.
    pub sigma: Matrix,
    /// `A = (below Σ belowᵀ)^{1/2}`.
    pub a_sqrt: Matrix,
    pub a_pinv: Matrix,
}

pub fn population_moments(ctx: &LayerCtx, task: &RegressionTask) -> Result<Moments> {
    let d = task.b_id.sub(&ctx.w_pre)?;
    let d_sigma = d.matmul(&task.sigma_x_id)?;
    build_moments(Regime::Population, ctx, d_sigma, task.sigma_x_id.clone())
}

pub fn empirical_moments(ctx: &LayerCtx, sample: &Dataset) -> Result<Moments> {
    let n = sample.x.cols() as f64;
    let resid = sample.y.sub(&ctx.w_pre.matmul(&sample.x)?)?;
    let d_sigma = resid.matmul(&sample.x.transpose())?.scaled(1.0 / n);
    let sigma = sample.x.matmul(&sample.x.transpose())?.scaled(1.0 / n);
    build_moments(Regime::Empirical, ctx, d_sigma, sigma)
}

fn build_moments(regime: Regime, ctx: &LayerCtx, d_sigma: Matrix, sigma: Matrix) -> Result<Moments> {
    let a_sq = ctx.below.matmul(&sigma)?.matmul(&ctx.below.transpose())?;
    let a_sqrt = a_sq.add(&a_sq.transpose())?.scaled(0.5).psd_sqrt()?;
    let a_pinv = a_sqrt.pinv()?;
    Ok(Moments { regime, d_sigma, sigma, a_sqrt, a_pinv })
}

// ---------------------------------------------------------------------------
// Solutions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MethodKind {
    Lora,
    S2ft,
    FullFt,
    Pretrained,
}

/// Adaptation `W_ℓ → W_ℓ + U Vᵀ`. For the structured-sparse method `U` is
/// exactly the column-selection matrix of `S`.
#[derive(Debug, Clone)]
pub struct AdaptationSolution {
    pub method: MethodKind,
    pub layer: usize,
    pub u: Matrix,
    pub v: Matrix,
    pub s_set: Option<Vec<usize>>,
    pub regime: Regime,
    /// Set when the top-r eigengap of the LoRA target is degenerate
    /// (σ_r − σ_{r+1} < 1e-9 σ_1), making the rank-r truncation ill-defined.
    pub ill_conditioned: bool,
}

impl AdaptationSolution {
    pub fn delta(&self) -> Matrix {
        self.u.matmul(&self.v.transpose()).expect("adaptation shapes")
    }

    pub fn pretrained(net: &DeepLinearNet, layer: usize) -> Result<Self> {
        let w = net.layer(layer)?;
        Ok(AdaptationSolution {
            method: MethodKind::Pretrained,
            layer,
            u: Matrix::zeros(w.rows(), 1),
            v: Matrix::zeros(w.cols(), 1),
            s_set: None,
            regime: Regime::Population,
            ill_conditioned: false,
        })
    }
}

/// Column-selection matrix `[e_{a_1}; …; e_{a_s}]`.
pub fn selection_matrix(d_l: usize, s_set: &[usize]) -> Matrix {
    let mut u = Matrix::zeros(d_l, s_set.len());
    for (j, &a) in s_set.iter().enumerate() {
        u.set(a, j, 1.0);
    }
    u
}

/// Left singular vectors for singular values above the default rank cutoff.
fn phi_star(m: &Matrix) -> Result<Matrix> {
    let svd = m.svd()?;
    let rank = svd.rank_default();
    let cols: Vec<usize> = (0..rank).collect();
    Ok(svd.left.select_cols(&cols))
}

/// Minimum-norm LoRA solution:
/// `U Vᵀ = above† · SVD_r(above above† D̂Σ̂ belowᵀ Â†) · Â†`, factored into
/// balanced `U, V` through the SVD of the product.
pub fn solve_lora_min_norm(
    net: &DeepLinearNet,
    task_moments: &Moments,
    layer: usize,
    rank: usize,
) -> Result<AdaptationSolution> {
    let ctx = layer_ctx(net, layer)?;
    let (d_l, d_lm1) = (ctx.above.cols(), ctx.below.rows());
    if rank == 0 || rank > d_l.min(d_lm1) {
        return Err(Error::Argument(format!("rank {rank} out of range 1..={}", d_l.min(d_lm1))));
    }
    let above_pinv = ctx.above.pinv()?;
    let proj = ctx.above.matmul(&above_pinv)?;
    let target = proj
        .matmul(&task_moments.d_sigma)?
        .matmul(&ctx.below.transpose())?
        .matmul(&task_moments.a_pinv)?;
    let svd = target.svd()?;
    let sigma1 = svd.singular.first().copied().unwrap_or(0.0);
    let gap_ok = rank >= svd.singular.len()
        || sigma1 == 0.0
        || (svd.singular[rank - 1] - svd.singular[rank]) >= 1e-9 * sigma1;
    let mut truncated = Matrix::zeros(target.rows(), target.cols());
    for t in 0..rank.min(svd.singular.len()) {
        let s = svd.singular[t];
        if s == 0.0 {
            break;
        }
        for i in 0..target.rows() {
            for j in 0..target.cols() {
                let v = truncated.get(i, j) + svd.left.get(i, t) * s * svd.right_t.get(t, j);
                truncated.set(i, j, v);
            }
        }
    }
    let product = above_pinv.matmul(&truncated)?.matmul(&task_moments.a_pinv)?;
    // Balanced factors via the product's own SVD.
    let psvd = product.svd()?;
    let r_eff = rank.min(psvd.singular.len());
    let mut u = Matrix::zeros(d_l, rank);
    let mut v = Matrix::zeros(d_lm1, rank);
    for t in 0..r_eff {
        let root = psvd.singular[t].sqrt();
        for i in 0..d_l {
            u.set(i, t, psvd.left.get(i, t) * root);
        }
        for j in 0..d_lm1 {
            v.set(j, t, psvd.right_t.get(t, j) * root);
        }
    }
    Ok(AdaptationSolution {
        method: MethodKind::Lora,
        layer,
        u,
        v,
        s_set: None,
        regime: task_moments.regime,
        ill_conditioned: !gap_ok,
    })
}

/// Minimum-norm structured-sparse solution for fixed `U_S`:
/// `U_S Vᵀ = U_S (above U_S)† D̂Σ̂ belowᵀ (Â†)²`. Rows outside `S` are
/// exactly zero by construction.
pub fn solve_sft_min_norm(
    net: &DeepLinearNet,
    task_moments: &Moments,
    layer: usize,
    s_set: &[usize],
) -> Result<AdaptationSolution> {
    let ctx = layer_ctx(net, layer)?;
    let d_l = ctx.above.cols();
    if s_set.is_empty() {
        return Err(Error::Argument("selection set must be non-empty".into()));
    }
    let mut sorted = s_set.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != s_set.len() || sorted.iter().any(|&a| a >= d_l) {
        return Err(Error::Argument("selection set must be distinct and within [d_ℓ]".into()));
    }
    let u_s = selection_matrix(d_l, &sorted);
    let wu = ctx.above.matmul(&u_s)?;
    let vt = wu
        .pinv()?
        .matmul(&task_moments.d_sigma)?
        .matmul(&ctx.below.transpose())?
        .matmul(&task_moments.a_pinv)?
        .matmul(&task_moments.a_pinv)?;
    Ok(AdaptationSolution {
        method: MethodKind::S2ft,
        layer,
        u: u_s,
        v: vt.transpose(),
        s_set: Some(sorted),
        regime: task_moments.regime,
        ill_conditioned: false,
    })
}

/// Full fine-tuning of layer ℓ: `Δ = above† D̂Σ̂ belowᵀ (Â†)²`, represented
/// with `V = I`.
pub fn solve_full(
    net: &DeepLinearNet,
    task_moments: &Moments,
    layer: usize,
) -> Result<AdaptationSolution> {
    let ctx = layer_ctx(net, layer)?;
    let delta = ctx
        .above
        .pinv()?
        .matmul(&task_moments.d_sigma)?
        .matmul(&ctx.below.transpose())?
        .matmul(&task_moments.a_pinv)?
        .matmul(&task_moments.a_pinv)?;
    let d_lm1 = ctx.below.rows();
    Ok(AdaptationSolution {
        method: MethodKind::FullFt,
        layer,
        u: delta,
        v: Matrix::identity(d_lm1),
        s_set: None,
        regime: task_moments.regime,
        ill_conditioned: false,
    })
}

/// Closed-form excess risk `tr((B − W_adapted) Σ_x (B − W_adapted)ᵀ)` of the
/// adapted model on the chosen distribution. No sampling.
pub fn excess_risk(
    net: &DeepLinearNet,
    solution: &AdaptationSolution,
    task: &RegressionTask,
    which: TaskDist,
) -> Result<f64> {
    let ctx = layer_ctx(net, solution.layer)?;
    let adapted = match solution.method {
        MethodKind::Pretrained => ctx.w_pre.clone(),
        _ => ctx
            .w_pre
            .add(&ctx.above.matmul(&solution.delta())?.matmul(&ctx.below)?)?,
    };
    let (b, sigma) = match which {
        TaskDist::InDistribution => (&task.b_id, &task.sigma_x_id),
        TaskDist::OutOfDistribution => (&task.b_ood, &task.sigma_x_ood),
    };
    let resid = b.sub(&adapted)?;
    Ok(resid.matmul(sigma)?.matmul(&resid.transpose())?.trace())
}

/// Population in-distribution excess risk of full layer-ℓ fine-tuning, via
/// the closed two-term formula (a second route, independent of
/// [`solve_full`] + [`excess_risk`]).
pub fn full_ft_population_risk(net: &DeepLinearNet, task: &RegressionTask, layer: usize) -> Result<f64> {
    let ctx = layer_ctx(net, layer)?;
    let moments = population_moments(&ctx, task)?;
    let sigma_half = task.sigma_x_id.psd_sqrt()?;
    let d = task.b_id.sub(&ctx.w_pre)?;
    let d_half = d.matmul(&sigma_half)?;
    // G = Σ^{1/2} belowᵀ (A²)† below Σ^{1/2}, the projector onto the row
    // space of below·Σ^{1/2}.
    let a2_pinv = moments.a_pinv.matmul(&moments.a_pinv)?;
    let g = sigma_half
        .matmul(&ctx.below.transpose())?
        .matmul(&a2_pinv)?
        .matmul(&ctx.below)?
        .matmul(&sigma_half)?;
    let p = g.rows();
    let term1 = d_half.matmul(&Matrix::identity(p).sub(&g)?)?.frobenius_norm().powi(2);
    let phi = phi_star(&ctx.above)?;
    let proj = phi.matmul(&phi.transpose())?;
    let q = proj.rows();
    let m2 = Matrix::identity(q)
        .sub(&proj)?
        .matmul(&d.matmul(&task.sigma_x_id)?)?
        .matmul(&ctx.below.transpose())?
        .matmul(&a2_pinv)?
        .matmul(&ctx.below)?
        .matmul(&sigma_half)?;
    Ok(term1 + m2.frobenius_norm().powi(2))
}

/// Label-shift ratio of the distribution-shift assumption:
/// `ε² = ‖Φ″_S Φ″_Sᵀ (B_ood − B_id) Σ_x^{1/2}‖_F² / 𝓔_ood(f_pre)`, where
/// `Φ″_S = Φ_*(above · U_S)`. Requires a shared covariate distribution.
pub fn assumption_shift_epsilon(
    net: &DeepLinearNet,
    task: &RegressionTask,
    layer: usize,
    s_set: &[usize],
) -> Result<f64> {
    if task.has_covariate_shift() {
        return Err(Error::Precondition(
            "distribution-shift assumption requires a shared covariate distribution".into(),
        ));
    }
    let ctx = layer_ctx(net, layer)?;
    let u_s = selection_matrix(ctx.above.cols(), s_set);
    let wu = ctx.above.matmul(&u_s)?;
    let phi = phi_star(&wu)?;
    let shift = task.b_ood.sub(&task.b_id)?;
    let sigma_half = task.sigma_x_id.psd_sqrt()?;
    let projected = phi
        .matmul(&phi.transpose())?
        .matmul(&shift)?
        .matmul(&sigma_half)?;
    let numerator = projected.frobenius_norm().powi(2);
    let pre = AdaptationSolution::pretrained(net, layer)?;
    let denom = excess_risk(net, &pre, task, TaskDist::OutOfDistribution)?;
    if denom <= 1e-300 {
        if numerator <= 1e-300 {
            return Ok(0.0);
        }
        return Err(Error::Precondition(
            "pre-trained OOD excess risk is zero but the projected shift is not".into(),
        ));
    }
    Ok(numerator / denom)
}

/// Approximate-sparsity ratio of the layer-ℓ residual over a selection
/// (diagnostic for the sparsity hypothesis; never asserted):
/// `δ² = Σ_{a∉S} ‖e_aᵀ above† D Σ_x^{1/2}‖² / ‖above† D Σ_x^{1/2}‖_F²`.
pub fn approx_sparsity_delta_sq(
    net: &DeepLinearNet,
    task: &RegressionTask,
    layer: usize,
    s_set: &[usize],
) -> Result<f64> {
    let ctx = layer_ctx(net, layer)?;
    let d = task.b_id.sub(&ctx.w_pre)?;
    let resid = ctx.above.pinv()?.matmul(&d)?.matmul(&task.sigma_x_id.psd_sqrt()?)?;
    let total = resid.frobenius_norm().powi(2);
    if total <= 1e-300 {
        return Ok(0.0);
    }
    let mut off = 0.0;
    for a in 0..resid.rows() {
        if s_set.contains(&a) {
            continue;
        }
        off += resid.row(a).iter().map(|v| v * v).sum::<f64>();
    }
    Ok(off / total)
}

// ---------------------------------------------------------------------------
// Gradient-descent oracle

#[derive(Debug, Clone)]
pub struct GdHyper {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Initialization scale for the LoRA `U` factor.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for GdHyper {
    fn default() -> Self {
        GdHyper { max_iters: 2_000_000, grad_tol: 1e-10, init_scale: 1e-2, seed: 0 }
    }
}

fn sym_opnorm(m: &Matrix) -> Result<f64> {
    let (_, lam) = m.sym_eig()?;
    Ok(lam.iter().fold(0.0f64, |a, &l| a.max(l.abs())))
}

fn frob_dot(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

/// Gradient descent on a pair of matrices with Barzilai–Borwein steps and a
/// non-monotone (10-step window) Armijo safeguard. Deterministic: no entropy
/// beyond the caller's initialization.
#[allow(clippy::too_many_arguments)]
fn descend(
    mut x: Matrix,
    mut y: Matrix,
    grad_x: impl Fn(&Matrix, &Matrix) -> Result<Matrix>,
    grad_y: impl Fn(&Matrix, &Matrix) -> Result<Matrix>,
    objective: impl Fn(&Matrix, &Matrix) -> Result<f64>,
    step0: f64,
    hyper: &GdHyper,
    what: &str,
) -> Result<(Matrix, Matrix)> {
    let mut fhist = vec![objective(&x, &y)?];
    let mut prev: Option<(Matrix, Matrix, Matrix, Matrix)> = None;
    let mut step = step0;
    let mut gnorm = f64::INFINITY;
    for iter in 0..hyper.max_iters {
        let gx = grad_x(&x, &y)?;
        let gy = grad_y(&x, &y)?;
        let g2 = gx.frobenius_norm().powi(2) + gy.frobenius_norm().powi(2);
        gnorm = g2.sqrt();
        if gnorm <= hyper.grad_tol {
            return Ok((x, y));
        }
        let mut t = match &prev {
            Some((px, py, pgx, pgy)) => {
                let sx = x.sub(px).expect("shapes");
                let sy = y.sub(py).expect("shapes");
                let dgx = gx.sub(pgx).expect("shapes");
                let dgy = gy.sub(pgy).expect("shapes");
                let ss = frob_dot(&sx, &sx) + frob_dot(&sy, &sy);
                let sg = frob_dot(&sx, &dgx) + frob_dot(&sy, &dgy);
                let gg = frob_dot(&dgx, &dgx) + frob_dot(&dgy, &dgy);
                let bb = if iter % 2 == 0 {
                    if sg > 0.0 { ss / sg } else { step }
                } else if gg > 0.0 {
                    sg / gg
                } else {
                    step
                };
                if bb.is_finite() && bb > 0.0 { bb } else { step }
            }
            None => step,
        };
        let fmax = fhist.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // Near the optimum the required decrease sinks below the rounding
        // noise of the objective itself; the allowance keeps the safeguard
        // from rejecting every Barzilai–Borwein step there.
        let noise = 32.0 * f64::EPSILON * fmax.abs().max(1e-300);
        let (nx, ny, nf) = loop {
            let cx = x.sub(&gx.scaled(t)).expect("shapes");
            let cy = y.sub(&gy.scaled(t)).expect("shapes");
            let cf = objective(&cx, &cy)?;
            if cf <= fmax - 1e-4 * t * g2 + noise || t <= 1e-18 {
                break (cx, cy, cf);
            }
            t *= 0.5;
        };
        prev = Some((x, y, gx, gy));
        x = nx;
        y = ny;
        step = t;
        fhist.push(nf);
        if fhist.len() > 10 {
            fhist.remove(0);
        }
    }
    Err(Error::Numeric(format!(
        "{what} GD did not reach tol (grad {gnorm:.3e} after {} iters)",
        hyper.max_iters
    )))
}

/// Full-batch gradient descent on the empirical risk, run to a gradient-norm
/// tolerance. The structured-sparse path trains `V` only from zero init (the
/// convex case); the LoRA path trains `(U, V)` from small-Gaussian/zero init
/// with Armijo backtracking.
pub fn gd_oracle(
    net: &DeepLinearNet,
    sample: &Dataset,
    layer: usize,
    method: MethodKind,
    rank_or_s: RankOrSet<'_>,
    hyper: &GdHyper,
) -> Result<AdaptationSolution> {
    let ctx = layer_ctx(net, layer)?;
    let n = sample.x.cols() as f64;
    let below_x = ctx.below.matmul(&sample.x)?; // d_{ℓ-1} × n
    let base = ctx
        .above
        .matmul(net.layer(layer)?)?
        .matmul(&below_x)?
        .sub(&sample.y)?; // q × n
    match (method, rank_or_s) {
        (MethodKind::S2ft, RankOrSet::Set(s_set)) => {
            let u_s = selection_matrix(ctx.above.cols(), s_set);
            let c = ctx.above.matmul(&u_s)?; // q × s
            // Quadratic in V: ∇ = (2/n) (P baseᵀ C + (P Pᵀ) V (Cᵀ C)).
            let g_const = below_x.matmul(&base.transpose())?.matmul(&c)?.scaled(2.0 / n);
            let h_p = below_x.matmul(&below_x.transpose())?.scaled(2.0 / n);
            let h_c = c.transpose().matmul(&c)?;
            let lips = sym_opnorm(&h_p)? * sym_opnorm(&h_c)?;
            let zero_v = Matrix::zeros(ctx.below.rows(), s_set.len());
            if lips == 0.0 {
                return Ok(AdaptationSolution {
                    method,
                    layer,
                    u: u_s,
                    v: zero_v,
                    s_set: Some(s_set.to_vec()),
                    regime: Regime::Empirical,
                    ill_conditioned: false,
                });
            }
            let grad = |v: &Matrix| -> Result<Matrix> {
                g_const.add(&h_p.matmul(v)?.matmul(&h_c)?)
            };
            // Objective up to a constant: ⟨V, G0⟩ + ½⟨V, H_p V H_c⟩.
            let objective = |v: &Matrix| -> Result<f64> {
                let quad = h_p.matmul(v)?.matmul(&h_c)?;
                Ok(frob_dot(v, &g_const) + 0.5 * frob_dot(v, &quad))
            };
            let v = descend(
                zero_v.clone(),
                Matrix::zeros(1, 1),
                |v, _| grad(v),
                |_, _| Ok(Matrix::zeros(1, 1)),
                |v, _| objective(v),
                1.0 / lips,
                hyper,
                "sparse",
            )?
            .0;
            Ok(AdaptationSolution {
                method,
                layer,
                u: u_s,
                v,
                s_set: Some(s_set.to_vec()),
                regime: Regime::Empirical,
                ill_conditioned: false,
            })
        }
        (MethodKind::Lora, RankOrSet::Rank(rank)) => {
            let mut rng = derive_rng(hyper.seed, 0x6d);
            let d_l = ctx.above.cols();
            let d_lm1 = ctx.below.rows();
            let u0 = gaussian_matrix(&mut rng, d_l, rank, hyper.init_scale);
            let v0 = Matrix::zeros(d_lm1, rank);
            let h_c = ctx.above.transpose().matmul(&ctx.above)?; // d_ℓ²
            let h_p2 = below_x.matmul(&below_x.transpose())?.scaled(2.0 / n);
            let g_const = ctx
                .above
                .transpose()
                .matmul(&base)?
                .matmul(&below_x.transpose())?
                .scaled(2.0 / n);
            let d_z = |u: &Matrix, v: &Matrix| -> Result<Matrix> {
                let z = u.matmul(&v.transpose())?;
                g_const.add(&h_c.matmul(&z)?.matmul(&h_p2)?)
            };
            // Objective up to a constant, in terms of Z = U Vᵀ.
            let objective = |u: &Matrix, v: &Matrix| -> Result<f64> {
                let z = u.matmul(&v.transpose())?;
                let quad = h_c.matmul(&z)?.matmul(&h_p2)?;
                Ok(frob_dot(&z, &g_const) + 0.5 * frob_dot(&z, &quad))
            };
            let step0 =
                1.0 / (sym_opnorm(&h_c)? * sym_opnorm(&h_p2)?).max(f64::MIN_POSITIVE);
            let (u, v) = descend(
                u0,
                v0,
                |u, v| d_z(u, v)?.matmul(v),
                |u, v| d_z(u, v)?.transpose().matmul(u),
                objective,
                step0,
                hyper,
                "LoRA",
            )?;
            Ok(AdaptationSolution {
                method,
                layer,
                u,
                v,
                s_set: None,
                regime: Regime::Empirical,
                ill_conditioned: false,
            })
        }
        _ => Err(Error::Argument(
            "gd_oracle supports S2ft with a set and Lora with a rank".into(),
        )),
    }
}

pub enum RankOrSet<'a> {
    Rank(usize),
    Set(&'a [usize]),
}

/// Empirical risk of an adaptation on a sample, `(1/n)‖Y − f(X)‖_F²`.
pub fn empirical_risk(
    net: &DeepLinearNet,
    solution: &AdaptationSolution,
    sample: &Dataset,
) -> Result<f64> {
    let ctx = layer_ctx(net, solution.layer)?;
    let adapted = match solution.method {
        MethodKind::Pretrained => ctx.w_pre.clone(),
        _ => ctx.w_pre.add(&ctx.above.matmul(&solution.delta())?.matmul(&ctx.below)?)?,
    };
    let resid = sample.y.sub(&adapted.matmul(&sample.x)?)?;
    Ok(resid.frobenius_norm().powi(2) / sample.x.cols() as f64)
}

// ---------------------------------------------------------------------------
// Theorem-1 diagnostics (reported, never asserted: constants are hidden)

#[derive(Debug, Clone, Serialize)]
pub struct Theorem1Diagnostics {
    pub full_risk: f64,
    pub sft_bias_sq: f64,
    pub lora_bias_sq: f64,
    /// `s · d_{ℓ-1} / n` and `r (d_ℓ + d_{ℓ-1}) / n` shape factors.
    pub sft_variance_shape: f64,
    pub lora_variance_shape: f64,
    pub noise_scale: f64,
}

pub fn theorem1_diagnostics(
    net: &DeepLinearNet,
    task: &RegressionTask,
    layer: usize,
    s_set: &[usize],
    rank: usize,
    n: usize,
) -> Result<Theorem1Diagnostics> {
    let ctx = layer_ctx(net, layer)?;
    let moments = population_moments(&ctx, task)?;
    let full_risk = full_ft_population_risk(net, task, layer)?;
    let m = phi_star(&ctx.above)?;
    let proj_all = m.matmul(&m.transpose())?;
    let big_m = proj_all
        .matmul(&moments.d_sigma)?
        .matmul(&ctx.below.transpose())?
        .matmul(&moments.a_pinv)?;
    let u_s = selection_matrix(ctx.above.cols(), s_set);
    let phi_s = phi_star(&ctx.above.matmul(&u_s)?)?;
    let proj_s = phi_s.matmul(&phi_s.transpose())?;
    let sft_bias = proj_s.matmul(&big_m)?.sub(&big_m)?.frobenius_norm().powi(2) + full_risk;
    let lora_bias =
        big_m.sub(&big_m.truncated_svd(rank.min(big_m.rows().min(big_m.cols())))?)?.frobenius_norm().powi(2)
            + full_risk;
    let d_l = ctx.above.cols();
    let d_lm1 = ctx.below.rows();
    let (_, eps_eigs) = task.sigma_eps_id.sym_eig()?;
    let d = task.b_id.sub(&ctx.w_pre)?;
    let sigma_f = d.matmul(&task.sigma_x_id)?.matmul(&d.transpose())?;
    let (_, f_eigs) = sigma_f.sym_eig()?;
    Ok(Theorem1Diagnostics {
        full_risk,
        sft_bias_sq: sft_bias,
        lora_bias_sq: lora_bias,
        sft_variance_shape: (s_set.len() * d_lm1) as f64 / n as f64,
        lora_variance_shape: (rank * (d_l + d_lm1)) as f64 / n as f64,
        noise_scale: eps_eigs.first().copied().unwrap_or(0.0)
            + f_eigs.first().copied().unwrap_or(0.0),
    })
}

// ---------------------------------------------------------------------------
// OOD bound suite

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ShiftMode {
    /// Unconstrained Gaussian label shift.
    Generic,
    /// Shift inside span(above · U_S).
    InsideSpan,
    /// Shift orthogonal to span(above · U_S).
    OutsideSpan,
}

#[derive(Debug, Clone)]
pub struct Theorem2Config {
    pub dims: Vec<usize>,
    /// 1-based adapted layer; defaults to the middle.
    pub layer: Option<usize>,
    pub trials: usize,
    pub seed: u64,
    pub shift: ShiftMode,
    pub shift_scale: f64,
    /// Inject a covariate shift of this relative size (hypothesis violation;
    /// used as a negative control).
    pub covariate_shift: f64,
    pub sparsity: Option<usize>,
    pub tol: f64,
    /// Identity covariate covariance when false; random PSD otherwise.
    pub random_sigma: bool,
}

impl Default for Theorem2Config {
    fn default() -> Self {
        Theorem2Config {
            dims: vec![6, 8, 6],
            layer: None,
            trials: 100,
            seed: 7,
            shift: ShiftMode::Generic,
            shift_scale: 1.0,
            covariate_shift: 0.0,
            sparsity: None,
            tol: 1e-8,
            random_sigma: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub name: String,
    pub pass: bool,
    /// Slack of the inequality; negative means violated.
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskReport {
    pub trial: usize,
    pub s: usize,
    pub r: usize,
    pub sft_excess_id: f64,
    pub sft_excess_ood: f64,
    pub lora_excess_id: f64,
    pub lora_excess_ood: f64,
    pub full_excess_id: f64,
    pub pretrained_id: f64,
    pub pretrained_ood: f64,
    pub label_shift_sq: f64,
    pub epsilon_sq: f64,
    /// Approximate-sparsity ratio of the instance's residual over the chosen
    /// S (diagnostic only).
    pub approx_sparsity_delta_sq: f64,
    pub regenerated: usize,
    pub bound_checks: Vec<BoundCheck>,
}

impl RiskReport {
    pub fn all_pass(&self) -> bool {
        self.bound_checks.iter().all(|c| c.pass)
    }
}

#[derive(Debug, Clone)]
pub struct TheoryInstance {
    pub net: DeepLinearNet,
    pub task: RegressionTask,
    pub layer: usize,
    pub s_set: Vec<usize>,
    pub rank: usize,
    pub regenerated: usize,
}

fn random_psd(rng: &mut EngineRng, p: usize) -> Result<Matrix> {
    let g = gaussian_matrix(rng, p, p, 1.0);
    let q = g.svd()?.left;
    let lam: Vec<f64> = (0..p)
        .map(|_| 0.5 + 1.5 * (gaussian_matrix(rng, 1, 1, 1.0).get(0, 0).tanh() * 0.5 + 0.5))
        .collect();
    q.matmul(&Matrix::diag(&lam))?.matmul(&q.transpose())
}

/// Construct one hypothesis-satisfying instance: `B_id = above B̃ below` for
/// random `B̃`, shared `Σ_x`, `r = rank(Σ_f)` and `s ≤ rank(Σ_f)`. Instances
/// with a degenerate eigengap or zero residual are regenerated.
pub fn generate_instance(cfg: &Theorem2Config, rng: &mut EngineRng) -> Result<TheoryInstance> {
    let layer = cfg.layer.unwrap_or((cfg.dims.len() - 1).div_ceil(2));
    let p = cfg.dims[0];
    let q = *cfg.dims.last().unwrap();
    let mut regenerated = 0;
    for _attempt in 0..64 {
        let layers: Vec<Matrix> = cfg
            .dims
            .windows(2)
            .map(|w| gaussian_matrix(rng, w[1], w[0], 1.0 / (w[0] as f64).sqrt()))
            .collect();
        let net = DeepLinearNet::new(layers)?;
        let ctx = layer_ctx(&net, layer)?;
        let d_l = ctx.above.cols();
        let d_lm1 = ctx.below.rows();
        let sigma_x = if cfg.random_sigma { random_psd(rng, p)? } else { Matrix::identity(p) };
        let sigma_half = sigma_x.psd_sqrt()?;
        let b_tilde = gaussian_matrix(rng, d_l, d_lm1, 1.0);
        let b_id = ctx.above.matmul(&b_tilde)?.matmul(&ctx.below)?;
        let d = b_id.sub(&ctx.w_pre)?;
        let d_half = d.matmul(&sigma_half)?;
        let rank_sigma_f = d_half.svd()?.rank_default();
        if rank_sigma_f == 0 {
            regenerated += 1;
            continue;
        }
        // The LoRA target must have a clean spectrum at the truncation rank.
        let moments_sigma = d.matmul(&sigma_x)?;
        let a_sq = ctx.below.matmul(&sigma_x)?.matmul(&ctx.below.transpose())?;
        let a_pinv = a_sq.add(&a_sq.transpose())?.scaled(0.5).psd_sqrt()?.pinv()?;
        let phi = phi_star(&ctx.above)?;
        let m = phi
            .matmul(&phi.transpose())?
            .matmul(&moments_sigma)?
            .matmul(&ctx.below.transpose())?
            .matmul(&a_pinv)?;
        let msvd = m.svd()?;
        let rank = msvd.rank_default();
        if rank == 0 || rank != rank_sigma_f {
            regenerated += 1;
            continue;
        }
        let sigma1 = msvd.singular[0];
        let gap = msvd.singular[rank - 1] - msvd.singular.get(rank).copied().unwrap_or(0.0);
        if gap < 1e-9 * sigma1 {
            regenerated += 1;
            continue;
        }
        let s = cfg.sparsity.unwrap_or(1 + (rng.next_u64() as usize) % rank).min(rank).max(1);
        let s_set = sample_distinct(rng, d_l, s);
        let u_s = selection_matrix(d_l, &s_set);
        let wu = ctx.above.matmul(&u_s)?;
        let shift = match cfg.shift {
            ShiftMode::Generic => gaussian_matrix(rng, q, p, cfg.shift_scale),
            ShiftMode::InsideSpan => {
                let phi_s = phi_star(&wu)?;
                let g = gaussian_matrix(rng, phi_s.cols(), p, cfg.shift_scale);
                phi_s.matmul(&g)?
            }
            ShiftMode::OutsideSpan => {
                let phi_s = phi_star(&wu)?;
                let g = gaussian_matrix(rng, q, p, cfg.shift_scale);
                let proj = phi_s.matmul(&phi_s.transpose())?;
                g.sub(&proj.matmul(&g)?)?
            }
        };
        let b_ood = b_id.add(&shift)?;
        let sigma_x_ood = if cfg.covariate_shift > 0.0 {
            let bump = random_psd(rng, p)?.scaled(cfg.covariate_shift);
            sigma_x.add(&bump)?
        } else {
            sigma_x.clone()
        };
        let task = RegressionTask::with_covariate_shift(
            b_id,
            b_ood,
            sigma_x,
            sigma_x_ood,
            Matrix::identity(q).scaled(0.1),
            Matrix::identity(q).scaled(0.1),
        )?;
        return Ok(TheoryInstance { net, task, layer, s_set, rank, regenerated });
    }
    Err(Error::Numeric("failed to generate a non-degenerate instance in 64 attempts".into()))
}

fn run_trial(cfg: &Theorem2Config, trial: usize) -> Result<RiskReport> {
    let mut rng = derive_rng(cfg.seed, trial as u64);
    let inst = generate_instance(cfg, &mut rng)?;
    let ctx = layer_ctx(&inst.net, inst.layer)?;
    let moments = population_moments(&ctx, &inst.task)?;
    let sft = solve_sft_min_norm(&inst.net, &moments, inst.layer, &inst.s_set)?;
    let lora = solve_lora_min_norm(&inst.net, &moments, inst.layer, inst.rank)?;
    let full = solve_full(&inst.net, &moments, inst.layer)?;
    let pre = AdaptationSolution::pretrained(&inst.net, inst.layer)?;

    let sft_id = excess_risk(&inst.net, &sft, &inst.task, TaskDist::InDistribution)?;
    let sft_ood = excess_risk(&inst.net, &sft, &inst.task, TaskDist::OutOfDistribution)?;
    let lora_id = excess_risk(&inst.net, &lora, &inst.task, TaskDist::InDistribution)?;
    let lora_ood = excess_risk(&inst.net, &lora, &inst.task, TaskDist::OutOfDistribution)?;
    let full_id = excess_risk(&inst.net, &full, &inst.task, TaskDist::InDistribution)?;
    let pre_id = excess_risk(&inst.net, &pre, &inst.task, TaskDist::InDistribution)?;
    let pre_ood = excess_risk(&inst.net, &pre, &inst.task, TaskDist::OutOfDistribution)?;
    let eps_sq = assumption_shift_epsilon(&inst.net, &inst.task, inst.layer, &inst.s_set)?;
    let delta_sq = approx_sparsity_delta_sq(&inst.net, &inst.task, inst.layer, &inst.s_set)?;
    let shift = inst.task.b_ood.sub(&inst.task.b_id)?;
    let label_shift_sq = shift
        .matmul(&inst.task.sigma_x_id.psd_sqrt()?)?
        .frobenius_norm()
        .powi(2);

    for (name, v) in [
        ("sft_id", sft_id),
        ("sft_ood", sft_ood),
        ("lora_id", lora_id),
        ("lora_ood", lora_ood),
        ("full_id", full_id),
    ] {
        if !v.is_finite() || v < -1e-9 {
            return Err(Error::Numeric(format!("risk {name} = {v} out of range")));
        }
    }

    let sft_bound = (1.0 + 3.0 * eps_sq) * pre_ood + cfg.tol;
    let lora_bound = label_shift_sq - cfg.tol;
    let bound_checks = vec![
        BoundCheck {
            name: "sft_ood_upper".into(),
            pass: sft_ood <= sft_bound,
            margin: sft_bound - sft_ood,
        },
        BoundCheck {
            name: "lora_ood_lower".into(),
            pass: lora_ood >= lora_bound,
            margin: lora_ood - lora_bound,
        },
    ];
    Ok(RiskReport {
        trial,
        s: inst.s_set.len(),
        r: inst.rank,
        sft_excess_id: sft_id,
        sft_excess_ood: sft_ood,
        lora_excess_id: lora_id,
        lora_excess_ood: lora_ood,
        full_excess_id: full_id,
        pretrained_id: pre_id,
        pretrained_ood: pre_ood,
        label_shift_sq,
        epsilon_sq: eps_sq,
        approx_sparsity_delta_sq: delta_sq,
        regenerated: inst.regenerated,
        bound_checks,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem2Outcome {
    pub reports: Vec<RiskReport>,
    pub errors: Vec<String>,
    pub all_pass: bool,
}

/// Run the OOD bound suite: every hypothesis-satisfying trial must satisfy
/// both OOD inequalities within the configured slack. Trials run in
/// parallel with per-trial derived seeds, so results are order-independent.
pub fn theorem2_suite(cfg: &Theorem2Config) -> Theorem2Outcome {
    let results: Vec<Result<RiskReport>> =
        (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, t)).collect();
    let mut reports = Vec::new();
    let mut errors = Vec::new();
    for (t, r) in results.into_iter().enumerate() {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => errors.push(format!("trial {t}: {e}")),
        }
    }
    let all_pass = errors.is_empty() && reports.iter().all(|r| r.all_pass());
    Theorem2Outcome { reports, errors, all_pass }
}

use rand::RngCore;
