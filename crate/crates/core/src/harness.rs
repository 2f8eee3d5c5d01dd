//! Experiment orchestration: the toy memorization/generalization study on
//! synthetic regression families, the efficiency accounting report with
//! desk-scale step timing, and the theorem suite runner. Independent runs go
//! through a worker pool with per-run derived seeds, so reports do not depend
//! on scheduling; everything except the timing columns is byte-identical
//! across repeat runs.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::account::{account, lora_rank_for_budget, MethodSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{init_block_model, init_linear_net, BlockConfig, DeepLinearNet};
use crate::rng::{derive_rng, gaussian_matrix};
use crate::select::TrainableScope;
use crate::theory::{
    self, layer_ctx, sample_from, RegressionTask, TaskDist, Theorem2Config, Theorem2Outcome,
};
use crate::train::{
    train_chain, BlockStepper, ChainData, Method, OptimKind, Schedule, TrainConfig,
};

// ---------------------------------------------------------------------------
// Generalization experiment

/// Synthetic regression-family study: train each method at each
/// (ratio, seed) on an in-distribution task reachable from the pre-trained
/// span, then evaluate on ID, near-OOD (small label shift) and far-OOD
/// (large label shift within the pre-trained output span) test sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralizationConfig {
    pub schema_version: u32,
    /// Deep-linear-network dims `[p, …, q]`.
    pub dims: Vec<usize>,
    /// 1-based adapted layer; defaults to the middle.
    #[serde(default)]
    pub layer: Option<usize>,
    pub methods: Vec<String>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub train_n: usize,
    pub eval_n: usize,
    pub noise_std: f64,
    /// In-distribution residual scale (how far B_id sits from W_pre).
    pub task_scale: f64,
    pub near_shift: f64,
    pub far_shift: f64,
    /// A task family only counts as far-OOD when its label-shift meter ε²
    /// (the distribution-shift ratio over the full selection) clears this.
    #[serde(default)]
    pub far_min_epsilon_sq: f64,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub sgd: bool,
}

impl Default for GeneralizationConfig {
    fn default() -> Self {
        GeneralizationConfig {
            schema_version: 1,
            dims: vec![8, 10, 8],
            layer: None,
            methods: vec!["s2ft".into(), "lora".into(), "full".into(), "spft".into()],
            ratios: vec![1.0, 0.25, 0.05],
            seeds: vec![0, 1, 2],
            train_n: 200,
            eval_n: 2000,
            noise_std: 0.05,
            task_scale: 0.5,
            near_shift: 0.1,
            far_shift: 2.0,
            far_min_epsilon_sq: 0.0,
            epochs: 1500,
            lr: 2e-2,
            sgd: false,
        }
    }
}

impl GeneralizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::Config("dims must list at least [p, q]".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        if self.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::Config("ratios must lie in (0, 1]".into()));
        }
        for m in &self.methods {
            Method::parse(m)?;
        }
        Ok(())
    }
}

/// One row of the generalization report.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub method: String,
    pub ratio: f64,
    pub seed: u64,
    pub status: String,
    pub final_train_loss: f64,
    pub id_loss: f64,
    pub near_ood_loss: f64,
    pub far_ood_loss: f64,
    pub trainable_params: u64,
    pub wall_ms: f64,
}

/// The task family shared by every run of one seed.
pub struct TaskFamily {
    pub net: DeepLinearNet,
    pub id: RegressionTask,
    pub near: RegressionTask,
    pub far: RegressionTask,
    /// Shift meters: the distribution-shift ratio ε² of each OOD task over
    /// the full selection, quantifying how far the label map moved.
    pub near_epsilon_sq: f64,
    pub far_epsilon_sq: f64,
}

/// Build the pre-trained net and the ID / near-OOD / far-OOD label maps. The
/// in-distribution residual and the far shift live inside the pre-trained
/// output span; the far shift is simply much larger.
pub fn build_task_family(cfg: &GeneralizationConfig, seed: u64) -> Result<TaskFamily> {
    let net = init_linear_net(&cfg.dims, seed)?;
    let layer = cfg.layer.unwrap_or((cfg.dims.len() - 1).div_ceil(2));
    let ctx = layer_ctx(&net, layer)?;
    let p = net.input_dim();
    let q = net.output_dim();
    let mut rng = derive_rng(seed, 0x7a5);
    let b_tilde = gaussian_matrix(&mut rng, ctx.above.cols(), ctx.below.rows(), cfg.task_scale);
    let b_id = ctx.w_pre.add(&ctx.above.matmul(&b_tilde)?.matmul(&ctx.below)?)?;
    let span = ctx.above.svd()?;
    let rank = span.rank_default();
    let phi = span.left.select_cols(&(0..rank).collect::<Vec<_>>());
    let proj = phi.matmul(&phi.transpose())?;
    let near = b_id.add(&proj.matmul(&gaussian_matrix(&mut rng, q, p, cfg.near_shift))?)?;
    let far = b_id.add(&proj.matmul(&gaussian_matrix(&mut rng, q, p, cfg.far_shift))?)?;
    let sigma_eps = Matrix::identity(q).scaled(cfg.noise_std * cfg.noise_std);
    let mk = |b_ood: Matrix| {
        RegressionTask::new(
            b_id.clone(),
            b_ood,
            Matrix::identity(p),
            sigma_eps.clone(),
            sigma_eps.clone(),
        )
    };
    let family = TaskFamily {
        id: mk(b_id.clone())?,
        near: mk(near)?,
        far: mk(far)?,
        near_epsilon_sq: 0.0,
        far_epsilon_sq: 0.0,
        net,
    };
    let all_rows: Vec<usize> = (0..ctx.above.cols()).collect();
    let near_eps =
        theory::assumption_shift_epsilon(&family.net, &family.near, layer, &all_rows)?;
    let far_eps = theory::assumption_shift_epsilon(&family.net, &family.far, layer, &all_rows)?;
    if far_eps < cfg.far_min_epsilon_sq {
        return Err(Error::Config(format!(
            "far-OOD shift meter ε²={far_eps:.3e} below the configured threshold {}",
            cfg.far_min_epsilon_sq
        )));
    }
    Ok(TaskFamily { near_epsilon_sq: near_eps, far_epsilon_sq: far_eps, ..family })
}

fn eval_loss(net: &DeepLinearNet, task: &RegressionTask, which: TaskDist, n: usize, seed: u64) -> Result<f64> {
    let mut rng = derive_rng(seed, 0xe7a1);
    let (b, sx, se) = match which {
        TaskDist::InDistribution => (&task.b_id, &task.sigma_x_id, &task.sigma_eps_id),
        TaskDist::OutOfDistribution => (&task.b_ood, &task.sigma_x_ood, &task.sigma_eps_ood),
    };
    let d = sample_from(b, sx, se, n, &mut rng)?;
    let pred = net.full_product().matmul(&d.x)?;
    Ok(d.y.sub(&pred)?.frobenius_norm().powi(2) / n as f64)
}

fn run_one(cfg: &GeneralizationConfig, method: Method, ratio: f64, seed: u64) -> RunReport {
    let start = Instant::now();
    let fail = |status: String| RunReport {
        method: method.name().into(),
        ratio,
        seed,
        status,
        final_train_loss: f64::NAN,
        id_loss: f64::NAN,
        near_ood_loss: f64::NAN,
        far_ood_loss: f64::NAN,
        trainable_params: 0,
        wall_ms: 0.0,
    };
    let family = match build_task_family(cfg, seed) {
        Ok(f) => f,
        Err(e) => return fail(format!("setup: {e}")),
    };
    let layer = cfg.layer.unwrap_or((cfg.dims.len() - 1).div_ceil(2));
    let (d_l, d_lm1) = {
        let w = family.net.layer(layer).expect("layer checked");
        (w.rows(), w.cols())
    };
    // Per-method parameter budget at this ratio of the layer's parameters.
    let rows: Vec<usize> = {
        let count = ((ratio * d_l as f64).round() as usize).clamp(1, d_l);
        let mut rng = derive_rng(seed, 0x5e1);
        crate::rng::sample_distinct(&mut rng, d_l, count)
    };
    // Rank as a fraction of full rank, so ratio 1.0 is genuinely full
    // capacity for every method (the strict parameter-parity converter lives
    // in select::sparsity_for_rank and drives the efficiency comparisons).
    let rank = ((ratio * d_l.min(d_lm1) as f64).round().max(1.0) as usize).min(d_l.min(d_lm1));
    let trainable_params = match method {
        Method::S2ft => (rows.len() * d_lm1) as u64,
        Method::Lora => (rank * (d_l + d_lm1)) as u64,
        Method::FullFt => (d_l * d_lm1) as u64,
        Method::UnstructuredSparse => ((ratio * (d_l * d_lm1) as f64).round()) as u64,
    };
    let sample = match theory::sample_dataset(&family.id, cfg.train_n, seed ^ 0x1234) {
        Ok(s) => s,
        Err(e) => return fail(format!("sampling: {e}")),
    };
    let data = ChainData { x: sample.x, y: sample.y };
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.train_n,
        lr: cfg.lr,
        seed,
        optimizer: if cfg.sgd { OptimKind::Sgd } else { OptimKind::adamw_default() },
        schedule: Schedule::Constant,
        lora_rank: rank,
        lora_alpha: 1.0,
        lora_lr_u_scale: 1.0,
        sparse_ratio: ratio,
    };
    let run = match train_chain(method, &family.net, layer, &rows, &data, &tc) {
        Ok(r) => r,
        Err(e) => return fail(format!("diverged: {e}")),
    };
    let final_train_loss = run.losses.last().copied().unwrap_or(f64::NAN);
    let id_loss = eval_loss(&run.net, &family.id, TaskDist::InDistribution, cfg.eval_n, seed ^ 1);
    let near = eval_loss(&run.net, &family.near, TaskDist::OutOfDistribution, cfg.eval_n, seed ^ 2);
    let far = eval_loss(&run.net, &family.far, TaskDist::OutOfDistribution, cfg.eval_n, seed ^ 3);
    match (id_loss, near, far) {
        (Ok(id_loss), Ok(near_ood_loss), Ok(far_ood_loss)) => RunReport {
            method: method.name().into(),
            ratio,
            seed,
            status: "ok".into(),
            final_train_loss,
            id_loss,
            near_ood_loss,
            far_ood_loss,
            trainable_params,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        _ => fail("eval failed".into()),
    }
}

/// Run the full grid; rows come back in (method, ratio, seed) order
/// regardless of worker scheduling. Divergent runs are marked failed and the
/// sweep continues.
pub fn run_generalization_experiment(cfg: &GeneralizationConfig) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for m in &cfg.methods {
        let method = Method::parse(m)?;
        for &ratio in &cfg.ratios {
            for &seed in &cfg.seeds {
                jobs.push((method, ratio, seed));
            }
        }
    }
    Ok(jobs
        .into_par_iter()
        .map(|(method, ratio, seed)| run_one(cfg, method, ratio, seed))
        .collect())
}

pub fn generalization_csv(rows: &[RunReport]) -> String {
    let mut out = String::from(
        "method,ratio,seed,status,final_train_loss,id_loss,near_ood_loss,far_ood_loss,trainable_params,wall_ms\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{},{:.3}\n",
            r.method,
            r.ratio,
            r.seed,
            r.status,
            r.final_train_loss,
            r.id_loss,
            r.near_ood_loss,
            r.far_ood_loss,
            r.trainable_params,
            r.wall_ms
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Efficiency report

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EfficiencyConfig {
    pub schema_version: u32,
    pub d: usize,
    pub h: usize,
    pub k_inner: usize,
    pub n_blocks: usize,
    pub tokens: usize,
    /// Trainable-parameter ratio used to match budgets across methods.
    pub ratio: f64,
    pub seed: u64,
    pub warmup_steps: usize,
    pub timed_steps: usize,
}

impl Default for EfficiencyConfig {
    fn default() -> Self {
        EfficiencyConfig {
            schema_version: 1,
            d: 64,
            h: 8,
            k_inner: 128,
            n_blocks: 1,
            tokens: 128,
            ratio: 0.1,
            seed: 3,
            warmup_steps: 5,
            timed_steps: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyRow {
    pub method: String,
    pub trainable_params: u64,
    pub taped_bytes: u64,
    pub optimizer_bytes: u64,
    pub fwd_flops: u64,
    pub bwd_flops: u64,
    pub step_time_us_median: f64,
}

/// Analytic counters plus measured median step time (after warmup) for each
/// method at a matched trainable budget.
pub fn run_efficiency_report(cfg: &EfficiencyConfig) -> Result<Vec<EfficiencyRow>> {
    if !(cfg.ratio > 0.0 && cfg.ratio <= 1.0) {
        return Err(Error::Config("ratio must lie in (0, 1]".into()));
    }
    let bc = BlockConfig { d: cfg.d, h: cfg.h, k_inner: cfg.k_inner, n_blocks: cfg.n_blocks };
    let model = init_block_model(&bc, cfg.seed)?;
    let scope = TrainableScope::OutputDownOnly;
    let budget = crate::select::budget_from_ratio(cfg.ratio, &model.blocks[0], scope)?;
    let masks = crate::select::select_stack(
        crate::select::Strategy::Random,
        crate::select::Polarity::Na,
        &model,
        None,
        &budget,
        cfg.seed,
    )?;
    let plan = crate::permute::plan_stack(&model, &masks, scope)?;
    let permuted = crate::permute::apply_permutation(&model, &plan)?;
    let regions = crate::permute::plan_regions(&plan);
    let s2ft_params = crate::select::trainable_param_count(
        &model.blocks[0],
        budget.heads_per_block,
        budget.ffn_channels_per_block,
        scope,
    ) * cfg.n_blocks;
    let rank = lora_rank_for_budget(s2ft_params / cfg.n_blocks, cfg.d, cfg.k_inner);

    let mut rng = derive_rng(cfg.seed, 0xeff);
    let x = gaussian_matrix(&mut rng, cfg.tokens, cfg.d, 1.0);
    let y = gaussian_matrix(&mut rng, cfg.tokens, cfg.d, 1.0);

    let specs = [
        (Method::S2ft, MethodSpec::S2ft {
            heads: budget.heads_per_block,
            channels: budget.ffn_channels_per_block,
            scope,
        }),
        (Method::Lora, MethodSpec::Lora { rank }),
        (Method::FullFt, MethodSpec::FullFt),
        (Method::UnstructuredSparse, MethodSpec::Spft { ratio: cfg.ratio }),
    ];
    let mut rows = Vec::new();
    for (method, spec) in specs {
        let report = account(&permuted, &spec, cfg.tokens);
        let tc = TrainConfig {
            epochs: 1,
            batch_size: cfg.tokens,
            lr: 1e-4,
            seed: cfg.seed,
            lora_rank: rank,
            sparse_ratio: cfg.ratio,
            ..Default::default()
        };
        let mut stepper = BlockStepper::new(method, &permuted, &regions, &tc)?;
        for _ in 0..cfg.warmup_steps {
            stepper.step(&x, &y)?;
        }
        let mut times = Vec::with_capacity(cfg.timed_steps);
        for _ in 0..cfg.timed_steps {
            let t0 = Instant::now();
            stepper.step(&x, &y)?;
            times.push(t0.elapsed().as_secs_f64() * 1e6);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = times[times.len() / 2];
        rows.push(EfficiencyRow {
            method: report.method.clone(),
            trainable_params: report.trainable_params,
            taped_bytes: report.taped_bytes,
            optimizer_bytes: report.optimizer_bytes,
            fwd_flops: report.fwd_flops,
            bwd_flops: report.bwd_flops,
            step_time_us_median: median,
        });
    }
    Ok(rows)
}

/// Timing is the last column so the deterministic prefix can be compared
/// byte-for-byte across runs.
pub fn efficiency_csv(rows: &[EfficiencyRow]) -> String {
    let mut out = String::from(
        "method,trainable_params,taped_bytes,optimizer_bytes,fwd_flops,bwd_flops,step_time_us_median\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.1}\n",
            r.method,
            r.trainable_params,
            r.taped_bytes,
            r.optimizer_bytes,
            r.fwd_flops,
            r.bwd_flops,
            r.step_time_us_median
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Theory suite runner

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheorySuiteConfig {
    pub schema_version: u32,
    pub dims: Vec<usize>,
    #[serde(default)]
    pub layer: Option<usize>,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub sparsity: Option<usize>,
    #[serde(default)]
    pub covariate_shift: f64,
    #[serde(default = "default_shift_scale")]
    pub shift_scale: f64,
    #[serde(default)]
    pub random_sigma: bool,
}

fn default_shift_scale() -> f64 {
    1.0
}

impl Default for TheorySuiteConfig {
    fn default() -> Self {
        TheorySuiteConfig {
            schema_version: 1,
            dims: vec![6, 8, 6],
            layer: None,
            trials: 100,
            seed: 7,
            sparsity: None,
            covariate_shift: 0.0,
            shift_scale: 1.0,
            random_sigma: false,
        }
    }
}

/// Thin orchestration over the theorem suite; the caller maps `all_pass` /
/// errors onto exit codes.
pub fn run_theory_suite(cfg: &TheorySuiteConfig) -> Theorem2Outcome {
    let t2 = Theorem2Config {
        dims: cfg.dims.clone(),
        layer: cfg.layer,
        trials: cfg.trials,
        seed: cfg.seed,
        shift: theory::ShiftMode::Generic,
        shift_scale: cfg.shift_scale,
        covariate_shift: cfg.covariate_shift,
        sparsity: cfg.sparsity,
        tol: 1e-8,
        random_sigma: cfg.random_sigma,
    };
    theory::theorem2_suite(&t2)
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, content)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::{excess_risk, AdaptationSolution};

    #[test]
    fn generalization_row_count_and_determinism() {
        let cfg = GeneralizationConfig {
            dims: vec![5, 6, 5],
            methods: vec!["s2ft".into(), "full".into()],
            ratios: vec![0.5, 0.25],
            seeds: vec![0, 1],
            train_n: 40,
            eval_n: 200,
            epochs: 50,
            ..Default::default()
        };
        let rows = run_generalization_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2);
        assert!(rows.iter().all(|r| r.status == "ok"));
        let again = run_generalization_experiment(&cfg).unwrap();
        let strip = |rows: &[RunReport]| {
            generalization_csv(rows)
                .lines()
                .map(|l| l.rsplit_once(',').map(|(a, _)| a.to_string()).unwrap_or_default())
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&rows), strip(&again), "non-timing columns are deterministic");
    }

    #[test]
    fn ratio_one_all_methods_reach_same_train_loss() {
        let cfg = GeneralizationConfig {
            dims: vec![5, 6, 5],
            methods: vec!["s2ft".into(), "lora".into(), "full".into(), "spft".into()],
            ratios: vec![1.0],
            seeds: vec![4],
            train_n: 60,
            eval_n: 100,
            noise_std: 0.0,
            epochs: 4000,
            lr: 3e-2,
            ..Default::default()
        };
        let rows = run_generalization_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        let losses: Vec<f64> = rows.iter().map(|r| r.final_train_loss).collect();
        let max = losses.iter().cloned().fold(f64::MIN, f64::max);
        let min = losses.iter().cloned().fold(f64::MAX, f64::min);
        assert!(
            max - min <= 1e-6,
            "full-capacity losses must agree: {losses:?}"
        );
    }

    #[test]
    fn orthogonal_far_shift_leaves_s2ft_at_pretrained_loss() {
        // Construct the in-distribution residual orthogonal to the trained
        // rows' output span: training then leaves the selected rows at zero
        // update, so the far-OOD loss equals the pre-trained model's.
        let net = init_linear_net(&[6, 8, 6], 11).unwrap();
        let layer = 1;
        let ctx = layer_ctx(&net, layer).unwrap();
        let rows = vec![1usize, 4];
        let u_s = theory::selection_matrix(ctx.above.cols(), &rows);
        let wu = ctx.above.matmul(&u_s).unwrap();
        let svd = wu.svd().unwrap();
        let rank = svd.rank_default();
        let phi = svd.left.select_cols(&(0..rank).collect::<Vec<_>>());
        let mut rng = derive_rng(12, 0);
        let g = gaussian_matrix(&mut rng, 6, 6, 0.8);
        let d_orth = g.sub(&phi.matmul(&phi.transpose()).unwrap().matmul(&g).unwrap()).unwrap();
        let b_id = ctx.w_pre.add(&d_orth).unwrap();
        let b_far = b_id.add(&gaussian_matrix(&mut rng, 6, 6, 1.5)).unwrap();
        let task = RegressionTask::new(
            b_id,
            b_far,
            Matrix::identity(6),
            Matrix::zeros(6, 6),
            Matrix::zeros(6, 6),
        )
        .unwrap();
        let sample = theory::sample_dataset(&task, 150, 13).unwrap();
        let data = ChainData { x: sample.x, y: sample.y };
        // SGD: AdamW would rescale the ~1e-16 numerical-noise gradient up to
        // visible updates, while plain gradient steps keep it at zero.
        let tc = TrainConfig {
            epochs: 800,
            batch_size: 150,
            lr: 2e-2,
            optimizer: OptimKind::Sgd,
            ..Default::default()
        };
        let run = train_chain(Method::S2ft, &net, layer, &rows, &data, &tc).unwrap();
        // Weights should not have moved: the gradient vanishes on S.
        assert!(
            run.net.layer(layer).unwrap().max_abs_diff(net.layer(layer).unwrap()) <= 1e-9
        );
        let pre = AdaptationSolution::pretrained(&net, layer).unwrap();
        let pre_far = excess_risk(&net, &pre, &task, TaskDist::OutOfDistribution).unwrap();
        let trained_far = {
            let resid = task
                .b_ood
                .sub(&run.net.full_product())
                .unwrap();
            resid
                .matmul(&task.sigma_x_ood)
                .unwrap()
                .matmul(&resid.transpose())
                .unwrap()
                .trace()
        };
        assert!(
            (trained_far - pre_far).abs() <= 1e-9 * (1.0 + pre_far),
            "far-OOD risk {trained_far} vs pretrained {pre_far}"
        );
    }

    #[test]
    fn efficiency_report_trends() {
        let cfg = EfficiencyConfig {
            d: 32,
            h: 4,
            k_inner: 64,
            tokens: 16,
            timed_steps: 7,
            warmup_steps: 2,
            ..Default::default()
        };
        let rows = run_efficiency_report(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        let get = |name: &str| rows.iter().find(|r| r.method == name).unwrap();
        let s2 = get("s2ft");
        let lora = get("lora");
        let full = get("full");
        assert!(s2.taped_bytes <= lora.taped_bytes);
        assert!(s2.optimizer_bytes <= lora.optimizer_bytes);
        assert!(s2.fwd_flops < lora.fwd_flops);
        assert!(s2.bwd_flops < lora.bwd_flops);
        let ratio = s2.trainable_params as f64 / full.trainable_params as f64;
        let byte_ratio = s2.optimizer_bytes as f64 / full.optimizer_bytes as f64;
        assert!((ratio - byte_ratio).abs() < 1e-12);
        // Deterministic prefix (everything but timing) across two runs.
        let again = run_efficiency_report(&cfg).unwrap();
        let strip = |rows: &[EfficiencyRow]| {
            efficiency_csv(rows)
                .lines()
                .map(|l| l.rsplit_once(',').map(|(a, _)| a.to_string()).unwrap_or_default())
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&rows), strip(&again));
    }

    #[test]
    fn far_shift_meter_exceeds_near() {
        let cfg = GeneralizationConfig::default();
        let family = build_task_family(&cfg, 3).unwrap();
        assert!(family.far_epsilon_sq > family.near_epsilon_sq);
        assert!(family.near_epsilon_sq > 0.0);
        // An absurd threshold rejects the family as not-far-enough.
        let strict = GeneralizationConfig { far_min_epsilon_sq: 1e12, ..cfg };
        assert!(matches!(build_task_family(&strict, 3), Err(Error::Config(_))));
    }

    #[test]
    fn theory_suite_wrapper_and_empty_run() {
        let cfg = TheorySuiteConfig { trials: 3, seed: 5, ..Default::default() };
        let out = run_theory_suite(&cfg);
        assert!(out.all_pass);
        let empty = TheorySuiteConfig { trials: 0, ..Default::default() };
        let out = run_theory_suite(&empty);
        assert!(out.all_pass);
        assert!(out.reports.is_empty());
    }
}
