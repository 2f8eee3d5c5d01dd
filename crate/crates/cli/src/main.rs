//! `s2ft` command line: model init, dependency-graph export, selection,
//! co-permutation, training, the adapter lifecycle, the theory suite, the
//! efficiency bench, and the generalization experiment.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 assertion/bound failure,
//! 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use s2ft_core::adapter::{
    extract, load_adapter, save_adapter, AdapterRegistry, AnyAdapter,
};
use s2ft_core::error::{Error, Result};
use s2ft_core::harness::{
    efficiency_csv, generalization_csv, run_efficiency_report, run_generalization_experiment,
    run_theory_suite, write_text, EfficiencyConfig, GeneralizationConfig, TheorySuiteConfig,
};
use s2ft_core::io::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use s2ft_core::linalg::Matrix;
use s2ft_core::model::{
    forward_model, init_block_model, init_linear_net, BlockConfig, TransformerModel, WeightId,
    BLOCK_WEIGHTS,
};
use s2ft_core::permute::{
    apply_permutation, plan_from_json, plan_regions, plan_stack, plan_to_json,
    verify_output_invariance,
};
use s2ft_core::rng::{derive_rng, gaussian_matrix};
use s2ft_core::select::{
    budget_from_ratio, mask_file, select_stack, CalibrationBatch, MaskFile, Polarity,
    SelectionMask, Strategy, TrainableScope,
};
use s2ft_core::train::{train_block, Method, OptimKind, Schedule, TrainConfig, TrainData};

#[derive(Parser)]
#[command(name = "s2ft", version, about = "Structured sparse fine-tuning engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a model checkpoint (transformer block stack or linear chain).
    InitModel(InitModelArgs),
    /// Export the weight–activation dependency graph and coupled structures.
    Graph(GraphArgs),
    /// Select trainable heads/channels and write a mask file.
    Select(SelectArgs),
    /// Co-permute a model so selected slots are leading contiguous ranges.
    Permute(PermuteArgs),
    /// Train a block model with one of the methods.
    Train(TrainArgs),
    /// Adapter lifecycle: extract, fuse, switch, parallel-bench.
    Adapter(AdapterArgs),
    /// Run the OOD bound suite on deep linear networks.
    Theory(TheoryArgs),
    /// Efficiency accounting report with measured step times.
    Bench(BenchArgs),
    /// Generalization experiment over methods × ratios × seeds.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct InitModelArgs {
    /// "block" or "chain".
    #[arg(long, default_value = "block")]
    kind: String,
    /// block: d,h,k[,n_blocks]; chain: the full dim list.
    #[arg(long, value_delimiter = ',')]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    model: PathBuf,
    /// R, W, A, S or G.
    #[arg(long, default_value = "R")]
    strategy: String,
    #[arg(long, default_value = "na")]
    polarity: String,
    #[arg(long, default_value_t = 0.1)]
    ratio: f64,
    /// JSON file with "inputs" (and "targets" for G) as row-major arrays.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// "output-down" or "all-coupled".
    #[arg(long, default_value = "output-down")]
    scope: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PermuteArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_plan: PathBuf,
    /// Check forward invariance on random inputs and fail if it breaks.
    #[arg(long, default_value_t = true)]
    verify: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "s2ft")]
    method: String,
    /// Plan file produced by `permute` (the model must already be permuted).
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Mask file; the model is treated as the un-permuted base, permuted
    /// in-process, and the derived plan is written next to the outputs.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// JSON training config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdapterArgs {
    #[command(subcommand)]
    action: AdapterAction,
}

#[derive(Subcommand)]
enum AdapterAction {
    /// Extract sparse adapters from a fine-tuned model.
    Extract {
        #[arg(long)]
        fine_tuned: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long, default_value = "adapter")]
        prefix: String,
    },
    /// Fuse an adapter into a model checkpoint.
    Fuse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unfuse-then-fuse between two adapters, reporting primitive op counts.
    Switch {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve batched requests over one base weight, printing op counts.
    ParallelBench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        /// Weight id such as "block0.wdown".
        #[arg(long)]
        weight: String,
        #[arg(long, default_value_t = 16)]
        requests: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value = "theorem2")]
    suite: String,
    #[arg(long, value_delimiter = ',', default_values_t = vec![6usize, 8, 6])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// JSON config overriding the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successes; anything else is a usage error (1).
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::InitModel(a) => init_model(a),
        Command::Graph(a) => graph(a),
        Command::Select(a) => select_cmd(a),
        Command::Permute(a) => permute_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Adapter(a) => adapter_cmd(a),
        Command::Theory(a) => theory_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
    }
}

fn load_block_model(path: &Path) -> Result<TransformerModel> {
    match load_checkpoint(path)? {
        ModelCheckpoint::Block(m) => Ok(m),
        ModelCheckpoint::Chain(_) => {
            Err(Error::Argument(format!("{} is a chain checkpoint", path.display())))
        }
    }
}

fn init_model(a: InitModelArgs) -> Result<ExitCode> {
    let ckpt = match a.kind.as_str() {
        "block" => {
            if a.dims.len() < 3 || a.dims.len() > 4 {
                return Err(Error::Config("block dims are d,h,k[,n_blocks]".into()));
            }
            let cfg = BlockConfig {
                d: a.dims[0],
                h: a.dims[1],
                k_inner: a.dims[2],
                n_blocks: a.dims.get(3).copied().unwrap_or(1),
            };
            ModelCheckpoint::Block(init_block_model(&cfg, a.seed)?)
        }
        "chain" => ModelCheckpoint::Chain(init_linear_net(&a.dims, a.seed)?),
        other => return Err(Error::Config(format!("unknown model kind {other:?}"))),
    };
    save_checkpoint(&a.out, &ckpt, Some(a.seed))?;
    println!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn graph(a: GraphArgs) -> Result<ExitCode> {
    let graph = match load_checkpoint(&a.model)? {
        ModelCheckpoint::Block(m) => s2ft_core::depgraph::build_graph_block(&m),
        ModelCheckpoint::Chain(n) => s2ft_core::depgraph::build_graph_chain(&n),
    };
    write_text(&a.out, &s2ft_core::depgraph::export_graph_json(&graph)?)?;
    println!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Deserialize)]
struct CalibFile {
    inputs: Vec<Vec<f64>>,
    #[serde(default)]
    targets: Option<Vec<Vec<f64>>>,
}

fn parse_scope(s: &str) -> Result<TrainableScope> {
    match s {
        "output-down" => Ok(TrainableScope::OutputDownOnly),
        "all-coupled" => Ok(TrainableScope::AllCoupled),
        other => Err(Error::Argument(format!("unknown scope {other:?}"))),
    }
}

fn select_cmd(a: SelectArgs) -> Result<ExitCode> {
    let model = load_block_model(&a.model)?;
    let strategy = Strategy::parse(&a.strategy)?;
    let polarity = if strategy == Strategy::Random {
        Polarity::Na
    } else {
        Polarity::parse(&a.polarity)?
    };
    let scope = parse_scope(&a.scope)?;
    let calib = match &a.calib {
        None => None,
        Some(path) => {
            let parsed: CalibFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            let inputs = Matrix::from_rows(&parsed.inputs)?;
            let targets = parsed.targets.map(|t| Matrix::from_rows(&t)).transpose()?;
            Some(CalibrationBatch { inputs, targets, fraction_of_train: None })
        }
    };
    let budget = budget_from_ratio(a.ratio, &model.blocks[0], scope)?;
    let masks = select_stack(strategy, polarity, &model, calib.as_ref(), &budget, a.seed)?;
    let file = mask_file(&budget, &masks);
    write_text(&a.out, &serde_json::to_string_pretty(&file)?)?;
    println!(
        "selected {} heads + {} channels per block ({} trainable params/block)",
        budget.heads_per_block,
        budget.ffn_channels_per_block,
        s2ft_core::select::trainable_param_count(
            &model.blocks[0],
            budget.heads_per_block,
            budget.ffn_channels_per_block,
            scope
        )
    );
    Ok(ExitCode::SUCCESS)
}

fn masks_from_file(file: &MaskFile) -> Vec<SelectionMask> {
    file.blocks
        .iter()
        .map(|b| SelectionMask {
            mha_heads: b.mha_heads.clone(),
            ffn_channels: b.ffn_channels.clone(),
            strategy: file.strategy,
            polarity: file.polarity,
            seed: file.seed,
        })
        .collect()
}

fn permute_cmd(a: PermuteArgs) -> Result<ExitCode> {
    let model = load_block_model(&a.model)?;
    let file: MaskFile = serde_json::from_str(&std::fs::read_to_string(&a.mask)?)?;
    let masks = masks_from_file(&file);
    let plan = plan_stack(&model, &masks, file.scope)?;
    let permuted = apply_permutation(&model, &plan)?;
    if a.verify {
        let mut rng = derive_rng(0xc0ffee, 0);
        let x = gaussian_matrix(&mut rng, 8, model.d(), 1.0);
        let report = verify_output_invariance(&model, &permuted, &x, 1e-10)?;
        if !report.pass {
            return Err(Error::Bound(format!(
                "co-permutation changed outputs by {:.3e}",
                report.max_abs_diff
            )));
        }
        println!("invariance ok (max-abs diff {:.3e})", report.max_abs_diff);
    }
    save_checkpoint(&a.out_model, &ModelCheckpoint::Block(permuted), None)?;
    write_text(&a.out_plan, &plan_to_json(&plan)?)?;
    println!("wrote {} and {}", a.out_model.display(), a.out_plan.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Deserialize)]
#[serde(default)]
struct TrainFileConfig {
    schema_version: u32,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    optimizer: String,
    weight_decay: f64,
    linear_decay: bool,
    lora_rank: usize,
    lora_alpha: f64,
    lora_lr_u_scale: f64,
    sparse_ratio: f64,
    tokens: usize,
    teacher_seed: u64,
    data_seed: u64,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        TrainFileConfig {
            schema_version: 1,
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            optimizer: "adamw".into(),
            weight_decay: 0.0,
            linear_decay: false,
            lora_rank: 4,
            lora_alpha: 1.0,
            lora_lr_u_scale: 1.0,
            sparse_ratio: 0.1,
            tokens: 64,
            teacher_seed: 99,
            data_seed: 7,
        }
    }
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let mut model = load_block_model(&a.model)?;
    let method = Method::parse(&a.method)?;
    // A mask means the model is the un-permuted base: derive the plan,
    // permute here, and persist the plan for later adapter extraction.
    let mask_plan = match &a.mask {
        None => None,
        Some(path) => {
            if a.plan.is_some() {
                return Err(Error::Config("pass either --plan or --mask, not both".into()));
            }
            let file: MaskFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            let masks = masks_from_file(&file);
            let plan = plan_stack(&model, &masks, file.scope)?;
            model = apply_permutation(&model, &plan)?;
            Some(plan)
        }
    };
    let fc: TrainFileConfig = match &a.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TrainFileConfig::default(),
    };
    let optimizer = match fc.optimizer.as_str() {
        "sgd" => OptimKind::Sgd,
        "adamw" => OptimKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: fc.weight_decay,
        },
        other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
    };
    let steps_per_epoch = fc.tokens.div_ceil(fc.batch_size.max(1)) as u64;
    let cfg = TrainConfig {
        epochs: fc.epochs,
        batch_size: fc.batch_size,
        lr: fc.lr,
        seed: fc.seed,
        optimizer,
        schedule: if fc.linear_decay {
            Schedule::LinearDecay { total_steps: steps_per_epoch * fc.epochs as u64 }
        } else {
            Schedule::Constant
        },
        lora_rank: fc.lora_rank,
        lora_alpha: fc.lora_alpha,
        lora_lr_u_scale: fc.lora_lr_u_scale,
        sparse_ratio: fc.sparse_ratio,
    };
    let regions = match (&a.plan, &mask_plan) {
        (Some(path), _) => plan_regions(&plan_from_json(&std::fs::read_to_string(path)?)?),
        (None, Some(plan)) => plan_regions(plan),
        (None, None) => {
            if method == Method::S2ft {
                return Err(Error::Config("s2ft training needs --plan or --mask".into()));
            }
            Vec::new()
        }
    };
    // Synthetic task: match an independently seeded teacher of the same
    // geometry on Gaussian inputs.
    let b0 = &model.blocks[0];
    let teacher = init_block_model(
        &BlockConfig { d: b0.d, h: b0.h, k_inner: b0.k_inner, n_blocks: model.blocks.len() },
        fc.teacher_seed,
    )?;
    let mut rng = derive_rng(fc.data_seed, 0xd0);
    let inputs = gaussian_matrix(&mut rng, fc.tokens, b0.d, 1.0);
    let (targets, _) = forward_model(&teacher, &inputs)?;
    let data = TrainData { inputs, targets };
    let run = train_block(method, &model, &regions, &data, &cfg)?;

    std::fs::create_dir_all(&a.out)?;
    save_checkpoint(&a.out.join("model.ckpt"), &ModelCheckpoint::Block(run.model), None)?;
    if let Some(plan) = &mask_plan {
        write_text(&a.out.join("plan.json"), &plan_to_json(plan)?)?;
        save_checkpoint(&a.out.join("base_permuted.ckpt"), &ModelCheckpoint::Block(model.clone()), None)?;
    }
    let mut csv = String::from("step,loss\n");
    for (i, l) in run.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.12e}\n"));
    }
    write_text(&a.out.join("loss.csv"), &csv)?;
    // Accounting report for the configured method.
    let spec = match method {
        Method::S2ft => {
            let d_h = b0.d_h();
            let heads = regions
                .iter()
                .find(|r| {
                    matches!(
                        r.weight,
                        WeightId::Block { kind: s2ft_core::model::BlockWeight::Wo, .. }
                    )
                })
                .map_or(0, |r| r.len() / d_h);
            let channels = regions
                .iter()
                .find(|r| {
                    matches!(
                        r.weight,
                        WeightId::Block { kind: s2ft_core::model::BlockWeight::Wdown, .. }
                    )
                })
                .map_or(0, |r| r.len());
            let scope = if regions.iter().any(|r| {
                matches!(
                    r.weight,
                    WeightId::Block { kind: s2ft_core::model::BlockWeight::Wq, .. }
                )
            }) {
                TrainableScope::AllCoupled
            } else {
                TrainableScope::OutputDownOnly
            };
            s2ft_core::account::MethodSpec::S2ft { heads, channels, scope }
        }
        Method::Lora => s2ft_core::account::MethodSpec::Lora { rank: fc.lora_rank },
        Method::FullFt => s2ft_core::account::MethodSpec::FullFt,
        Method::UnstructuredSparse => {
            s2ft_core::account::MethodSpec::Spft { ratio: fc.sparse_ratio }
        }
    };
    let report = s2ft_core::account::account(&model, &spec, fc.batch_size.min(fc.tokens));
    write_text(&a.out.join("accounting.json"), &serde_json::to_string_pretty(&report)?)?;
    println!(
        "trained {} steps, final loss {:.6e}",
        run.losses.len(),
        run.losses.last().unwrap_or(&f64::NAN)
    );
    Ok(ExitCode::SUCCESS)
}

fn adapter_cmd(a: AdapterArgs) -> Result<ExitCode> {
    match a.action {
        AdapterAction::Extract { fine_tuned, base, plan, registry, prefix } => {
            let ft = load_block_model(&fine_tuned)?;
            let base_m = load_block_model(&base)?;
            let plan = plan_from_json(&std::fs::read_to_string(&plan)?)?;
            let adapters = extract(&ft, &base_m, &plan, &prefix)?;
            std::fs::create_dir_all(&registry)?;
            for ad in &adapters {
                let fname = format!(
                    "{}_{}.adpt",
                    prefix,
                    ad.weight.to_string().replace('.', "_")
                );
                save_adapter(&registry.join(&fname), ad, None)?;
                println!("wrote {fname} ({} indices)", ad.sparsity());
            }
            Ok(ExitCode::SUCCESS)
        }
        AdapterAction::Fuse { model, registry, id, out } => {
            let mut m = load_block_model(&model)?;
            let mut reg = load_registry(&registry)?;
            let report = reg.fuse(&mut m, &id)?;
            save_checkpoint(&out, &ModelCheckpoint::Block(m), None)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        AdapterAction::Switch { model, registry, from, to, out } => {
            let mut m = load_block_model(&model)?;
            let mut reg = load_registry(&registry)?;
            reg.fuse(&mut m, &from)?;
            let report = reg.switch(&mut m, &from, &to)?;
            save_checkpoint(&out, &ModelCheckpoint::Block(m), None)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        AdapterAction::ParallelBench { model, registry, weight, requests, seed } => {
            let m = load_block_model(&model)?;
            let reg = load_registry(&registry)?;
            let weight_id = parse_weight_id(&weight)?;
            let base = m.weight(weight_id)?;
            let ids: Vec<&str> = reg
                .ids()
                .into_iter()
                .filter(|id| reg.get(id).map(|a| a.weight() == weight_id).unwrap_or(false))
                .collect();
            if ids.is_empty() {
                return Err(Error::Argument(format!("registry holds no adapters for {weight}")));
            }
            let mut rng = derive_rng(seed, 0xbe);
            let mut reqs = Vec::with_capacity(requests);
            for i in 0..requests {
                let x = gaussian_matrix(&mut rng, base.cols(), 1, 1.0);
                reqs.push((
                    ids[i % ids.len()].to_string(),
                    x.as_slice().to_vec(),
                ));
            }
            let t0 = std::time::Instant::now();
            let (outputs, report) = reg.parallel_apply(base, &reqs)?;
            let elapsed_us = t0.elapsed().as_secs_f64() * 1e6;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!(
                "served {} requests in {elapsed_us:.1}us ({:.2}us/request)",
                outputs.len(),
                elapsed_us / outputs.len().max(1) as f64
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_weight_id(s: &str) -> Result<WeightId> {
    if let Some(rest) = s.strip_prefix("block") {
        let (num, kind_name) = rest
            .split_once('.')
            .ok_or_else(|| Error::Argument(format!("bad weight id {s:?}")))?;
        let block: usize =
            num.parse().map_err(|_| Error::Argument(format!("bad block index in {s:?}")))?;
        let kind = BLOCK_WEIGHTS
            .into_iter()
            .find(|k| k.name() == kind_name)
            .ok_or_else(|| Error::Argument(format!("unknown weight {kind_name:?}")))?;
        return Ok(WeightId::Block { block, kind });
    }
    if let Some(num) = s.strip_prefix("layer") {
        let layer: usize =
            num.parse().map_err(|_| Error::Argument(format!("bad layer index in {s:?}")))?;
        return Ok(WeightId::Layer { layer });
    }
    Err(Error::Argument(format!("bad weight id {s:?}")))
}

fn load_registry(dir: &Path) -> Result<AdapterRegistry> {
    let mut reg = AdapterRegistry::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "adpt"))
        .collect();
    entries.sort();
    for path in entries {
        reg.register(AnyAdapter::Sparse(load_adapter(&path)?))?;
    }
    Ok(reg)
}

fn theory_cmd(a: TheoryArgs) -> Result<ExitCode> {
    if a.suite != "theorem2" {
        return Err(Error::Config(format!("unknown suite {:?}", a.suite)));
    }
    let cfg: TheorySuiteConfig = match &a.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TheorySuiteConfig {
            dims: a.dims.clone(),
            trials: a.trials,
            seed: a.seed,
            ..Default::default()
        },
    };
    let outcome = run_theory_suite(&cfg);
    let json = serde_json::to_string_pretty(&outcome)?;
    match &a.out {
        Some(path) => write_text(path, &json)?,
        None => println!("{json}"),
    }
    let passed = outcome.reports.iter().filter(|r| r.all_pass()).count();
    println!(
        "theorem2: {passed}/{} trials passed, {} errors",
        outcome.reports.len(),
        outcome.errors.len()
    );
    for e in outcome.errors.iter().take(5) {
        eprintln!("  {e}");
    }
    if outcome.all_pass {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn bench_cmd(a: BenchArgs) -> Result<ExitCode> {
    let cfg: EfficiencyConfig = match &a.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => EfficiencyConfig::default(),
    };
    let rows = run_efficiency_report(&cfg)?;
    let csv = efficiency_csv(&rows);
    match &a.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn experiment_cmd(a: ExperimentArgs) -> Result<ExitCode> {
    let mut cfg: GeneralizationConfig = match &a.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => GeneralizationConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seeds = vec![seed];
    }
    let rows = run_generalization_experiment(&cfg)?;
    let csv = generalization_csv(&rows);
    match &a.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        eprintln!("{failed} runs failed");
    }
    Ok(ExitCode::SUCCESS)
}
