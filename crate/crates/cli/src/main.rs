//! `kdlab` — the experiment command line.
//!
//! Exit codes: 0 on success, 1 on validation/runtime failure, 2 on usage
//! errors (unknown flags or subcommands).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use kdlab::config::ExperimentConfig;
use kdlab::data::{gen_synthetic, write_dataset, SynthSpec};
use kdlab::distill::{pruning_ratio, MethodName, ParamBudget};
use kdlab::gradcheck::run_gradient_suite;
use kdlab::harness::Experiment;
use kdlab::metrics::{read_rows, render_report, MetricsRow};
use kdlab::network::NetworkSpec;
use kdlab::projector::{
    build_projector, check_proposition, projector_param_formula, ProjectorKind, ProjectorSpec,
};
use kdlab::rng::Rng;

#[derive(Parser)]
#[command(
    name = "kdlab",
    version,
    about = "Desk-scale knowledge-distillation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset pair (train.skdd / test.skdd).
    GenData(GenDataArgs),
    /// Train the teacher network from the config and write its checkpoint.
    TrainTeacher(RunArgs),
    /// Run the configured distillation method (checkpoint + metrics CSV).
    Distill(DistillArgs),
    /// Evaluate a checkpoint on the config's test split.
    Eval(EvalArgs),
    /// Count parameters of a network spec or a projector.
    CountParams(CountParamsArgs),
    /// Compute the pruning ratio from the five budget counts.
    PruningRatio(PruningRatioArgs),
    /// Check the projector halving inequality for given dimensions.
    CheckProposition(PropositionArgs),
    /// Run the finite-difference gradient suites; nonzero exit on failure.
    Gradcheck(GradcheckArgs),
    /// Export penultimate features plus labels as CSV.
    ExportFeatures(ExportArgs),
    /// Aggregate metrics CSVs into mean ± std tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    test_per_class: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 0.5)]
    difficulty: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    max_shift: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Stable run identifier (defaults to method-seed-timestamp).
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config method (kd, simkd, joint, sequential, simkd_plus,
    /// multi_teacher, baseline).
    #[arg(long)]
    method: Option<String>,
    /// Override alpha for joint runs.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the reused-block count for simkd_plus runs.
    #[arg(long)]
    k: Option<usize>,
    /// Override the multi-teacher variant (aveg, simkd, simkd_v).
    #[arg(long)]
    variant: Option<String>,
    /// Override the projector reduction factor.
    #[arg(long)]
    r: Option<usize>,
    /// Run one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run several seeds sequentially, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct CountParamsArgs {
    /// Path to a network spec JSON file.
    #[arg(long, conflicts_with_all = ["projector", "cs", "ct", "r"])]
    spec: Option<PathBuf>,
    /// Projector kind: one_conv, two_conv, bottleneck_dw, bottleneck,
    /// linear_vector.
    #[arg(long)]
    projector: Option<String>,
    #[arg(long)]
    cs: Option<u64>,
    #[arg(long)]
    ct: Option<u64>,
    #[arg(long, default_value_t = 2)]
    r: u64,
}

#[derive(Args)]
struct PruningRatioArgs {
    #[arg(long)]
    se: u64,
    #[arg(long)]
    proj: u64,
    #[arg(long)]
    tc: u64,
    #[arg(long)]
    sc: u64,
    #[arg(long)]
    t: u64,
}

#[derive(Args)]
struct PropositionArgs {
    #[arg(long, default_value_t = 64)]
    cs: u64,
    #[arg(long)]
    ct: u64,
    #[arg(long)]
    r: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seeded random instances per suite item.
    #[arg(long, default_value_t = 100)]
    instances: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSV files or run directories containing runs.csv.
    #[arg(long, required = true, value_delimiter = ',')]
    inputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // clap exits with code 2 on usage errors
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => train_teacher(a),
        Command::Distill(a) => distill(a),
        Command::Eval(a) => eval(a),
        Command::CountParams(a) => count_params(a),
        Command::PruningRatio(a) => {
            let budget = ParamBudget {
                se: a.se,
                proj: a.proj,
                t: a.t,
                tc: a.tc,
                sc: a.sc,
            };
            let ratio = pruning_ratio(&budget)?;
            println!("{ratio}");
            Ok(())
        }
        Command::CheckProposition(a) => {
            let chk = check_proposition(a.cs, a.ct, a.r)?;
            let word = |b: bool| if b { "holds" } else { "fails" };
            println!(
                "left: {}, right: {}",
                word(chk.left_holds),
                word(chk.right_holds)
            );
            println!(
                "left condition 9*C_t > 4*r^2: {} (C_t = {}, r = {})",
                word(chk.left_condition),
                a.ct,
                a.r
            );
            if a.ct % a.r == 0 {
                let f_r = projector_param_formula(a.cs, a.ct, a.r)?;
                println!("F({}) = {f_r}", a.r);
            }
            if a.ct % (2 * a.r) == 0 {
                let f_2r = projector_param_formula(a.cs, a.ct, 2 * a.r)?;
                println!("F({}) = {f_2r}", 2 * a.r);
            }
            Ok(())
        }
        Command::Gradcheck(a) => {
            let items = run_gradient_suite(a.instances)?;
            let mut all_ok = true;
            for item in &items {
                println!(
                    "{:<24} {:>4} instances  max rel err {:>10.3e}  {}",
                    item.name,
                    item.instances,
                    item.max_rel_err,
                    if item.pass { "ok" } else { "FAIL" }
                );
                all_ok &= item.pass;
            }
            if !all_ok {
                bail!("gradient suite failed");
            }
            Ok(())
        }
        Command::ExportFeatures(a) => {
            let exp = Experiment::load(&a.config)?;
            let artifact = exp.load_artifact(&a.checkpoint)?;
            exp.export_features(&artifact, &a.out)?;
            println!("features written to {}", a.out.display());
            Ok(())
        }
        Command::Report(a) => report(a),
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let spec = SynthSpec {
        classes: a.classes,
        per_class: a.per_class,
        test_per_class: if a.test_per_class == 0 {
            a.per_class / 2
        } else {
            a.test_per_class
        },
        height: a.height,
        width: a.width,
        channels: a.channels,
        difficulty: a.difficulty,
        seed: a.seed,
        max_shift: a.max_shift,
    };
    let (train, test) = gen_synthetic(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    write_dataset(&train, &a.out.join("train.skdd"))?;
    write_dataset(&test, &a.out.join("test.skdd"))?;
    println!(
        "wrote {} train / {} test samples to {}",
        train.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

fn train_teacher(a: RunArgs) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::from_file(&a.config)?;
    cfg.distill.method = MethodName::Teacher;
    if let Some(seed) = a.seed {
        cfg.distill.seed = seed;
    }
    cfg.validate()?;
    let exp = Experiment::from_config(cfg)?;
    let (report, ckpt) = exp.run_and_save(a.run_id)?;
    println!(
        "teacher: top1 {:.2}% nll {:.4}  checkpoint {}",
        report.final_top1,
        report.final_nll,
        ckpt.display()
    );
    Ok(())
}

fn parse_method(name: &str) -> anyhow::Result<MethodName> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .with_context(|| format!("unknown method {name}"))
}

fn distill(a: DistillArgs) -> anyhow::Result<()> {
    let base = ExperimentConfig::from_file(&a.config)?;
    let seeds: Vec<u64> = if !a.seeds.is_empty() {
        a.seeds.clone()
    } else {
        vec![a.seed.unwrap_or(base.distill.seed)]
    };
    for seed in seeds {
        let mut cfg = base.clone();
        if let Some(m) = &a.method {
            cfg.distill.method = parse_method(m)?;
        }
        if let Some(alpha) = a.alpha {
            cfg.distill.alpha = Some(alpha);
        }
        if let Some(k) = a.k {
            cfg.distill.k = Some(k);
        }
        if let Some(v) = &a.variant {
            cfg.distill.variant = Some(
                serde_json::from_value(serde_json::Value::String(v.clone()))
                    .with_context(|| format!("unknown variant {v}"))?,
            );
        }
        if let Some(r) = a.r {
            cfg.distill.projector.r = r;
        }
        cfg.distill.seed = seed;
        cfg.validate()?;
        let exp = Experiment::from_config(cfg)?;
        let (report, ckpt) = exp.run_and_save(a.run_id.clone())?;
        let l2 = report
            .final_l2
            .map(|v| format!(" l2 {v:.4}"))
            .unwrap_or_default();
        println!(
            "{} seed {}: top1 {:.2}% nll {:.4}{}  checkpoint {}",
            report.method,
            seed,
            report.final_top1,
            report.final_nll,
            l2,
            ckpt.display()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let exp = Experiment::load(&a.config)?;
    let artifact = exp.load_artifact(&a.checkpoint)?;
    let m = exp.evaluate(&artifact)?;
    // full-precision output so replays can be compared exactly
    match m.l2 {
        Some(l2) => println!("top1 {} nll {} l2 {}", m.top1, m.nll, l2),
        None => println!("top1 {} nll {}", m.top1, m.nll),
    }
    Ok(())
}

fn count_params(a: CountParamsArgs) -> anyhow::Result<()> {
    if let Some(path) = a.spec {
        let text = std::fs::read_to_string(&path)?;
        let spec: NetworkSpec =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        spec.validate()?;
        println!("encoder: {}", spec.encoder_param_count());
        println!("classifier: {}", spec.classifier_param_count());
        println!("total: {}", spec.param_count());
        return Ok(());
    }
    let kind_name = a.projector.context("pass --spec or --projector")?;
    let kind: ProjectorKind = serde_json::from_value(serde_json::Value::String(kind_name.clone()))
        .with_context(|| format!("unknown projector kind {kind_name}"))?;
    let (cs, ct) = (
        a.cs.context("--cs is required with --projector")?,
        a.ct.context("--ct is required with --projector")?,
    );
    let spec = ProjectorSpec {
        kind,
        r: a.r as usize,
        c_s: cs as usize,
        c_t: ct as usize,
        spatial_align: false,
    };
    let input = if spec.is_vector_kind() {
        kdlab::layer::Shape::Vector { c: spec.c_s }
    } else {
        kdlab::layer::Shape::Map {
            c: spec.c_s,
            h: 2,
            w: 2,
        }
    };
    let net = build_projector(&spec, input, &Rng::new(0))?;
    println!("materialized: {}", net.param_count());
    if matches!(kind, ProjectorKind::Bottleneck) {
        println!(
            "formula F({}): {}",
            a.r,
            projector_param_formula(cs, ct, a.r)?
        );
    }
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let mut rows: Vec<MetricsRow> = Vec::new();
    for input in &a.inputs {
        let path = if input.is_dir() {
            input.join("runs.csv")
        } else {
            input.clone()
        };
        rows.extend(read_rows(&path).with_context(|| format!("reading {}", path.display()))?);
    }
    if rows.is_empty() {
        bail!("no metrics rows found");
    }
    print!("{}", render_report(&rows));
    Ok(())
}
