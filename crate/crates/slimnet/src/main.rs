//! Command-line driver: lossless fusion, low-rank optimization, FLOP
//! accounting, single-input evaluation, and output comparison, all over
//! manifest (JSON) + weights-blob file pairs.
//!
//! Exit codes: 0 success, 1 diff tolerance exceeded, 2 usage or
//! validation error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;

use slimnet::error::Result;
use slimnet::evaluator::{compare_models, forward, random_inputs};
use slimnet::factorization::{RankGrid, Target};
use slimnet::flops::model_cost;
use slimnet::fusion::run_lossless_pass_logged;
use slimnet::model::Model;
use slimnet::report::{Action, OptimizationReport};
use slimnet::selector::{optimize_model, SelectorConfig};
use slimnet::serialize::{load_model_with_eps, load_weights, save_model};
use slimnet::tensor::Tensor4;

#[derive(Parser)]
#[command(name = "slimnet", version, about = "Lossless fusion and low-rank optimization for small inference graphs")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply the lossless fusion pass and write the fused model.
    Fuse(FuseArgs),
    /// Fuse, then factorize layers chosen by the accuracy-vs-speed weight p.
    Optimize(OptimizeArgs),
    /// Print per-layer and total FLOPs and byte costs.
    Flops(FlopsArgs),
    /// Run the model on one input and write the output tensors.
    Eval(EvalArgs),
    /// Compare two models on seeded random inputs.
    Diff(DiffArgs),
}

/// A model on disk: manifest plus weights blob.
#[derive(Args)]
struct ModelArgs {
    /// Model manifest (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Weights blob.
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    input: ModelArgs,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_weights: PathBuf,
    /// Batch-norm epsilon assumed for manifests that omit it.
    #[arg(long, default_value_t = 1e-5)]
    eps: f32,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetArg {
    Cpu,
    Gpu,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    input: ModelArgs,
    /// Accuracy-vs-speed weight in [0, 1]; higher preserves accuracy.
    #[arg(short)]
    p: f64,
    /// Restricts factorization ranks to power-of-two widths when `gpu`.
    #[arg(long, value_enum, default_value_t = TargetArg::Cpu)]
    target: TargetArg,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_weights: PathBuf,
    /// Where to write the per-layer report JSON.
    #[arg(long)]
    report: PathBuf,
    /// Accuracy threshold at the input end of the network.
    #[arg(long, default_value_t = 0.99)]
    start_threshold: f64,
    /// Maximum factorization chain length (1 disables chains).
    #[arg(long, default_value_t = 2)]
    max_chain: usize,
    /// Batch-norm epsilon assumed for manifests that omit it.
    #[arg(long, default_value_t = 1e-5)]
    eps: f32,
    /// Recorded in the report for provenance.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    input: ModelArgs,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    input: ModelArgs,
    /// Input tensor file (weights-blob format, single tensor).
    #[arg(long = "input", conflicts_with = "random")]
    input_tensor: Option<PathBuf>,
    /// Use a seeded standard-normal input instead of a file.
    #[arg(long)]
    random: bool,
    /// Seed for --random.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the output tensors (weights-blob format).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiffArgs {
    /// Reference model manifest.
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    weights_a: PathBuf,
    #[arg(long)]
    model_b: PathBuf,
    #[arg(long)]
    weights_b: PathBuf,
    /// Number of seeded random inputs to compare on.
    #[arg(long, default_value_t = 8)]
    n_inputs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exit 1 if the largest absolute output difference exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn load(args: &ModelArgs, eps: f32) -> Result<Model> {
    let manifest = fs::read(&args.model)?;
    let weights = fs::read(&args.weights)?;
    load_model_with_eps(&manifest, &weights, eps)
}

fn write_model(m: &Model, model_path: &PathBuf, weights_path: &PathBuf) -> Result<()> {
    let (manifest, weights) = save_model(m);
    fs::write(model_path, manifest)?;
    fs::write(weights_path, weights)?;
    Ok(())
}

fn cmd_fuse(a: &FuseArgs) -> Result<u8> {
    let m = load(&a.input, a.eps)?;
    let before = model_cost(&m)?;
    let (fused, _) = run_lossless_pass_logged(&m)?;
    let after = model_cost(&fused)?;
    write_model(&fused, &a.out_model, &a.out_weights)?;
    println!("nodes: {} → {}", m.nodes.len(), fused.nodes.len());
    println!("flops: {} → {}", before.total_flops, after.total_flops);
    Ok(0)
}

fn print_summary(report: &OptimizationReport) {
    println!(
        "{:<16} {:<11} {:<28} {:>6} {:>7} {:>7} {:>7}  {}",
        "layer", "action", "kind", "b", "A", "R", "S", "flops"
    );
    for l in &report.layers {
        let b = l
            .b
            .as_ref()
            .map(|v| {
                v.as_vec().iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",")
            })
            .unwrap_or_else(|| "-".into());
        let fmt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<16} {:<11} {:<28} {:>6} {:>7} {:>7} {:>7}  {} → {}",
            l.name,
            match l.action {
                Action::Kept => "kept",
                Action::Fused => "fused",
                Action::Factorized => "factorized",
            },
            l.kind,
            b,
            fmt(l.a),
            fmt(l.r),
            fmt(l.s),
            l.flops_before,
            l.flops_after,
        );
    }
    println!(
        "total flops: {} → {} ({:.2}x)",
        report.totals.flops_before, report.totals.flops_after, report.totals.flop_reduction_ratio
    );
}

fn cmd_optimize(a: &OptimizeArgs) -> Result<u8> {
    let m = load(&a.input, a.eps)?;
    let cfg = SelectorConfig {
        p: a.p,
        start_threshold: a.start_threshold,
        target: match a.target {
            TargetArg::Cpu => Target::Cpu,
            TargetArg::Gpu => Target::Gpu,
        },
        grid: RankGrid::PowersOfTwo,
        max_chain: a.max_chain,
        seed: a.seed,
    };
    let (optimized, report) = optimize_model(&m, &cfg)?;
    write_model(&optimized, &a.out_model, &a.out_weights)?;
    fs::write(&a.report, report.to_json()?)?;
    print_summary(&report);
    Ok(0)
}

fn cmd_flops(a: &FlopsArgs) -> Result<u8> {
    let m = load(&a.input, 1e-5)?;
    let cost = model_cost(&m)?;
    match a.format {
        Format::Json => {
            let layers: Vec<serde_json::Value> = cost
                .per_node
                .iter()
                .map(|n| {
                    serde_json::json!({
                        "name": n.name,
                        "kind": n.kind.label(),
                        "flops": n.flops,
                        "weight_bytes": n.weight_bytes,
                        "activation_bytes": n.activation_bytes,
                    })
                })
                .collect();
            let doc = serde_json::json!({
                "layers": layers,
                "totals": {
                    "flops": cost.total_flops,
                    "weight_bytes": cost.total_weight_bytes,
                    "activation_bytes": cost.total_activation_bytes,
                },
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
        Format::Table => {
            println!(
                "{:<20} {:<16} {:>14} {:>14} {:>18}",
                "layer", "kind", "flops", "weight_bytes", "activation_bytes"
            );
            for n in &cost.per_node {
                println!(
                    "{:<20} {:<16} {:>14} {:>14} {:>18}",
                    n.name,
                    n.kind.label(),
                    n.flops,
                    n.weight_bytes,
                    n.activation_bytes
                );
            }
            println!(
                "{:<20} {:<16} {:>14} {:>14} {:>18}",
                "total", "", cost.total_flops, cost.total_weight_bytes,
                cost.total_activation_bytes
            );
        }
    }
    Ok(0)
}

fn cmd_eval(a: &EvalArgs) -> Result<u8> {
    let m = load(&a.input, 1e-5)?;
    let shape = m.input_shape;
    let input = match (&a.input_tensor, a.random) {
        (Some(path), false) => {
            let tensors = load_weights(&fs::read(path)?)?;
            let (name, t) = tensors.first().ok_or_else(|| {
                slimnet::error::Error::InvalidArgument("input file holds no tensors".into())
            })?;
            if t.len() != shape.elements() {
                return Err(slimnet::error::Error::InvalidArgument(format!(
                    "input tensor `{name}` has {} elements, model expects {} ({shape})",
                    t.len(),
                    shape.elements()
                )));
            }
            Tensor4::with_ndim((shape.c, shape.h, shape.w, 1), 3, t.as_slice().to_vec())?
        }
        (None, true) => random_inputs(shape, 1, a.seed).remove(0),
        _ => {
            return Err(slimnet::error::Error::InvalidArgument(
                "exactly one of --input-tensor or --random is required".into(),
            ))
        }
    };
    let activations = forward(&m, &input)?;
    let mut outputs: IndexMap<String, Tensor4> = IndexMap::new();
    for edge in m.terminal_edges() {
        outputs.insert(edge.clone(), activations[&edge].clone());
    }
    fs::write(&a.out, slimnet::serialize::save_weights(&outputs))?;
    println!("wrote {} output tensor(s) to {}", outputs.len(), a.out.display());
    Ok(0)
}

fn cmd_diff(a: &DiffArgs) -> Result<u8> {
    let ma = load(&ModelArgs { model: a.model_a.clone(), weights: a.weights_a.clone() }, 1e-5)?;
    let mb = load(&ModelArgs { model: a.model_b.clone(), weights: a.weights_b.clone() }, 1e-5)?;
    let stats = compare_models(&ma, &mb, a.n_inputs, a.seed)?;
    for e in &stats.per_edge {
        println!("{}: max_abs {:.3e} mean_rel {:.3e}", e.edge, e.max_abs, e.mean_rel);
    }
    println!("max_abs {:.3e} mean_rel {:.3e}", stats.max_abs, stats.mean_rel);
    Ok(if stats.max_abs > a.tol { 1 } else { 0 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Fuse(a) => cmd_fuse(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diff(a) => cmd_diff(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
