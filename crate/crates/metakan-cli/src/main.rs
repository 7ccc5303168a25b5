//! Command-line interface for KAN / MetaKAN fitting, parameter counting,
//! layer clustering, gradient checking, similarity analysis, and sweeps.
//!
//! Exit codes: 0 success, 1 failed check, 2 config or validation error,
//! 3 training divergence, 4 I/O failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use metakan::bench::{self, ExperimentConfig, ModelSpec};
use metakan::count::{count_params, memory_efficient, ModelKind};
use metakan::gradcheck::{analytic_gradients, compare_records, fd_gradients};
use metakan::model_io::{self, LoadedModel};
use metakan::network::{KanNetwork, NetworkShape};
use metakan::train::TrainConfig;
use metakan::{cluster_layers, coeff_cosine_matrix, prompt_distance_matrix, DetRng, Tensor};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "metakan",
    version,
    about = "KAN and MetaKAN fitting, counting, and analysis"
)]
struct Cli {
    /// Seed override, applied on top of any config file value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config file (fit and sweep).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a JSON config; writes model.json, trace.csv,
    /// report.json, and the effective config.
    Fit,
    /// Print formula and exact parameter counts for every model family on a
    /// shape, plus the memory-efficiency verdict.
    Count(CountArgs),
    /// Optimal contiguous clustering of channel sizes.
    Cluster(ClusterArgs),
    /// Finite-difference check of all gradients on a randomly built model.
    Gradcheck(GradcheckArgs),
    /// Emit prompt-distance and coefficient-cosine CSV matrices for a saved
    /// model.
    Analyze(AnalyzeArgs),
    /// Train every model in a config on the same target and rank them.
    Sweep,
}

#[derive(Args)]
struct CountArgs {
    /// Comma-separated layer widths, e.g. 2,2,1,1
    #[arg(long)]
    shape: String,
    /// Grid interval count for spline kinds.
    #[arg(long = "G", default_value_t = 5)]
    grid: usize,
    /// Spline order.
    #[arg(long = "k", default_value_t = 3)]
    order: usize,
    /// RBF center count.
    #[arg(long = "c", default_value_t = 8)]
    centers: usize,
    /// Meta-learner hidden width; enables the Meta rows.
    #[arg(long = "d-hidden")]
    d_hidden: Option<usize>,
    /// Meta-learner count.
    #[arg(long = "C", default_value_t = 1)]
    clusters: usize,
    #[arg(long = "prompt-dim", default_value_t = 1)]
    prompt_dim: usize,
}

#[derive(Args)]
struct ClusterArgs {
    /// Comma-separated channel sizes, e.g. 2,64,128,512
    channels: String,
    #[arg(long = "C")]
    clusters: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model kind: kan, fastkan, wavkan, metakan, metafastkan, metawavkan.
    #[arg(long, default_value = "metakan")]
    kind: String,
    /// Comma-separated layer widths.
    #[arg(long, default_value = "2,3,1")]
    shape: String,
    #[arg(long = "G", default_value_t = 5)]
    grid: usize,
    #[arg(long = "k", default_value_t = 3)]
    order: usize,
    #[arg(long = "c", default_value_t = 8)]
    centers: usize,
    #[arg(long = "d-hidden", default_value_t = 8)]
    d_hidden: usize,
    #[arg(long = "C", default_value_t = 1)]
    clusters: usize,
    #[arg(long = "prompt-dim", default_value_t = 1)]
    prompt_dim: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long = "fd-step", default_value_t = 1e-5)]
    fd_step: f64,
    #[arg(long = "rel-tol", default_value_t = 1e-4)]
    rel_tol: f64,
    /// Corrupt one analytic gradient before comparing (negative control).
    #[arg(long, hide = true)]
    sabotage: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Path to a model JSON file.
    #[arg(long)]
    model: PathBuf,
}

/// Config file for `fit`. Every field has a default; unknown keys are
/// rejected.
#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitConfig {
    target: String,
    input_dim: Option<usize>,
    train_samples: usize,
    test_samples: usize,
    out_dir: PathBuf,
    model: ModelSpec,
    train: TrainConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            target: "product2".to_string(),
            input_dim: None,
            train_samples: 3000,
            test_samples: 1000,
            out_dir: PathBuf::from("out"),
            model: ModelSpec::new(ModelKind::Kan, vec![2, 2, 1]),
            train: TrainConfig::default(),
        }
    }
}

/// Config file for `sweep`: like fit but with a list of models.
#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepConfig {
    target: String,
    input_dim: Option<usize>,
    train_samples: usize,
    test_samples: usize,
    out_dir: PathBuf,
    models: Vec<ModelSpec>,
    train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            target: "product2".to_string(),
            input_dim: None,
            train_samples: 3000,
            test_samples: 1000,
            out_dir: PathBuf::from("out"),
            models: vec![
                ModelSpec::new(ModelKind::Kan, vec![2, 2, 1]),
                ModelSpec::new(ModelKind::MetaKan, vec![2, 2, 1]),
            ],
            train: TrainConfig::default(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Fit => cmd_fit(&cli),
        Command::Count(args) => cmd_count(args),
        Command::Cluster(args) => cmd_cluster(args),
        Command::Gradcheck(args) => cmd_gradcheck(args, cli.seed.unwrap_or(0)),
        Command::Analyze(args) => cmd_analyze(args, cli.out.as_deref()),
        Command::Sweep => cmd_sweep(&cli),
    };
    ExitCode::from(code)
}

fn fail(code: u8, message: impl std::fmt::Display) -> u8 {
    eprintln!("error: {message}");
    code
}

fn read_config_file(path: Option<&Path>) -> Result<String, u8> {
    let path = path.ok_or_else(|| fail(EXIT_CONFIG, "--config <FILE> is required"))?;
    fs::read_to_string(path)
        .map_err(|e| fail(EXIT_IO, format!("cannot read {}: {e}", path.display())))
}

fn write_artifact(path: &Path, contents: &str) -> Result<(), u8> {
    fs::write(path, contents)
        .map_err(|e| fail(EXIT_IO, format!("cannot write {}: {e}", path.display())))
}

fn parse_shape(s: &str) -> Result<Vec<usize>, u8> {
    let widths: Result<Vec<usize>, _> = s.split(',').map(|w| w.trim().parse::<usize>()).collect();
    let widths = widths.map_err(|e| fail(EXIT_CONFIG, format!("bad shape '{s}': {e}")))?;
    if widths.len() < 2 {
        return Err(fail(
            EXIT_CONFIG,
            format!("shape needs >= 2 widths, got '{s}'"),
        ));
    }
    Ok(widths)
}

fn bench_error_code(e: &bench::BenchError) -> u8 {
    match e {
        bench::BenchError::Train(metakan::train::TrainError::Diverged { .. }) => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

fn cmd_fit(cli: &Cli) -> u8 {
    let raw = match read_config_file(cli.config.as_deref()) {
        Ok(raw) => raw,
        Err(code) => return code,
    };
    let mut config: FitConfig = match serde_json::from_str(&raw) {
        Ok(cfg) => cfg,
        Err(e) => return fail(EXIT_CONFIG, format!("invalid config: {e}")),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }

    let target = match bench::lookup(&config.target, config.input_dim) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let experiment = ExperimentConfig {
        model: config.model.clone(),
        train: config.train.clone(),
        train_samples: config.train_samples,
        test_samples: config.test_samples,
    };

    if let Err(e) = fs::create_dir_all(&config.out_dir) {
        return fail(
            EXIT_IO,
            format!("cannot create {}: {e}", config.out_dir.display()),
        );
    }

    let (report, model, trace) = match bench::run_experiment_with_artifacts(&target, &experiment) {
        Ok(done) => done,
        Err(e) => return fail(bench_error_code(&e), e),
    };

    let effective = serde_json::to_string_pretty(&config).expect("config serializes");
    if let Err(code) = write_artifact(&config.out_dir.join("effective_config.json"), &effective) {
        return code;
    }
    if let Err(code) = write_artifact(&config.out_dir.join("trace.csv"), &trace.to_csv_string()) {
        return code;
    }
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Err(code) = write_artifact(&config.out_dir.join("report.json"), &report_json) {
        return code;
    }
    if let Some(model) = &model {
        let model_json = match model {
            bench::BuiltModel::Kan(net) => model_io::kan_to_json(net),
            bench::BuiltModel::MetaKan(net) => model_io::metakan_to_json(net),
        };
        let model_json = match model_json {
            Ok(json) => json,
            Err(e) => return fail(EXIT_IO, e),
        };
        if let Err(code) = write_artifact(&config.out_dir.join("model.json"), &model_json) {
            return code;
        }
    }

    if report.diverged {
        return fail(
            EXIT_DIVERGED,
            format!(
                "training diverged at step {}",
                report.divergence_step.unwrap_or(0)
            ),
        );
    }
    println!(
        "fit {}: params {} (exact {}), train mse {:.3e}, test mse {:.3e} -> {}",
        report.name,
        report.params_formula,
        report.params_exact,
        report.train_mse.unwrap_or(f64::NAN),
        report.test_mse.unwrap_or(f64::NAN),
        config.out_dir.display()
    );
    0
}

fn cmd_count(args: &CountArgs) -> u8 {
    let widths = match parse_shape(&args.shape) {
        Ok(w) => w,
        Err(code) => return code,
    };
    let shape = match NetworkShape::new(widths.clone()) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, e),
    };

    let exact_of = |spec: &ModelSpec| -> Option<u64> {
        spec.build(0).ok().map(|m| m.num_trainable_scalars() as u64)
    };

    println!("shape {:?}", widths);
    println!(
        "{:<24} {:>14} {:>13}",
        "model", "params_formula", "params_exact"
    );
    let mlp = count_params(ModelKind::Mlp, &shape, 1, 0, 0, 0);
    println!("{:<24} {:>14} {:>13}", "mlp", mlp, "-");

    let base_kinds = [ModelKind::Kan, ModelKind::FastKan, ModelKind::WavKan];
    for kind in base_kinds {
        let mut spec = ModelSpec::new(kind, widths.clone());
        spec.grid = args.grid;
        spec.order = args.order;
        spec.centers = args.centers;
        let formula = count_params(
            kind,
            &shape,
            kind.dim_w(args.grid, args.order, args.centers),
            0,
            0,
            0,
        );
        let exact = exact_of(&spec)
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".into());
        let label = match kind {
            ModelKind::Kan => format!("kan(G={},k={})", args.grid, args.order),
            ModelKind::FastKan => format!("fastkan(c={})", args.centers),
            _ => "wavkan".to_string(),
        };
        println!("{:<24} {:>14} {:>13}", label, formula, exact);
    }

    if let Some(d_hidden) = args.d_hidden {
        for kind in base_kinds {
            let meta = kind.meta_counterpart().expect("base kinds have meta forms");
            let mut spec = ModelSpec::new(meta, widths.clone());
            spec.grid = args.grid;
            spec.order = args.order;
            spec.centers = args.centers;
            spec.d_hidden = d_hidden;
            spec.clusters = args.clusters;
            spec.prompt_dim = args.prompt_dim;
            let dim_w = meta.dim_w(args.grid, args.order, args.centers);
            let formula = count_params(
                meta,
                &shape,
                dim_w,
                d_hidden,
                args.clusters,
                args.prompt_dim,
            );
            let exact = exact_of(&spec)
                .map(|v| v.to_string())
                .unwrap_or_else(|| "-".into());
            let verdict = memory_efficient(
                meta,
                &shape,
                dim_w,
                d_hidden,
                args.clusters,
                args.prompt_dim,
            )
            .expect("meta kinds compare");
            println!(
                "{:<24} {:>14} {:>13}   {} (margin {})",
                format!("{}(d={},C={})", meta.label(), d_hidden, args.clusters),
                formula,
                exact,
                if verdict.efficient {
                    "efficient"
                } else {
                    "not efficient"
                },
                verdict.margin
            );
        }
    }
    0
}

fn cmd_cluster(args: &ClusterArgs) -> u8 {
    let channels: Result<Vec<f64>, _> = args
        .channels
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect();
    let channels = match channels {
        Ok(c) => c,
        Err(e) => {
            return fail(
                EXIT_CONFIG,
                format!("bad channels '{}': {e}", args.channels),
            )
        }
    };
    match cluster_layers(&channels, args.clusters) {
        Ok(plan) => {
            let rendered: Vec<String> = plan
                .intervals()
                .iter()
                .map(|(s, e)| format!("({s},{e})"))
                .collect();
            println!("{}", rendered.join(" "));
            0
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

fn cmd_gradcheck(args: &GradcheckArgs, seed: u64) -> u8 {
    let kind = match ModelKind::parse(&args.kind) {
        Ok(k) => k,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let widths = match parse_shape(&args.shape) {
        Ok(w) => w,
        Err(code) => return code,
    };
    let out_dim = *widths.last().unwrap();
    let mut spec = ModelSpec::new(kind, widths);
    spec.grid = args.grid;
    spec.order = args.order;
    spec.centers = args.centers;
    spec.d_hidden = args.d_hidden;
    spec.clusters = args.clusters;
    spec.prompt_dim = args.prompt_dim;

    let model = match spec.build(seed) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_CONFIG, e),
    };

    let n = spec.shape[0];
    let mut rng = DetRng::keyed(seed, 0x6763);
    let batch = Tensor::matrix(
        args.batch,
        n,
        (0..args.batch * n)
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect(),
    )
    .expect("batch shape");
    let target = Tensor::matrix(
        args.batch,
        out_dim,
        (0..args.batch * out_dim)
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect(),
    )
    .expect("target shape");

    let store = match &model {
        bench::BuiltModel::Kan(net) => net.params.clone(),
        bench::BuiltModel::MetaKan(net) => net.params.clone(),
    };
    let handles = store.handles();
    let build = |tape: &mut metakan::Tape,
                 store: &metakan::ParamStore|
     -> Result<metakan::Var, metakan::GradError> {
        let xv = tape.constant(batch.clone())?;
        let pred = match &model {
            bench::BuiltModel::Kan(net) => net.forward_on_tape(tape, store, xv)?,
            bench::BuiltModel::MetaKan(net) => net.forward_on_tape(tape, store, xv)?,
        };
        let yv = tape.constant(target.clone())?;
        metakan::train::mse_loss(tape, pred, yv)
    };

    let (_, mut analytic) = match analytic_gradients(&store, &build) {
        Ok(done) => done,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if args.sabotage {
        analytic.scale_in_place(handles[0], 1.02);
    }
    let fd = match fd_gradients(&store, &handles, &build, args.fd_step) {
        Ok(fd) => fd,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let report = compare_records(&store, &handles, &analytic, &fd, args.rel_tol);

    for (group, err) in report.by_group() {
        println!("{:<12} max rel err {err:.3e}", group.label());
    }
    if report.passed() {
        println!("gradcheck passed (tol {:.1e})", args.rel_tol);
        0
    } else {
        eprintln!(
            "gradcheck FAILED: worst {:.3e} > {:.1e}",
            report.worst(),
            args.rel_tol
        );
        EXIT_CHECK_FAILED
    }
}

fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = (0..m.cols()).map(|c| format!("{}", m.at(r, c))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn cmd_analyze(args: &AnalyzeArgs, out: Option<&Path>) -> u8 {
    let raw = match fs::read_to_string(&args.model) {
        Ok(raw) => raw,
        Err(e) => {
            return fail(
                EXIT_IO,
                format!("cannot read {}: {e}", args.model.display()),
            )
        }
    };
    let loaded = match model_io::model_from_json(&raw) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_CONFIG, format!("invalid model file: {e}")),
    };
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| {
        args.model
            .parent()
            .unwrap_or(Path::new("."))
            .join("analysis")
    });
    if let Err(e) = fs::create_dir_all(&out_dir) {
        return fail(EXIT_IO, format!("cannot create {}: {e}", out_dir.display()));
    }

    let cosine_of = |net: &KanNetwork, layer: usize| {
        let (n_in, n_out) = (net.shape().widths()[layer], net.shape().widths()[layer + 1]);
        let mut vectors = Vec::with_capacity(n_in * n_out);
        for i in 0..n_in {
            for j in 0..n_out {
                vectors.push(net.edge_weights(layer, i, j));
            }
        }
        coeff_cosine_matrix(&vectors)
    };

    let write_layer = |name: &str, layer: usize, m: &Tensor| -> Result<(), u8> {
        write_artifact(
            &out_dir.join(format!("{name}_layer{layer}.csv")),
            &matrix_csv(m),
        )
    };

    match loaded {
        LoadedModel::Kan(net) => {
            eprintln!("plain KAN model: no prompts, distance analysis skipped");
            for l in 0..net.shape().depth() {
                let m = match cosine_of(&net, l) {
                    Ok(m) => m,
                    Err(e) => return fail(EXIT_CONFIG, e),
                };
                if let Err(code) = write_layer("coeff_cosine", l, &m) {
                    return code;
                }
            }
        }
        LoadedModel::MetaKan(net) => {
            let materialized = match net.materialize() {
                Ok(k) => k,
                Err(e) => return fail(EXIT_CONFIG, e),
            };
            for l in 0..net.shape().depth() {
                let dist = match prompt_distance_matrix(net.prompts(l)) {
                    Ok(m) => m,
                    Err(e) => return fail(EXIT_CONFIG, e),
                };
                if let Err(code) = write_layer("prompt_distance", l, &dist) {
                    return code;
                }
                let cos = match cosine_of(&materialized, l) {
                    Ok(m) => m,
                    Err(e) => return fail(EXIT_CONFIG, e),
                };
                if let Err(code) = write_layer("coeff_cosine", l, &cos) {
                    return code;
                }
            }
        }
    }
    println!("analysis written to {}", out_dir.display());
    0
}

fn cmd_sweep(cli: &Cli) -> u8 {
    let raw = match read_config_file(cli.config.as_deref()) {
        Ok(raw) => raw,
        Err(code) => return code,
    };
    let mut config: SweepConfig = match serde_json::from_str(&raw) {
        Ok(cfg) => cfg,
        Err(e) => return fail(EXIT_CONFIG, format!("invalid config: {e}")),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }

    let target = match bench::lookup(&config.target, config.input_dim) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let result = match bench::compare_sweep(
        &target,
        &config.models,
        &config.train,
        config.train_samples,
        config.test_samples,
    ) {
        Ok(r) => r,
        Err(e) => return fail(bench_error_code(&e), e),
    };

    if let Err(e) = fs::create_dir_all(&config.out_dir) {
        return fail(
            EXIT_IO,
            format!("cannot create {}: {e}", config.out_dir.display()),
        );
    }
    let effective = serde_json::to_string_pretty(&config).expect("config serializes");
    if let Err(code) = write_artifact(&config.out_dir.join("effective_config.json"), &effective) {
        return code;
    }
    if let Err(code) = write_artifact(&config.out_dir.join("reports.jsonl"), &result.to_jsonl()) {
        return code;
    }
    if let Err(code) = write_artifact(&config.out_dir.join("summary.csv"), &result.summary_csv()) {
        return code;
    }
    print!("{}", result.summary_csv());
    0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_config_rejects_unknown_keys_by_name() {
        let err = serde_json::from_str::<FitConfig>(r#"{"gird": 5}"#).unwrap_err();
        assert!(err.to_string().contains("gird"), "{err}");
    }

    #[test]
    fn fit_config_defaults_parse() {
        let config: FitConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config.target, "product2");
        assert_eq!(config.train_samples, 3000);
    }
}
