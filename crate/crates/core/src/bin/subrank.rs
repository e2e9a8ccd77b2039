use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use subrank::datagen::{self, generate, generate_with_basis, split, Dataset, SyntheticSpec};
use subrank::decompose::{
    analyses_from_search, analyses_from_transforms, apply_factorization, build_report, merge_unprofitable,
    Accuracies, FactorPolicy, UtilizationReport,
};
use subrank::insights::{self, DecaySetup};
use subrank::io::{self, load_model, read_json, save_model, write_json};
use subrank::nn::{evaluate, finetune_decomposed, train, EpochStats, NetworkDef, TrainConfig};
use subrank::ranksearch::{apply_outcome, search_network, RankSearchConfig, SearchOutcome};
use subrank::transform::analyze_network;
use subrank::{Error, Result};

#[derive(Parser)]
#[command(name = "subrank", version, about = "Utilized-rank analysis and compression of MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-subspace classification dataset as CSV.
    GenData(GenDataArgs),
    /// Train an MLP on a CSV dataset.
    Train(TrainArgs),
    /// Project every layer at a fixed energy and report utilization.
    Analyze(AnalyzeArgs),
    /// Search per-layer subspace dimensions under an accuracy tolerance.
    RankSearch(RankSearchArgs),
    /// Replace transformed layers by low-rank factor pairs.
    Decompose(DecomposeArgs),
    /// Train a factored model, then fold unprofitable pairs back.
    Finetune(FinetuneArgs),
    /// Run one of the subspace experiments.
    Insights(InsightsArgs),
    /// Convert a utilization report to a snapshot table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON dataset spec; defaults to rank 3 in 16 dimensions, 4 classes.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also split off a validation set and write it here.
    #[arg(long)]
    val_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
}

/// Architecture and optimizer settings read from `--config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    #[serde(default = "default_hidden")]
    hidden: Vec<usize>,
    #[serde(flatten)]
    training: TrainConfig,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { hidden: default_hidden(), training: TrainConfig::default() }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss and accuracy as JSON.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Data whose activations define the subspaces.
    #[arg(long)]
    data: PathBuf,
    /// Held-out data for the accuracy columns (defaults to `--data`).
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Energy kept on both sides of every layer.
    #[arg(long, default_value_t = 0.9999)]
    energy: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct RankSearchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Data whose activations define the subspaces.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val_data: PathBuf,
    /// Allowed accuracy drop per transformation, in percentage points.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 32)]
    max_depth: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the transformed model.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Profitable,
    All,
}

#[derive(Args)]
struct DecomposeArgs {
    /// The trained (untransformed) model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Search outcome to apply; without it `--energy` is used.
    #[arg(long)]
    outcome: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9999)]
    energy: f64,
    #[arg(long, value_enum, default_value_t = Policy::Profitable)]
    policy: Policy,
    #[arg(long)]
    out: PathBuf,
    /// Also write the utilization report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// A model with factored layers.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Keep every factored pair, profitable or not.
    #[arg(long)]
    keep_factored: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    WeightDecay,
    InitSplit,
    GradientSpan,
    ReluSpectrum,
    SkipRank,
    MixupSpan,
    LowrankInit,
}

#[derive(Args)]
struct InsightsArgs {
    #[arg(value_enum)]
    name: Experiment,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Plot-ready CSV: traces for weight-decay, spectra otherwise.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Utilization report JSON.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

fn read_run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.training.seed = seed;
    }
    cfg.training.validate()?;
    Ok(cfg)
}

fn write_report(path: &Path, report: &UtilizationReport, format: Format) -> Result<()> {
    let text = match format {
        Format::Json => io::to_json(report)?,
        Format::Csv => io::report_to_csv(report)?,
    };
    fs::write(path, text)?;
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(p) => read_json(p)?,
        None => SyntheticSpec {
            ambient_dim: 16,
            intrinsic_rank: 3,
            classes: 4,
            samples_per_class: 100,
            noise_sigma: 0.0,
            seed: 0,
        },
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let data = generate(&spec)?;
    match &args.val_out {
        Some(val_out) => {
            let (tr, va) = split(&data, args.train_fraction, spec.seed)?;
            datagen::write_csv(&args.out, &tr)?;
            datagen::write_csv(val_out, &va)?;
            eprintln!("wrote {} training and {} validation samples", tr.len(), va.len());
        }
        None => {
            datagen::write_csv(&args.out, &data)?;
            eprintln!("wrote {} samples", data.len());
        }
    }
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let cfg = read_run_config(args.config.as_deref(), args.seed)?;
    let data = datagen::load_csv(&args.data)?;
    let net = NetworkDef::mlp(data.dim(), &cfg.hidden, data.classes(), cfg.training.seed);
    let (net, history) = train(net, &data, &cfg.training)?;
    if let Some(last) = history.last() {
        eprintln!("epoch {}: loss {:.6}, train accuracy {:.4}", last.epoch, last.loss, last.accuracy);
    }
    save_model(&args.out, &net)?;
    if let Some(path) = &args.history {
        write_json::<Vec<EpochStats>>(path, &history)?;
    }
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let net = load_model(&args.model)?;
    let data = datagen::load_csv(&args.data)?;
    let val = args.val_data.as_ref().map(datagen::load_csv).transpose()?.unwrap_or_else(|| data.clone());
    let transforms = analyze_network(&net, &data.x, args.energy, args.energy)?;
    let mut transformed = net.clone();
    for t in &transforms {
        transformed.set_linear_weight(t.layer, t.transform.w_prime.clone())?;
    }
    let accuracies = Accuracies {
        original: Some(evaluate(&net, &val)?),
        transformed: Some(evaluate(&transformed, &val)?),
        finetuned: None,
    };
    let report = build_report(None, &analyses_from_transforms(&transforms)?, accuracies)?;
    eprintln!("MLU {:.4}", report.mlu);
    write_report(&args.out, &report, args.format)
}

fn rank_search(args: RankSearchArgs) -> Result<()> {
    let net = load_model(&args.model)?;
    let data = datagen::load_csv(&args.data)?;
    let val = datagen::load_csv(&args.val_data)?;
    let config = RankSearchConfig { epsilon: args.epsilon, max_depth: args.max_depth };
    let result = search_network(&net, &data.x, &val, &config)?;
    let o = &result.outcome;
    eprintln!(
        "accuracy {:.4} -> {:.4} after {} evaluations ({} fallbacks)",
        o.baseline_accuracy, o.final_accuracy, o.evaluations, o.fallbacks
    );
    write_json(&args.out, o)?;
    if let Some(path) = &args.model_out {
        save_model(path, &result.network)?;
    }
    Ok(())
}

fn decompose(args: DecomposeArgs) -> Result<()> {
    let net = load_model(&args.model)?;
    let data = datagen::load_csv(&args.data)?;
    let (transformed, analyses, outcome) = match &args.outcome {
        Some(path) => {
            let outcome: SearchOutcome = read_json(path)?;
            let transformed = apply_outcome(&net, &data.x, &outcome)?;
            (transformed, analyses_from_search(&net, &outcome)?, Some(outcome))
        }
        None => {
            let transforms = analyze_network(&net, &data.x, args.energy, args.energy)?;
            let mut transformed = net.clone();
            for t in &transforms {
                transformed.set_linear_weight(t.layer, t.transform.w_prime.clone())?;
            }
            (transformed, analyses_from_transforms(&transforms)?, None)
        }
    };
    let policy = match args.policy {
        Policy::Profitable => FactorPolicy::Profitable,
        Policy::All => FactorPolicy::All,
    };
    let factored = apply_factorization(&transformed, &analyses, policy)?;
    save_model(&args.out, &factored)?;
    if let Some(path) = &args.report {
        let val = args.val_data.as_ref().map(datagen::load_csv).transpose()?.unwrap_or_else(|| data.clone());
        let accuracies = Accuracies {
            original: Some(evaluate(&net, &val)?),
            transformed: Some(evaluate(&factored, &val)?),
            finetuned: None,
        };
        write_json(path, &build_report(outcome.as_ref(), &analyses, accuracies)?)?;
    }
    eprintln!("parameters {} -> {}", net.parameter_count(), factored.parameter_count());
    Ok(())
}

fn finetune(args: FinetuneArgs) -> Result<()> {
    let net = load_model(&args.model)?;
    let data = datagen::load_csv(&args.data)?;
    let mut cfg = read_run_config(args.config.as_deref(), args.seed)?.training;
    cfg.epochs = args.epochs;
    let (net, _) = finetune_decomposed(net, &data, &cfg)?;
    let net = if args.keep_factored { net } else { merge_unprofitable(&net) };
    if let Some(val) = &args.val_data {
        eprintln!("validation accuracy {:.4}", evaluate(&net, &datagen::load_csv(val)?)?);
    }
    save_model(&args.out, &net)
}

#[derive(Serialize)]
struct GradientSpanResult {
    mlp: Vec<Option<f64>>,
    residual: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct SpectraResult {
    witness: insights::SpectrumPair,
    relu: Vec<insights::SpectrumPair>,
    skip: Vec<insights::SkipSpectrum>,
}

#[derive(Serialize)]
struct MixupResult {
    batches: usize,
    max_residual: f64,
}

fn planted(seed: u64) -> Result<(Dataset, subrank::Matrix)> {
    generate_with_basis(&SyntheticSpec {
        ambient_dim: 16,
        intrinsic_rank: 3,
        classes: 4,
        samples_per_class: 100,
        noise_sigma: 0.0,
        seed,
    })
}

fn spectra_csv(relu: &[insights::SpectrumPair]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["relu", "index", "pre", "post"])?;
    for (i, p) in relu.iter().enumerate() {
        for (j, (a, b)) in p.pre.iter().zip(&p.post).enumerate() {
            w.write_record([i.to_string(), j.to_string(), format!("{a:.16e}"), format!("{b:.16e}")])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv emits UTF-8"))
}

fn insights_cmd(args: InsightsArgs) -> Result<()> {
    let seed = args.seed;
    let quick = TrainConfig { learning_rate: 0.05, epochs: 30, batch_size: 16, seed, ..Default::default() };
    let json = match args.name {
        Experiment::WeightDecay => {
            let exp = DecaySetup::standard(seed).run()?;
            eprintln!(
                "perp fraction {:.4} -> {:.4}, MLU {:.4} -> {:.4} with decay",
                exp.without.final_perp_fraction, exp.with.final_perp_fraction, exp.without.mlu, exp.with.mlu
            );
            if let Some(path) = &args.csv {
                exp.write_trace_csv(fs::File::create(path)?)?;
            }
            io::to_json(&exp)?
        }
        Experiment::InitSplit => {
            let seeds: Vec<u64> = (seed..seed + 20).collect();
            io::to_json(&insights::init_split(64, 64, 8, &seeds)?)?
        }
        Experiment::GradientSpan => {
            let (data, _) = planted(seed)?;
            let batch = data.subset(&(0..32).collect::<Vec<_>>());
            let mlp = NetworkDef::mlp(data.dim(), &[32, 32], data.classes(), seed);
            let res = NetworkDef::residual_mlp(data.dim(), 16, 2, data.classes(), seed);
            io::to_json(&GradientSpanResult {
                mlp: insights::gradient_span_check(&mlp, &batch.x, &batch.labels)?,
                residual: insights::gradient_span_check(&res, &batch.x, &batch.labels)?,
            })?
        }
        Experiment::ReluSpectrum | Experiment::SkipRank => {
            let (data, _) = planted(seed)?;
            let net = match args.name {
                Experiment::ReluSpectrum => NetworkDef::mlp(data.dim(), &[32, 32], data.classes(), seed),
                _ => NetworkDef::residual_mlp(data.dim(), 16, 2, data.classes(), seed),
            };
            let (net, _) = train(net, &data, &quick)?;
            let spectra = insights::network_spectra(&net, &data.x)?;
            let pre = subrank::Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0], vec![2.0, -2.0]])?;
            let witness = insights::relu_spectrum(&pre, &pre.map(|v| v.max(0.0)))?;
            if let Some(path) = &args.csv {
                fs::write(path, spectra_csv(&spectra.relu)?)?;
            }
            io::to_json(&SpectraResult { witness, relu: spectra.relu, skip: spectra.skip })?
        }
        Experiment::MixupSpan => {
            let (data, _) = planted(seed)?;
            let batches = 1000;
            let max_residual = insights::mixup_sweep(&data.x, batches, 32, 0.4, seed)?;
            io::to_json(&MixupResult { batches, max_residual })?
        }
        Experiment::LowrankInit => {
            let (data, basis) = planted(seed)?;
            let (tr, va) = split(&data, 0.8, seed)?;
            let net = NetworkDef::mlp(data.dim(), &[32, 32], data.classes(), seed);
            io::to_json(&insights::lowrank_init_check(&net, &basis, &tr, &va, &quick)?)?
        }
    };
    fs::write(&args.out, json)?;
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let report: UtilizationReport = read_json(&args.input)?;
    write_report(&args.out, &report, args.format)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Analyze(a) => analyze(a),
        Command::RankSearch(a) => rank_search(a),
        Command::Decompose(a) => decompose(a),
        Command::Finetune(a) => finetune(a),
        Command::Insights(a) => insights_cmd(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
