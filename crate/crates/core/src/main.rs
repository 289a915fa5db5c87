use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oodbench::datasets::ToyDataset;
use oodbench::detectors::{Method, Scheme};
use oodbench::experiments::{
    build_report, evaluate_policy, model_for_training, run_experiment, run_toy_suite, ExemplarCount,
    ExperimentSpec, FeaturePair, MethodConfig, RegimeSpec, SweepGrid, DEFAULT_LOW_FRACTION, SWEEP_NOTE,
};
use oodbench::finetune::{train_head, FinetuneConfig, HeadInit, HeadOutcome};
use oodbench::io::{
    ingest_as_model, read_feature_file, read_report_dir, report_csv, win_matrices, write_feature_file,
    write_report_csv, write_report_json, FeatureCatalog, FeatureMeta, FeatureSet, Policy, Preprocessing, Regime,
    Report, ReportRow, Role, Selection,
};
use oodbench::models::PairwiseHead;
use oodbench::numkit::Prng;
use oodbench::{Error, Result};

const OUT_DIR_ENV: &str = "OODBENCH_OUT_DIR";

/// Out-of-distribution detection benchmark.
#[derive(Parser, Debug)]
#[command(name = "oodbench", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a toy dataset as three OODF files (id_train, id_test, ood_test).
    Toygen(ToygenArgs),
    /// Evaluate one method on one (ID, OOD) pair, or run an experiment spec.
    Eval(EvalArgs),
    /// Grid-search ODIN or Mahalanobis hyper-parameters on the OOD test data.
    Sweep(SweepArgs),
    /// Run the toy-dataset suite over several seeds.
    ToySuite(ToySuiteArgs),
    /// Fine-tune the pairwise distance head on labelled training features.
    Finetune(FinetuneArgs),
    /// Assemble win matrices and the detailed table from report files.
    Compare(CompareArgs),
    /// Validate OODF files and check that they ingest together.
    IngestCheck(IngestCheckArgs),
}

#[derive(Args, Debug)]
struct ToygenArgs {
    /// Toy dataset, 1 or 2.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    dataset: u8,
    #[arg(long)]
    seed: u64,
    /// Output directory [default: $OODBENCH_OUT_DIR or .]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PairInputs {
    #[arg(long)]
    id_train: PathBuf,
    #[arg(long)]
    id_test: PathBuf,
    #[arg(long)]
    ood_test: PathBuf,
    /// Extra OODF files holding preprocessed test variants.
    #[arg(long, num_args = 1..)]
    variants: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    regime: RegimeArg,
    /// Per-class share of training data kept in the low regime.
    #[arg(long, default_value_t = DEFAULT_LOW_FRACTION)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum RegimeArg {
    Full,
    Low,
}

impl PairInputs {
    fn regime(&self) -> Result<RegimeSpec> {
        match self.regime {
            RegimeArg::Full => Ok(RegimeSpec::FULL),
            RegimeArg::Low if self.fraction > 0.0 && self.fraction <= 1.0 => Ok(RegimeSpec::low(self.fraction)),
            RegimeArg::Low => Err(Error::InvalidArgument(format!("--fraction {} is not in (0, 1]", self.fraction))),
        }
    }

    fn catalog(&self) -> Result<(FeatureCatalog, String, String)> {
        let train = read_feature_file(&self.id_train)?;
        let id_test = read_feature_file(&self.id_test)?;
        let ood_test = read_feature_file(&self.ood_test)?;
        expect_role(&train, Role::IdTrain, &self.id_train)?;
        expect_role(&id_test, Role::IdTest, &self.id_test)?;
        expect_role(&ood_test, Role::OodTest, &self.ood_test)?;
        let (id, ood) = (train.meta.dataset.clone(), ood_test.meta.dataset.clone());
        if id_test.meta.dataset != id {
            return Err(Error::InvalidArgument(format!(
                "id_test dataset '{}' differs from id_train dataset '{id}'",
                id_test.meta.dataset
            )));
        }
        let mut sets = vec![train, id_test, ood_test];
        for v in &self.variants {
            sets.push(read_feature_file(v)?);
        }
        Ok((FeatureCatalog::new(sets), id, ood))
    }
}

fn expect_role(fs: &FeatureSet, role: Role, path: &Path) -> Result<()> {
    if fs.meta.role != role || fs.meta.preprocessing != Preprocessing::None {
        return Err(Error::InvalidArgument(format!(
            "{} has role {} ({}), expected an untagged {} file",
            path.display(),
            fs.meta.role.name(),
            fs.meta.preprocessing,
            role.name()
        )));
    }
    Ok(())
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Experiment spec (JSON); replaces the single-cell flags.
    #[arg(long, conflicts_with_all = ["id_train", "id_test", "ood_test", "method"])]
    config: Option<PathBuf>,
    #[command(flatten)]
    inputs: Option<PairInputs>,
    #[arg(long, required_unless_present = "config")]
    method: Option<Method>,
    /// Temperature (ODIN); defaults to 1000.
    #[arg(long = "T")]
    temperature: Option<f64>,
    /// Input-preprocessing magnitude (ODIN, Mahalanobis); defaults to 0.
    #[arg(long)]
    epsilon: Option<f64>,
    /// POD accumulation, e.g. "min,average".
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Exemplars per class, a count or "all"; defaults to 20.
    #[arg(long = "M")]
    exemplars: Option<ExemplarCount>,
    /// Pre-trained POD+FT head (JSON written by `finetune`).
    #[arg(long)]
    head: Option<PathBuf>,
    /// Report path [default: $OODBENCH_OUT_DIR/report.json if set]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    inputs: PairInputs,
    #[arg(long)]
    method: Method,
    /// Temperatures to search [default: 1 10 100 1000]
    #[arg(long = "T", num_args = 1..)]
    temperatures: Vec<f64>,
    /// Epsilons to search [default: 0 .. 0.2, eleven values]
    #[arg(long, num_args = 1..)]
    epsilons: Vec<f64>,
    /// Report path [default: $OODBENCH_OUT_DIR/sweep.json if set]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ToySuiteArgs {
    #[arg(long, num_args = 1.., default_values_t = (0..10).collect::<Vec<u64>>())]
    seeds: Vec<u64>,
    /// Results path [default: $OODBENCH_OUT_DIR/toy_suite.json if set]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    id_train: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = FinetuneConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = FinetuneConfig::default().pairs_per_epoch)]
    pairs: usize,
    #[arg(long, default_value_t = FinetuneConfig::default().lr)]
    lr: f64,
    /// Start from this head instead of all-ones.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    regime: RegimeArg,
    #[arg(long, default_value_t = DEFAULT_LOW_FRACTION)]
    fraction: f64,
    /// Head path [default: $OODBENCH_OUT_DIR/head.json if set]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Directory of report JSON files.
    #[arg(long)]
    reports: PathBuf,
    /// CSV path [default: $OODBENCH_OUT_DIR/table.csv if set]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which policy represents each method family.
    #[arg(long, value_enum, default_value = "fixed")]
    selection: SelectionArg,
    /// Methods to compare, in display order [default: all present].
    #[arg(long, num_args = 1..)]
    methods: Vec<Method>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum SelectionArg {
    Fixed,
    PreferSweep,
    All,
}

impl From<SelectionArg> for Selection {
    fn from(s: SelectionArg) -> Self {
        match s {
            SelectionArg::Fixed => Selection::Fixed,
            SelectionArg::PreferSweep => Selection::PreferSweep,
            SelectionArg::All => Selection::All,
        }
    }
}

#[derive(Args, Debug)]
struct IngestCheckArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn out_path(explicit: Option<PathBuf>, default_name: &str) -> Option<PathBuf> {
    explicit.or_else(|| std::env::var_os(OUT_DIR_ENV).map(|d| PathBuf::from(d).join(default_name)))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit_report(report: &Report, out: Option<PathBuf>, default_name: &str) -> Result<()> {
    print!("{}", report_csv(report));
    if let Some(path) = out_path(out, default_name) {
        write_report_json(report, &path)?;
        write_report_csv(report, &path.with_extension("csv"))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn toygen(a: ToygenArgs) -> Result<()> {
    let toy = ToyDataset::from_index(a.dataset)?;
    let dir = a
        .out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let b = toy.generate::<f64>(a.seed);
    let ood_name = format!("{}-ood", toy.name());
    let classes = b.id_train.class_count();
    let sets = [
        (Role::IdTrain, toy.name(), b.id_train.points(), Some((b.id_train.labels(), classes))),
        (Role::IdTest, toy.name(), b.id_test.points(), None),
        (Role::OodTest, ood_name.as_str(), b.ood_test.as_slice(), None),
    ];
    for (role, dataset, points, labels) in sets {
        let meta = FeatureMeta {
            dataset: dataset.to_string(),
            role,
            preprocessing: Preprocessing::None,
        };
        let fs = FeatureSet::from_points(meta, points, labels)?;
        let path = dir.join(format!("{}_seed{}_{}.oodf", toy.name(), a.seed, role.name()));
        write_feature_file(&fs, &path)?;
        println!("{} n={} e={}", path.display(), fs.n(), fs.e);
    }
    Ok(())
}

fn method_config(a: &EvalArgs, method: Method) -> Result<MethodConfig> {
    let base = MethodConfig::fixed(method);
    let head = match &a.head {
        Some(p) if method == Method::PodFinetune => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            Some(serde_json::from_str::<HeadOutcome<f64>>(&text)?.head)
        }
        Some(_) => return Err(Error::InvalidArgument("--head only applies to podft".into())),
        None => None,
    };
    Ok(MethodConfig {
        temperature: a.temperature.unwrap_or(base.temperature),
        epsilon: a.epsilon.unwrap_or(base.epsilon),
        scheme: a.scheme.unwrap_or(base.scheme),
        exemplars: a.exemplars.unwrap_or(base.exemplars),
        head,
        ..base
    })
}

fn row(id: &str, ood: &str, cfg: &MethodConfig, policy: Policy, regime: Regime, seed: u64, r: oodbench::metrics::EvalResult) -> ReportRow {
    let p = cfg.params();
    ReportRow {
        id: id.into(),
        ood: ood.into(),
        method: cfg.method,
        policy,
        temperature: p.temperature,
        epsilon: p.epsilon,
        scheme: p.scheme,
        exemplars: p.exemplars,
        regime,
        seed: Some(seed),
        auroc: r.auroc,
        fnr95: r.fnr95,
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    if let Some(cfg) = &a.config {
        let spec = ExperimentSpec::from_path(cfg)?;
        let base = cfg.parent().unwrap_or(Path::new("."));
        let report = run_experiment(&spec, base)?;
        for n in &report.notes {
            eprintln!("{n}");
        }
        return emit_report(&report, a.out, "report.json");
    }
    let inputs = a
        .inputs
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--id-train, --id-test and --ood-test are required".into()))?;
    let method = a.method.expect("clap requires --method without --config");
    let cfg = method_config(&a, method)?;
    let regime = inputs.regime()?;
    let (catalog, id, ood) = inputs.catalog()?;
    let pair = FeaturePair {
        catalog: &catalog,
        id: &id,
        ood: &ood,
    };
    let r = pair.run_cell(&cfg, &regime, inputs.seed)?;
    eprintln!("{method} {id}/{ood}: AUROC={:.6} FNR@95={:.6}", r.auroc, r.fnr95);
    let report = build_report(vec![row(&id, &ood, &cfg, Policy::Fixed, regime.regime, inputs.seed, r)], vec![])?;
    emit_report(&report, a.out, "report.json")
}

fn sweep(a: SweepArgs) -> Result<()> {
    eprintln!("{}", "=".repeat(72));
    eprintln!("{SWEEP_NOTE}");
    eprintln!("{}", "=".repeat(72));
    let standard = SweepGrid::standard();
    let grid = SweepGrid::new(
        if a.temperatures.is_empty() { standard.temperatures } else { a.temperatures },
        if a.epsilons.is_empty() { standard.epsilons } else { a.epsilons },
    )?;
    let regime = a.inputs.regime()?;
    let (catalog, id, ood) = a.inputs.catalog()?;
    let pair = FeaturePair {
        catalog: &catalog,
        id: &id,
        ood: &ood,
    };
    let seed = a.inputs.seed;
    let (cfg, r) = evaluate_policy(&MethodConfig::fixed(a.method), Policy::Sweep, &grid, |c| {
        pair.run_cell(c, &regime, seed)
    })?;
    eprintln!(
        "{} {id}/{ood}: best T={} eps={} AUROC={:.6} FNR@95={:.6}",
        a.method, cfg.temperature, cfg.epsilon, r.auroc, r.fnr95
    );
    let report = build_report(
        vec![row(&id, &ood, &cfg, Policy::Sweep, regime.regime, seed, r)],
        vec![SWEEP_NOTE.to_string()],
    )?;
    emit_report(&report, a.out, "sweep.json")
}

fn toy_suite(a: ToySuiteArgs) -> Result<()> {
    let r = run_toy_suite(&a.seeds)?;
    println!("seed,toy1_msp,toy1_min_distance,toy1_accuracy,toy2_msp,toy2_accuracy,toy2_min_min,toy2_min_average,toy2_average_average");
    let line = |name: String, t1: &oodbench::experiments::Toy1Result, t2: &oodbench::experiments::Toy2Result| {
        println!(
            "{name},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            t1.msp, t1.min_distance, t1.accuracy, t2.msp, t2.accuracy, t2.pod_min_min, t2.pod_min_average, t2.pod_average_average
        )
    };
    for s in &r.per_seed {
        line(s.seed.to_string(), &s.toy1, &s.toy2);
    }
    line("mean".into(), &r.mean_toy1, &r.mean_toy2);
    if let Some(path) = out_path(a.out, "toy_suite.json") {
        write_json(&r, &path)?;
    }
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let train = read_feature_file(&a.id_train)?;
    expect_role(&train, Role::IdTrain, &a.id_train)?;
    let regime = PairInputs {
        id_train: a.id_train.clone(),
        id_test: PathBuf::new(),
        ood_test: PathBuf::new(),
        variants: vec![],
        regime: a.regime,
        fraction: a.fraction,
        seed: a.seed,
    }
    .regime()?;
    let (model, subset) = model_for_training(&train, &regime)?;
    let init = match &a.init {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str::<HeadOutcome<f64>>(&text)?.head
        }
        None => PairwiseHead::ones(model.embedding_dim()),
    };
    let cfg = FinetuneConfig {
        epochs: a.epochs,
        pairs_per_epoch: a.pairs,
        lr: a.lr,
        init: if a.init.is_some() { HeadInit::Keep } else { HeadInit::Ones },
    };
    let mut p = Prng::new(a.seed);
    let out = train_head(model.as_ref(), &init, &subset, &cfg, &mut p)?;
    if let (Some(first), Some(last)) = (out.epoch_losses.first(), out.epoch_losses.last()) {
        eprintln!("epoch loss {first:.6} -> {last:.6}, beta={:.6}", out.beta);
    }
    match out_path(a.out, "head.json") {
        Some(path) => write_json(&out, &path),
        None => {
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        }
    }
}

fn compare(a: CompareArgs) -> Result<()> {
    let rows = read_report_dir(&a.reports)?;
    let selection: Selection = a.selection.into();
    let matrices = win_matrices(&rows, selection, &a.methods)?;
    let report = Report {
        rows,
        win_matrices: matrices,
        notes: vec![],
    };
    let csv = report_csv(&report);
    print!("{csv}");
    if let Some(path) = out_path(a.out, "table.csv") {
        write_report_csv(&report, &path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn ingest_check(a: IngestCheckArgs) -> Result<()> {
    let sets: Vec<FeatureSet> = a.files.iter().map(|p| read_feature_file(p)).collect::<Result<_>>()?;
    for (p, fs) in a.files.iter().zip(&sets) {
        println!(
            "{}: dataset={} role={} preprocessing={} n={} e={} c={} labels={}",
            p.display(),
            fs.meta.dataset,
            fs.meta.role.name(),
            fs.meta.preprocessing,
            fs.n(),
            fs.e,
            fs.c.map_or("-".to_string(), |c| c.to_string()),
            fs.labels.is_some()
        );
    }
    let trains: Vec<&FeatureSet> = sets.iter().filter(|s| s.meta.role == Role::IdTrain).collect();
    let tests: Vec<&FeatureSet> = sets.iter().filter(|s| s.meta.role != Role::IdTrain).collect();
    match trains.as_slice() {
        [] => println!("no id_train file: format checks only"),
        [train] => {
            let ing = ingest_as_model::<f64>(train, &tests)?;
            println!(
                "ingest ok: {} training rows, {} test sets, logits={}",
                ing.train.len(),
                ing.tests.len(),
                ing.model.has_logits()
            );
        }
        _ => {
            for t in &trains {
                ingest_as_model::<f64>(t, &[])?;
            }
            println!("{} id_train files checked individually", trains.len());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Toygen(a) => toygen(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::ToySuite(a) => toy_suite(a),
        Command::Finetune(a) => finetune(a),
        Command::Compare(a) => compare(a),
        Command::IngestCheck(a) => ingest_check(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
