//! Command-line experiment runner: JSON config in, CSV artifacts out.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, build_triplet_with, DomainTriplet, TargetSplit, TripletSpec};
use crate::rv::{self, RvReport};
use crate::trainers::{self, Backend, EpochTrace, Method, Model, TrainConfig, TrialReport};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("run failed: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Rotation angles `a`; intermediate at `a`, target at `2a`.
    pub patterns: Vec<f64>,
    pub methods: Vec<Method>,
    pub backends: Vec<Backend>,
    pub n_trials: usize,
    pub n_per_domain: usize,
    pub noise: f64,
    pub standardize: bool,
    pub target_split: TargetSplit,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    /// Training template; method and backend are set per cell.
    pub train: TrainConfig,
    /// Full per-backend templates that replace `train` for that backend.
    pub backend_train: BTreeMap<Backend, TrainConfig>,
    /// Learning-rate candidates for `rv-sweep`.
    pub rate_grid: Vec<f64>,
    /// Also record each forward model's loss on the labeled target test set during `rv-sweep`.
    pub rv_ground_truth: bool,
    pub write_traces: bool,
    pub parallel: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            patterns: vec![15.0, 20.0, 25.0, 30.0, 35.0],
            methods: Method::ALL.to_vec(),
            backends: vec![Backend::Dann],
            n_trials: 10,
            n_per_domain: 400,
            noise: 0.1,
            standardize: false,
            target_split: TargetSplit::Identical,
            base_seed: 0,
            output_dir: PathBuf::from("results"),
            train: TrainConfig::default(),
            backend_train: BTreeMap::new(),
            rate_grid: vec![1e-5, 1e-4, 1e-3],
            rv_ground_truth: false,
            write_traces: false,
            parallel: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.patterns.is_empty() {
            return bad("patterns: list is empty".into());
        }
        if let Some(a) = self.patterns.iter().find(|a| !a.is_finite()) {
            return bad(format!("patterns: {a} is not finite"));
        }
        if self.methods.is_empty() {
            return bad("methods: list is empty".into());
        }
        if self.backends.is_empty() {
            return bad("backends: list is empty".into());
        }
        if self.n_trials == 0 {
            return bad("n_trials: must be >= 1".into());
        }
        if self.n_per_domain < 4 {
            return bad("n_per_domain: must be >= 4".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise: must be >= 0, got {}", self.noise));
        }
        if self.parallel == 0 {
            return bad("parallel: must be >= 1".into());
        }
        if let Some(r) = self.rate_grid.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return bad(format!("rate_grid: {r} is not a positive rate"));
        }
        self.train.validate().map_err(|e| CliError::Validation(format!("train: {e}")))?;
        for (b, t) in &self.backend_train {
            t.validate().map_err(|e| CliError::Validation(format!("backend_train.{b}: {e}")))?;
        }
        Ok(())
    }

    pub fn train_config(&self, method: Method, backend: Backend) -> TrainConfig {
        self.backend_train
            .get(&backend)
            .unwrap_or(&self.train)
            .with_method(method, backend)
    }

    pub fn triplet_spec(&self, a: f64, seed: u64) -> TripletSpec {
        TripletSpec {
            target_split: self.target_split,
            standardize: self.standardize,
            ..TripletSpec::new(self.n_per_domain, a, self.noise, seed)
        }
    }

    /// Data seed for trial `i` of pattern `a`; every method and backend sees the same triplets.
    pub fn trial_seed(&self, a: f64, i: usize) -> u64 {
        data::sub_seed(self.base_seed, &[a.to_bits(), i as u64])
    }
}

/// One (pattern, method, backend) row of the results.
#[derive(Clone, Debug)]
pub struct Cell {
    pub pattern: f64,
    pub method: Method,
    pub backend: Backend,
    pub report: TrialReport,
}

/// Trains every (pattern, method, backend, trial) combination on up to `cfg.parallel` threads.
///
/// Results are assembled in config order, so the output does not depend on the worker count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<Cell>, CliError> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for &a in &cfg.patterns {
        for &m in &cfg.methods {
            for &b in &cfg.backends {
                for i in 0..cfg.n_trials {
                    jobs.push((a, m, b, i));
                }
            }
        }
    }
    let one = |&(a, m, b, i): &(f64, Method, Backend, usize)| -> Result<(f64, Vec<EpochTrace>), String> {
        let seed = cfg.trial_seed(a, i);
        let triplet = build_triplet_with(&cfg.triplet_spec(a, seed)).map_err(|e| e.to_string())?;
        let train = TrainConfig {
            seed,
            ..cfg.train_config(m, b)
        };
        trainers::run_single(&train, &triplet, cfg.write_traces).map_err(|e| e.to_string())
    };
    let results: Vec<_> = if cfg.parallel <= 1 {
        jobs.iter().map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallel)
            .build()
            .map_err(runtime)?;
        pool.install(|| jobs.par_iter().map(one).collect())
    };

    let mut cells = Vec::new();
    let mut results = results.into_iter();
    for chunk in jobs.chunks(cfg.n_trials) {
        let (a, m, b, _) = chunk[0];
        let seeds = chunk.iter().map(|&(a, _, _, i)| cfg.trial_seed(a, i)).collect();
        let rs = results.by_ref().take(chunk.len()).collect();
        cells.push(Cell {
            pattern: a,
            method: m,
            backend: b,
            report: TrialReport::from_results(seeds, rs),
        });
    }
    Ok(cells)
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(format!("csv: {e}"))
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

/// `pattern,method,backend,mean_acc,std_acc,n_trials,seeds_failed`.
pub fn write_results_csv<W: Write>(cells: &[Cell], out: W) -> Result<(), CliError> {
    if cells.is_empty() {
        return Err(CliError::Runtime("no results to write".into()));
    }
    let mut w = csv_writer(out);
    w.write_record(["pattern", "method", "backend", "mean_acc", "std_acc", "n_trials", "seeds_failed"])
        .map_err(csv_err)?;
    for c in cells {
        w.write_record([
            c.pattern.to_string(),
            c.method.to_string(),
            c.backend.to_string(),
            f6(c.report.mean),
            f6(c.report.std),
            c.report.seeds.len().to_string(),
            c.report.n_failed().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| runtime(e))
}

/// `pattern,method,backend,trial,seed,accuracy,error` with one row per trial; failed trials leave accuracy empty.
pub fn write_per_seed_csv<W: Write>(cells: &[Cell], out: W) -> Result<(), CliError> {
    let mut w = csv_writer(out);
    w.write_record(["pattern", "method", "backend", "trial", "seed", "accuracy", "error"])
        .map_err(csv_err)?;
    for c in cells {
        for (i, (seed, acc)) in c.report.seeds.iter().zip(&c.report.accuracies).enumerate() {
            let error = c
                .report
                .failures
                .iter()
                .find(|f| f.seed == *seed)
                .map(|f| f.reason.clone())
                .unwrap_or_default();
            w.write_record([
                c.pattern.to_string(),
                c.method.to_string(),
                c.backend.to_string(),
                i.to_string(),
                seed.to_string(),
                acc.map(f6).unwrap_or_default(),
                error,
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| runtime(e))
}

/// `epoch,l_task,l_dom_st,l_dom_ttp,eval_acc`; absent values are empty fields.
pub fn write_trace_csv<W: Write>(trace: &[EpochTrace], out: W) -> Result<(), CliError> {
    let mut w = csv_writer(out);
    w.write_record(["epoch", "l_task", "l_dom_st", "l_dom_ttp", "eval_acc"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(f6).unwrap_or_default();
    for t in trace {
        w.write_record([
            t.epoch.to_string(),
            f6(t.l_task),
            opt(t.l_domain.first().copied()),
            opt(t.l_domain.get(1).copied()),
            opt(t.eval_acc),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| runtime(e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn cell_stem(pattern: f64, method: Method, backend: Backend) -> String {
    format!("{pattern}_{method}_{backend}")
}

/// Runs the grid and writes `results.csv`, `per_seed.csv` and optional traces under `out_dir`.
pub fn run_command(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<Cell>, CliError> {
    let cells = run_experiment(cfg)?;
    write_results_csv(&cells, create(&out_dir.join("results.csv"))?)?;
    write_per_seed_csv(&cells, create(&out_dir.join("per_seed.csv"))?)?;
    if cfg.write_traces {
        for c in &cells {
            for (i, trace) in c.report.traces.iter().enumerate() {
                if trace.is_empty() {
                    continue;
                }
                let name = format!("{}_trial{i}.csv", cell_stem(c.pattern, c.method, c.backend));
                write_trace_csv(trace, create(&out_dir.join("traces").join(name))?)?;
            }
        }
    }
    Ok(cells)
}

/// Reverse-validation sweep over `rate_grid` for every (pattern, method, backend) with a supported method.
pub fn rv_sweep_command(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<(f64, Method, Backend, RvReport)>, CliError> {
    cfg.validate()?;
    if cfg.rate_grid.is_empty() {
        return Err(CliError::Validation("rate_grid: list is empty".into()));
    }
    let methods: Vec<Method> = cfg
        .methods
        .iter()
        .copied()
        .filter(|m| matches!(m, Method::TwoStage | Method::Normal))
        .collect();
    if methods.is_empty() {
        return Err(CliError::Validation("methods: rv-sweep needs two_stage or normal".into()));
    }
    let mut out = Vec::new();
    for &a in &cfg.patterns {
        let seed = cfg.trial_seed(a, 0);
        let triplet = build_triplet_with(&cfg.triplet_spec(a, seed)).map_err(runtime)?;
        for &m in &methods {
            for &b in &cfg.backends {
                let template = TrainConfig {
                    seed,
                    ..cfg.train_config(m, b)
                };
                let report = if cfg.rv_ground_truth {
                    rv::sweep_with_ground_truth(&template, &triplet, &cfg.rate_grid)
                } else {
                    rv::sweep(&template, triplet.uda_view(), &cfg.rate_grid)
                }
                .map_err(runtime)?;
                let path = out_dir.join(format!("rv_{}.csv", cell_stem(a, m, b)));
                let mut w = create(&path)?;
                report.write_csv(&mut w).map_err(runtime)?;
                w.flush().map_err(|e| io_err(&path, e))?;
                out.push((a, m, b, report));
            }
        }
    }
    Ok(out)
}

/// `f1..fk,domain,label_or_-1` for source, intermediate, target-train and target-test points.
///
/// Source and target-test rows carry their labels; the unlabeled training domains get -1.
pub fn write_features_csv<W: Write>(model: &Model, triplet: &DomainTriplet, out: W) -> Result<(), CliError> {
    let k = model.feature.out_dim();
    let mut w = csv_writer(out);
    let mut header: Vec<String> = (1..=k).map(|i| format!("f{i}")).collect();
    header.push("domain".into());
    header.push("label_or_-1".into());
    w.write_record(&header).map_err(csv_err)?;
    let test = triplet.target_test();
    let parts: [(&str, &crate::Tensor, Option<&[usize]>); 4] = [
        ("source", triplet.source().x(), Some(triplet.source().y())),
        ("intermediate", triplet.intermediate().x(), None),
        ("target_train", triplet.target_train().x(), None),
        ("target_test", test.x(), Some(test.y())),
    ];
    for (domain, x, labels) in parts {
        let f = model.features(x).map_err(runtime)?;
        for r in 0..f.rows() {
            // `{}` on f64 prints the shortest representation that parses back exactly.
            let mut rec: Vec<String> = f.row(r).iter().map(|v| v.to_string()).collect();
            rec.push(domain.into());
            rec.push(labels.map_or("-1".to_string(), |y| y[r].to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| runtime(e))
}

/// Features read back from a dump, grouped by domain name in file order.
pub fn read_features_csv(path: &Path) -> Result<BTreeMap<String, crate::Tensor>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let k = r.headers().map_err(csv_err)?.len().saturating_sub(2);
    let mut rows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let vals = (0..k)
            .map(|i| rec[i].parse::<f64>().map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.entry(rec[k].to_string()).or_default().extend(vals);
    }
    rows.into_iter()
        .map(|(d, v)| {
            let n = v.len() / k.max(1);
            crate::Tensor::new(n, k, v).map(|t| (d, t)).map_err(runtime)
        })
        .collect()
}

/// Trains one model (trial 0) for the requested cell and dumps its features.
pub fn dump_features_command(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    pattern: f64,
    method: Method,
    backend: Backend,
) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    if !pattern.is_finite() {
        return Err(CliError::Validation(format!("pattern: {pattern} is not finite")));
    }
    let seed = cfg.trial_seed(pattern, 0);
    let triplet = build_triplet_with(&cfg.triplet_spec(pattern, seed)).map_err(runtime)?;
    let train = TrainConfig {
        seed,
        ..cfg.train_config(method, backend)
    };
    let model = match method {
        Method::TrainOnTarget => trainers::train_on_target(&train, &triplet.oracle_target_train()),
        _ => trainers::train_uda(&train, triplet.uda_view(), Default::default()),
    }
    .map_err(runtime)?
    .model;
    let path = out_dir.join(format!("features_{}.csv", cell_stem(pattern, method, backend)));
    let mut w = create(&path)?;
    write_features_csv(&model, &triplet, &mut w)?;
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(path)
}

#[derive(Parser, Debug)]
#[command(name = "uda", about = "Two-stage domain adaptation experiments on rotated two-moons data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate the configured grid.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Score the configured learning-rate grid by reverse validation.
    RvSweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one model and write its feature-space embedding of every domain.
    DumpFeatures {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pattern: f64,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        backend: Backend,
    },
}

impl clap::ValueEnum for Method {
    fn value_variants<'a>() -> &'a [Self] {
        &Method::ALL
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

impl clap::ValueEnum for Backend {
    fn value_variants<'a>() -> &'a [Self] {
        &Backend::ALL
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            parallel,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            if let Some(p) = parallel {
                cfg.parallel = p;
            }
            let out_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let cells = run_command(&cfg, &out_dir)?;
            for c in &cells {
                println!(
                    "a={:<4} {:<16} {:<5} mean={:.3} std={:.3} failed={}",
                    c.pattern,
                    c.method,
                    c.backend,
                    c.report.mean,
                    c.report.std,
                    c.report.n_failed()
                );
            }
            println!("wrote {}", out_dir.join("results.csv").display());
        }
        Command::RvSweep { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            for (a, m, b, r) in rv_sweep_command(&cfg, &cfg.output_dir)? {
                let corr = if cfg.rv_ground_truth {
                    match r.correlation() {
                        Ok(c) => format!(" pearson={:.3}{}", c.pearson, if c.underpowered { " (underpowered)" } else { "" }),
                        Err(e) => format!(" pearson unavailable: {e}"),
                    }
                } else {
                    String::new()
                };
                println!("a={a:<4} {m:<10} {b:<5} chosen lr={:e}{corr}", r.chosen_rate());
            }
        }
        Command::DumpFeatures {
            config,
            pattern,
            method,
            backend,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let path = dump_features_command(&cfg, &cfg.output_dir, pattern, method, backend)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
