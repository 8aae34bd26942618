//! Command-line interface: dataset generators, training, sampling, lifting,
//! the experiment registry and standalone evaluation.
//!
//! Every command resolves a [`RunConfig`] (TOML file, then flags on top) and
//! echoes it into a `provenance.json` sidecar next to its outputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::SampleSet;
use crate::error::{Error, Result};
use crate::manifold::{gh_fit, median_epsilon, GhInterpolant};
use crate::pipeline::{
    cluster_modes, experiment, histogram_compare, ks_distance, manifold_residual, pfr_da_grid,
    run_algorithm1, sha256_hex, Backend, Bins, Check, ExperimentOptions, LiftConfig,
    ManifoldOracle, PipelineConfig, EXPERIMENTS,
};
use crate::score_mcs::{fit_surrogate, EmpiricalScore, SurrogateConfig, SurrogateMap};
use crate::score_nn::{nn_sample, train, write_loss_history, MlpScoreNet};
use crate::sde::{Integrator, SdeConfig};
use crate::systems::{
    ci_dataset, cusp_sample, pfr_dataset, pfr_steady_states, CiGalerkin, CiTrajectoryConfig,
    CuspSpec, PfrSpec,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CSGM_OUT";
const DEFAULT_OUT: &str = "csgm-out";
/// Exit status when every output was written but a metric check failed.
pub const EXIT_CHECKS_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "csgm", version, about = "Conditional score-based sampling on slow manifolds and bifurcation surfaces")]
pub struct Cli {
    /// Worker threads for sampling and dataset generation (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a training dataset from one of the built-in systems.
    Generate(GenerateArgs),
    /// Train a score network, or fit an MCS surrogate map for one condition.
    Train(TrainArgs),
    /// Draw conditional samples from a dataset or a saved model.
    Sample(SampleArgs),
    /// Lift reduced coordinates to ambient columns with geometric harmonics.
    Lift(LiftArgs),
    /// Run a named experiment and write its bundle.
    Experiment(ExperimentArgs),
    /// Compute metrics for a sample CSV against a system oracle.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    /// Cusp surface with uniform λ.
    Cusp,
    /// Cusp surface with a two-component normal mixture on λ.
    CuspBimodal,
    /// Chafee–Infante Galerkin snapshots after transients.
    Ci,
    /// Tubular reactor steady states over a Da grid.
    Pfr,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(value_enum)]
    pub system: System,
    /// Output CSV (default: $CSGM_OUT/<system>.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cusp: number of points. Chafee–Infante: number of trajectories.
    #[arg(long)]
    pub n: Option<usize>,
    /// Reactor: Da values (repeatable; default 0.02..=0.12 step 0.0005).
    #[arg(long = "da")]
    pub da: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<Backend>,
    /// Training CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Label (conditioning) column; repeatable.
    #[arg(long = "label")]
    pub labels: Vec<String>,
    /// Output model file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// MCS surrogate: condition value per label (repeatable).
    #[arg(long = "cond", allow_negative_numbers = true)]
    pub cond: Vec<f64>,
    /// MCS surrogate: number of probability-flow pairs.
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<Backend>,
    /// Training CSV (the model is built from it on the fly).
    #[arg(long, conflicts_with = "model")]
    pub data: Option<PathBuf>,
    /// Saved score network or surrogate map.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Label column; repeatable.
    #[arg(long = "label")]
    pub labels: Vec<String>,
    /// Condition value; repeatable. Values are grouped by the number of
    /// labels, so `--cond 0 --cond 2` with two labels is one condition.
    #[arg(long = "cond", allow_negative_numbers = true)]
    pub cond: Vec<f64>,
    /// Samples per condition.
    #[arg(long)]
    pub n: Option<usize>,
    /// Reduced columns to generate before lifting (repeatable).
    #[arg(long = "reduce")]
    pub reduce: Vec<String>,
    /// Euler–Maruyama steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV (default: $CSGM_OUT/samples.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    /// Saved geometric-harmonics model.
    #[arg(long, required_unless_present = "fit")]
    pub model: Option<PathBuf>,
    /// Fit a model on this CSV instead of loading one.
    #[arg(long, conflicts_with = "model", requires = "inputs")]
    pub fit: Option<PathBuf>,
    /// Input (reduced) columns when fitting; repeatable.
    #[arg(long = "input")]
    pub inputs: Vec<String>,
    /// Output columns when fitting (default: every other column); repeatable.
    #[arg(long = "output")]
    pub outputs: Vec<String>,
    /// Where to save a freshly fitted model.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
    /// Reduced samples to lift.
    #[arg(long)]
    pub samples: PathBuf,
    /// Output CSV (default: $CSGM_OUT/lifted.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment name, or `all`.
    pub name: String,
    /// Output root (default: $CSGM_OUT).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Backend to run; repeatable (default: both).
    #[arg(long = "backend", value_parser = parse_backend)]
    pub backends: Vec<Backend>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples per condition.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Oracle {
    /// Residual |−x³ + λx + μ| on columns x, lambda, mu.
    Cusp,
    /// Clusters of x1_0 against the reactor branches at the sampled Da.
    Pfr,
    /// Residual of the lift given by `--gh`.
    Lift,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Sample CSV to evaluate.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long, value_enum)]
    pub oracle: Option<Oracle>,
    /// Geometric-harmonics model for the lift oracle.
    #[arg(long)]
    pub gh: Option<PathBuf>,
    /// Column to cluster (1-D k-means with silhouette selection).
    #[arg(long)]
    pub cluster: Option<String>,
    /// Reference CSV for a histogram and KS comparison of `--column`.
    #[arg(long, requires = "column")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub column: Option<String>,
    /// Residual tolerance for the on-manifold fraction.
    #[arg(long, default_value_t = 0.25)]
    pub tol: f64,
    /// Fail unless at least this fraction of rows is within `--tol`.
    #[arg(long)]
    pub min_fraction: Option<f64>,
    /// Fail unless exactly this many clusters are found.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Metrics JSON (default: stdout only).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_backend(s: &str) -> std::result::Result<Backend, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Chafee–Infante generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CiConfig {
    pub nu: f64,
    pub n_modes: usize,
    pub grid: usize,
    pub trajectories: usize,
    pub trajectory: CiTrajectoryConfig,
}

impl Default for CiConfig {
    fn default() -> Self {
        let sys = CiGalerkin::default();
        Self {
            nu: sys.nu,
            n_modes: sys.n_modes,
            grid: sys.grid,
            trajectories: 45,
            trajectory: CiTrajectoryConfig::default(),
        }
    }
}

/// Reactor generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfrConfig {
    pub spec: PfrSpec,
    pub da_grid: Vec<f64>,
}

impl Default for PfrConfig {
    fn default() -> Self {
        Self {
            spec: PfrSpec::default(),
            da_grid: pfr_da_grid(),
        }
    }
}

/// Everything a command may read, with unknown keys rejected. A top-level
/// `seed` overrides the pipeline, experiment and generator seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub pipeline: PipelineConfig,
    pub experiment: ExperimentOptions,
    pub surrogate: SurrogateConfig,
    pub cusp: CuspSpec,
    pub ci: CiConfig,
    pub pfr: PfrConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.pipeline.seed = s;
            self.experiment.seed = s;
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Generate(a) => cmd_generate(a, config),
        Command::Train(a) => cmd_train(a, config),
        Command::Sample(a) => cmd_sample(a, config),
        Command::Lift(a) => cmd_lift(a, config),
        Command::Experiment(a) => cmd_experiment(a, config),
        Command::Evaluate(a) => cmd_evaluate(a, config),
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
}

fn out_path(explicit: Option<PathBuf>, file: &str) -> PathBuf {
    explicit.unwrap_or_else(|| out_root().join(file))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

/// `samples.csv` → `samples.provenance.json`.
pub fn provenance_path(output: &Path) -> PathBuf {
    output.with_extension("provenance.json")
}

/// Writes `bytes` to `output` and the provenance sidecar next to it.
fn write_with_provenance(output: &Path, bytes: &[u8], command: &str, args: Value, config: &RunConfig, extra: Value) -> Result<()> {
    ensure_parent(output)?;
    std::fs::write(output, bytes)?;
    let prov = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "args": args,
        "config": config,
        "seed": config.seed(),
        "output": output.file_name().map(|f| f.to_string_lossy().into_owned()),
        "sha256": sha256_hex(bytes),
        "details": extra,
    });
    std::fs::write(provenance_path(output), serde_json::to_string_pretty(&prov)?)?;
    info!("wrote {}", output.display());
    Ok(())
}

fn load_data(path: &Path, labels: &[String]) -> Result<SampleSet> {
    let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
    SampleSet::load_csv(path, &labels)
}

/// Groups flat condition values into one row per condition.
pub fn group_conditions(values: &[f64], n_labels: usize) -> Result<Vec<Vec<f64>>> {
    if n_labels == 0 {
        return if values.is_empty() {
            Ok(Vec::new())
        } else {
            Err(Error::Config("--cond given without any --label".into()))
        };
    }
    if values.len() % n_labels != 0 {
        return Err(Error::Config(format!(
            "{} condition values do not split into groups of {n_labels} labels",
            values.len()
        )));
    }
    Ok(values.chunks(n_labels).map(<[f64]>::to_vec).collect())
}

fn cmd_generate(a: GenerateArgs, mut config: RunConfig) -> Result<i32> {
    config.apply_seed(a.seed);
    let seed = config.seed();
    let set = match a.system {
        System::Cusp | System::CuspBimodal => {
            if a.system == System::CuspBimodal && config.cusp == CuspSpec::default() {
                config.cusp = CuspSpec::bimodal();
            }
            if let Some(n) = a.n {
                config.cusp.n_samples = n;
            }
            cusp_sample(&config.cusp, seed)?
        }
        System::Ci => {
            if let Some(n) = a.n {
                config.ci.trajectories = n;
            }
            let c = &config.ci;
            let sys = CiGalerkin::new(c.nu, c.n_modes, c.grid)?;
            ci_dataset(&sys, c.trajectories, seed, &c.trajectory)?
        }
        System::Pfr => {
            if !a.da.is_empty() {
                config.pfr.da_grid = a.da.clone();
            }
            pfr_dataset(&config.pfr.da_grid, &config.pfr.spec)?.set
        }
    };
    let name = serde_json::to_value(a.system)?;
    let out = out_path(a.out, &format!("{}.csv", name.as_str().unwrap_or("data")));
    let csv = set.to_csv_string()?;
    let args = json!({"system": name, "out": out, "n": a.n, "da": a.da});
    write_with_provenance(&out, csv.as_bytes(), "generate", args, &config, json!({"rows": set.len()}))?;
    println!("{}", out.display());
    Ok(0)
}

fn cmd_train(a: TrainArgs, mut config: RunConfig) -> Result<i32> {
    config.apply_seed(a.seed);
    if let Some(b) = a.backend {
        config.pipeline.backend = b;
    }
    if !a.labels.is_empty() {
        config.pipeline.labels = a.labels.clone();
    }
    if let Some(e) = a.epochs {
        config.pipeline.nn.epochs = e;
    }
    let data = load_data(&a.data, &config.pipeline.labels)?;
    let args = json!({"data": a.data, "out": a.out, "cond": a.cond, "pairs": a.pairs});
    match config.pipeline.backend {
        Backend::Nn => {
            config.pipeline.nn.seed = config.pipeline.seed;
            let (model, history) = train(&data, &config.pipeline.nn)?;
            let bytes = serde_json::to_vec(&model)?;
            let mut loss = Vec::new();
            write_loss_history(&mut loss, &history)?;
            let loss_path = a.out.with_extension("loss.csv");
            let detail = json!({
                "rows": data.len(),
                "loss_first": history.first().map(|h| h.loss),
                "loss_last": history.last().map(|h| h.loss),
                "loss_history": loss_path.file_name().map(|f| f.to_string_lossy().into_owned()),
            });
            write_with_provenance(&a.out, &bytes, "train", args, &config, detail)?;
            std::fs::write(loss_path, loss)?;
        }
        Backend::Mcs => {
            let conds = group_conditions(&a.cond, config.pipeline.labels.len())?;
            if conds.len() > 1 {
                return Err(Error::Config("a surrogate map is fit for exactly one condition".into()));
            }
            let y = conds.first().map(Vec::as_slice);
            let score = EmpiricalScore::new(data.clone(), config.pipeline.mcs.clone())?;
            let mut sc = config.surrogate.clone();
            sc.sde.seed = config.pipeline.seed;
            let map = fit_surrogate(&score, y, a.pairs, &sc)?;
            let bytes = serde_json::to_vec(&map)?;
            let detail = json!({"rows": data.len(), "holdout_rmse": map.holdout_rmse, "discarded_pairs": map.discarded_pairs});
            write_with_provenance(&a.out, &bytes, "train", args, &config, detail)?;
        }
    }
    println!("{}", a.out.display());
    Ok(0)
}

enum SavedModel {
    Net(MlpScoreNet),
    Surrogate(SurrogateMap),
}

fn load_model(path: &Path) -> Result<SavedModel> {
    let v: Value = serde_json::from_slice(&std::fs::read(path)?)?;
    match v.get("format").and_then(Value::as_str) {
        Some("csgm-score-net") => Ok(SavedModel::Net(MlpScoreNet::load(path)?)),
        Some("csgm-surrogate-map") => Ok(SavedModel::Surrogate(SurrogateMap::load(path)?)),
        other => Err(Error::Format(format!("{}: unrecognized model format {other:?}", path.display()))),
    }
}

fn cmd_sample(a: SampleArgs, mut config: RunConfig) -> Result<i32> {
    config.apply_seed(a.seed);
    let p = &mut config.pipeline;
    if let Some(b) = a.backend {
        p.backend = b;
    }
    if !a.labels.is_empty() {
        p.labels = a.labels.clone();
    }
    if let Some(n) = a.n {
        p.n_samples = n;
    }
    if let Some(s) = a.steps {
        p.sde.num_steps = s;
    }
    if let Some(e) = a.epochs {
        p.nn.epochs = e;
    }
    if !a.reduce.is_empty() {
        p.reduce = Some(a.reduce.clone());
    }
    let out = out_path(a.out.clone(), "samples.csv");
    let args = json!({"data": a.data, "model": a.model, "out": out});
    let (set, detail) = match (&a.data, &a.model) {
        (Some(path), _) => {
            let plain: Vec<String> = p.labels.iter().filter(|l| !l.starts_with(crate::pipeline::DMAPS_PREFIX)).cloned().collect();
            if !a.cond.is_empty() {
                p.conditions = group_conditions(&a.cond, p.labels.len())?;
            }
            let data = load_data(path, &[])?;
            for l in &plain {
                data.column(l)?;
            }
            let ens = run_algorithm1(&data, p)?;
            let flagged: Vec<usize> = ens
                .conditions
                .iter()
                .enumerate()
                .filter(|(i, _)| ens.extrapolated[i * p.n_samples])
                .map(|(i, _)| i)
                .collect();
            let detail = json!({
                "rows": ens.output().len(),
                "labels": ens.label_names,
                "extrapolated_conditions": flagged,
                "max_scaled_label_distance": ens.max_label_distance,
                "loss_last": ens.loss_history.last().map(|h| h.loss),
            });
            (ens.output().clone(), detail)
        }
        (None, Some(path)) => match load_model(path)? {
            SavedModel::Net(m) => {
                let conds = if a.cond.is_empty() && m.label_dim() == 0 {
                    vec![Vec::new()]
                } else {
                    group_conditions(&a.cond, m.label_dim())?
                };
                if conds.is_empty() {
                    return Err(Error::Config(format!("model expects {} condition value(s) per --cond group", m.label_dim())));
                }
                let mut blocks = Vec::new();
                for (i, y) in conds.iter().enumerate() {
                    let sde = SdeConfig { seed: p.seed.wrapping_add(1 + i as u64), ..p.sde };
                    let y = (!y.is_empty()).then_some(y.as_slice());
                    blocks.push(nn_sample(&m, y, p.n_samples, &sde, Integrator::ReverseSde)?);
                }
                let set = stack_sets(&blocks)?;
                (set, json!({"model": "score-net", "conditions": conds}))
            }
            SavedModel::Surrogate(m) => {
                if !a.cond.is_empty() && Some(&a.cond) != m.condition.as_ref() {
                    return Err(Error::Config(format!("surrogate map was fit for condition {:?}", m.condition)));
                }
                let set = m.sample(p.n_samples, p.seed)?;
                (set, json!({"model": "surrogate-map", "conditions": [m.condition]}))
            }
        },
        (None, None) => return Err(Error::Config("sample needs --data or --model".into())),
    };
    let csv = set.to_csv_string()?;
    write_with_provenance(&out, csv.as_bytes(), "sample", args, &config, detail)?;
    println!("{}", out.display());
    Ok(0)
}

fn stack_sets(blocks: &[SampleSet]) -> Result<SampleSet> {
    let mut it = blocks.iter();
    let first = it.next().ok_or_else(|| Error::Config("no samples".into()))?;
    let mut all = first.full_matrix();
    for b in it {
        all = ndarray::concatenate(ndarray::Axis(0), &[all.view(), b.full_matrix().view()])
            .map_err(|e| Error::Contract(e.to_string()))?;
    }
    let label_names: Vec<&str> = first.label_names.iter().map(String::as_str).collect();
    SampleSet::new(all, first.column_names())?.relabel(&label_names)
}

fn cmd_lift(a: LiftArgs, config: RunConfig) -> Result<i32> {
    let gh = match (&a.model, &a.fit) {
        (Some(path), _) => GhInterpolant::load(path)?,
        (None, Some(path)) => {
            let data = load_data(path, &[])?;
            let outputs: Vec<String> = if a.outputs.is_empty() {
                data.column_names().into_iter().filter(|c| !a.inputs.contains(c)).collect()
            } else {
                a.outputs.clone()
            };
            let x = project(&data, &a.inputs)?;
            let f = project(&data, &outputs)?;
            let lc: &LiftConfig = &config.pipeline.lift;
            let eps = median_epsilon(x.view(), lc.epsilon_scale)?;
            let mut gh = gh_fit(x.view(), f.view(), eps, lc.delta)?;
            gh.input_names = a.inputs.clone();
            gh.output_names = outputs;
            if let Some(save) = &a.save_model {
                ensure_parent(save)?;
                gh.save(save)?;
            }
            gh
        }
        (None, None) => return Err(Error::Config("lift needs --model or --fit".into())),
    };
    let reduced = load_data(&a.samples, &[])?;
    let passthrough: Vec<String> = reduced
        .column_names()
        .into_iter()
        .filter(|c| !gh.output_names.contains(c))
        .collect();
    let mut cols = gh.input_names.clone();
    cols.extend(gh.output_names.iter().cloned());
    cols.extend(passthrough.into_iter().filter(|c| !gh.input_names.contains(c)));
    let lifted = crate::pipeline::lift_samples(&gh, &reduced, &cols, &[])?;
    let out = out_path(a.out.clone(), "lifted.csv");
    let csv = lifted.to_csv_string()?;
    let args = json!({"model": a.model, "fit": a.fit, "inputs": a.inputs, "samples": a.samples, "out": out});
    let detail = json!({"rows": lifted.len(), "inputs": gh.input_names, "outputs": gh.output_names, "epsilon": gh.epsilon, "retained": gh.sigma.len()});
    write_with_provenance(&out, csv.as_bytes(), "lift", args, &config, detail)?;
    println!("{}", out.display());
    Ok(0)
}

fn project(data: &SampleSet, cols: &[String]) -> Result<ndarray::Array2<f64>> {
    let mut m = ndarray::Array2::zeros((data.len(), cols.len()));
    for (j, c) in cols.iter().enumerate() {
        m.column_mut(j).assign(&data.column(c)?);
    }
    Ok(m)
}

fn cmd_experiment(a: ExperimentArgs, mut config: RunConfig) -> Result<i32> {
    config.apply_seed(a.seed);
    let o = &mut config.experiment;
    if !a.backends.is_empty() {
        o.backends = a.backends.clone();
    }
    if let Some(n) = a.n {
        o.n_samples = n;
    }
    if a.epochs.is_some() {
        o.nn_epochs = a.epochs;
    }
    if let Some(s) = a.steps {
        o.sde_steps = s;
    }
    let names: Vec<&str> = if a.name == "all" {
        EXPERIMENTS.to_vec()
    } else if EXPERIMENTS.contains(&a.name.as_str()) {
        vec![a.name.as_str()]
    } else {
        return Err(Error::Config(format!("unknown experiment `{}`; available: all, {}", a.name, EXPERIMENTS.join(", "))));
    };
    let root = a.out.clone().unwrap_or_else(out_root);
    let mut failures: Vec<Value> = Vec::new();
    for name in names {
        let rep = experiment(name, &config.experiment)?;
        let resolved = json!({"command": "experiment", "name": name, "out": root, "run": config});
        let dir = rep.write_bundle(&root, &resolved)?;
        eprint!("{}", rep.summary());
        println!("{}", dir.display());
        failures.extend(rep.failures().into_iter().map(|c| failure_json(name, c)));
    }
    report_failures(&failures)
}

fn failure_json(experiment: &str, c: &Check) -> Value {
    json!({"experiment": experiment, "check": c.name, "backend": c.backend, "value": c.value, "bound": c.bound})
}

/// Prints the failure list as JSON on stderr and picks the exit status.
fn report_failures(failures: &[Value]) -> Result<i32> {
    if failures.is_empty() {
        Ok(0)
    } else {
        eprintln!("{}", json!({"failures": failures}));
        Ok(EXIT_CHECKS_FAILED)
    }
}

fn cmd_evaluate(a: EvaluateArgs, config: RunConfig) -> Result<i32> {
    let set = load_data(&a.samples, &[])?;
    let mut metrics = serde_json::Map::new();
    let mut checks = Vec::new();
    let mut cluster_col = a.cluster.clone();
    match a.oracle {
        Some(Oracle::Cusp) => {
            let res = manifold_residual(&set, &ManifoldOracle::Cusp)?;
            fraction_check(&a, res.fraction_below(a.tol), &mut checks);
            metrics.insert("fraction_below_tol".into(), json!(res.fraction_below(a.tol)));
            metrics.insert("residual".into(), json!(res));
        }
        Some(Oracle::Lift) => {
            let path = a.gh.as_ref().ok_or_else(|| Error::Config("the lift oracle needs --gh".into()))?;
            let gh = GhInterpolant::load(path)?;
            let res = manifold_residual(&set, &ManifoldOracle::Lift(&gh))?;
            fraction_check(&a, res.fraction_below(a.tol), &mut checks);
            metrics.insert("fraction_below_tol".into(), json!(res.fraction_below(a.tol)));
            metrics.insert("residual".into(), json!(res));
        }
        Some(Oracle::Pfr) => {
            let da = set.column("da")?;
            let first = da[0];
            if da.iter().any(|v| *v != first) {
                return Err(Error::Config("the reactor oracle needs samples at a single Da".into()));
            }
            let spec = PfrSpec { da: first, ..config.pfr.spec.clone() };
            let branches: Vec<f64> = pfr_steady_states(&spec)?.iter().map(|s| s.inlet_conversion()).collect();
            let x = set.column("x1_0")?.to_vec();
            let cl = cluster_modes(&x, 5)?;
            let worst = cl
                .centers
                .iter()
                .map(|c| branches.iter().map(|b| (b - c).abs()).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max);
            checks.push(Check::at_most("max_center_to_branch", None, worst, 0.05));
            metrics.insert("branches".into(), json!(branches));
            metrics.insert("max_center_to_branch".into(), json!(worst));
            cluster_col.get_or_insert_with(|| "x1_0".into());
        }
        None => {}
    }
    if let Some(col) = &cluster_col {
        let cl = cluster_modes(&set.column(col)?.to_vec(), 5)?;
        if let Some(k) = a.clusters {
            checks.push(Check::equals("cluster_count", None, cl.k(), k));
        }
        metrics.insert("clusters".into(), json!(cl));
    }
    if let (Some(r), Some(col)) = (&a.reference, &a.column) {
        let reference = load_data(r, &[])?;
        let s = set.column(col)?.to_vec();
        let t = reference.column(col)?.to_vec();
        let lo = s.iter().chain(&t).copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().chain(&t).copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = Bins { lo, hi: hi + 1e-12, width: 0.25 };
        metrics.insert("ks".into(), json!(ks_distance(&s, &t)));
        metrics.insert("histogram".into(), json!(histogram_compare(&s, &t, &bins)?));
    }
    let passed = checks.iter().all(|c| c.passed);
    let out = json!({"samples": a.samples, "rows": set.len(), "metrics": metrics, "checks": checks, "passed": passed});
    let text = serde_json::to_string_pretty(&out)?;
    if let Some(path) = &a.out {
        let args = json!({"samples": a.samples, "oracle": a.oracle, "out": path});
        write_with_provenance(path, text.as_bytes(), "evaluate", args, &config, json!({}))?;
    }
    // A closed stdout (e.g. piped into `head`) is not an error.
    let _ = writeln!(std::io::stdout(), "{text}");
    let failures: Vec<Value> = checks.iter().filter(|c| !c.passed).map(|c| failure_json("evaluate", c)).collect();
    report_failures(&failures)
}

fn fraction_check(a: &EvaluateArgs, frac: f64, checks: &mut Vec<Check>) {
    if let Some(min) = a.min_fraction {
        checks.push(Check::at_least("fraction_below_tol", None, frac, min));
    }
}
