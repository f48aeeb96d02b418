//! Experiment grids over (policy, batch size, seed), their on-disk cell
//! records, and the CSV reports built from them.
//!
//! Output layout under the experiment directory:
//!
//! ```text
//! config.toml                  canonical copy of the parsed config
//! cells/<policy>_b<B>_s<S>.json  one record per cell (metrics or error)
//! accuracy/b<B>_s<S>.json      per-layer accuracy of the predictor
//! summary.csv                  makespans and gain columns per (batch, seed)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{Calibration, CostParams};
use crate::error::{Error, Result};
use crate::predictor::{load_checkpoint, plan_residency, AccuracyReport, GateReuse, HotExpertTable, LLaPor, RoutingPredictor};
use crate::scheduler::SchedulerPolicy;
use crate::sim::{offline_hit_rate, prediction_accuracy, run_scenario, scenario_from_trace, compute_metrics, Metrics, PredictionSource, SimConfig};
use crate::util::write_atomic;
use crate::workload::{generate_trace, ModelSpec, Preset, Trace, TraceGenConfig};

/// Seed offset of the profiling trace that feeds frequency tables and
/// residency, so they never see the evaluated trace.
const PROFILE_SEED_OFFSET: u64 = 0x9e37_79b9;

/// A preset name (`deepseek-desk`, `mixtral`, ...) or an explicit spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Preset(String),
    Custom(ModelSpec),
}

impl ModelChoice {
    pub fn resolve(&self) -> Result<ModelSpec> {
        let spec = match self {
            ModelChoice::Preset(name) => {
                Preset::lookup(name).ok_or_else(|| Error::InvalidConfig(format!("unknown model preset `{name}`")))?
            }
            ModelChoice::Custom(spec) => spec.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Cost parameters inline, or a calibration file produced by `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CostChoice {
    Params(CostParams),
    Calibration { calibration: PathBuf },
}

impl CostChoice {
    pub fn resolve(&self) -> Result<CostParams> {
        match self {
            CostChoice::Params(p) => {
                p.validate()?;
                Ok(*p)
            }
            CostChoice::Calibration { calibration } => Calibration::load(calibration)?.params(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorChoice {
    Llapor { checkpoint: PathBuf },
    Stats,
    Gate,
    OracleNoise { hit_rate: f64 },
}

impl FromStr for PredictorChoice {
    type Err = Error;

    /// `stats`, `gate`, `oracle_noise:<rate>` or `llapor:<checkpoint>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "stats" => Ok(PredictorChoice::Stats),
            None if s == "gate" => Ok(PredictorChoice::Gate),
            Some(("oracle_noise", r)) => match r.parse::<f64>() {
                Ok(hit_rate) if (0.0..=1.0).contains(&hit_rate) => Ok(PredictorChoice::OracleNoise { hit_rate }),
                _ => Err(Error::InvalidConfig(format!("oracle_noise rate `{r}` must lie in [0, 1]"))),
            },
            Some(("llapor", path)) if !path.is_empty() => Ok(PredictorChoice::Llapor {
                checkpoint: PathBuf::from(path),
            }),
            _ => Err(Error::InvalidConfig(format!(
                "unknown predictor `{s}` (expected stats, gate, oracle_noise:<rate> or llapor:<ckpt>)"
            ))),
        }
    }
}

impl fmt::Display for PredictorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictorChoice::Llapor { checkpoint } => write!(f, "llapor:{}", checkpoint.display()),
            PredictorChoice::Stats => f.write_str("stats"),
            PredictorChoice::Gate => f.write_str("gate"),
            PredictorChoice::OracleNoise { hit_rate } => write!(f, "oracle_noise:{hit_rate}"),
        }
    }
}

/// A predictor ready for replay, with the activation table used for
/// residency.
pub enum LoadedPredictor {
    Llapor(Box<LLaPor>),
    Stats(HotExpertTable),
    Gate(HotExpertTable),
    OracleNoise { hit_rate: f64, table: HotExpertTable },
}

impl LoadedPredictor {
    /// Loads the checkpoint or builds the frequency table from `profile`.
    pub fn load(choice: &PredictorChoice, profile: &Trace) -> Result<Self> {
        let table = || HotExpertTable::from_traces(std::slice::from_ref(profile));
        Ok(match choice {
            PredictorChoice::Llapor { checkpoint } => {
                let m = load_checkpoint(checkpoint)?;
                if m.spec != profile.spec {
                    return Err(Error::InvalidConfig(format!(
                        "checkpoint {} was trained for `{}`, not `{}`",
                        checkpoint.display(),
                        m.spec.name,
                        profile.spec.name
                    )));
                }
                LoadedPredictor::Llapor(Box::new(m))
            }
            PredictorChoice::Stats => LoadedPredictor::Stats(table()?),
            PredictorChoice::Gate => LoadedPredictor::Gate(table()?),
            PredictorChoice::OracleNoise { hit_rate } => LoadedPredictor::OracleNoise {
                hit_rate: *hit_rate,
                table: table()?,
            },
        })
    }

    pub fn source(&self) -> PredictionSource<'_> {
        match self {
            LoadedPredictor::Llapor(m) => PredictionSource::Model(m.as_ref() as &dyn RoutingPredictor),
            LoadedPredictor::Stats(t) => PredictionSource::Model(t),
            LoadedPredictor::Gate(_) => PredictionSource::Model(&GateReuse),
            LoadedPredictor::OracleNoise { hit_rate, .. } => PredictionSource::OracleNoise { hit_rate: *hit_rate },
        }
    }

    pub fn table(&self) -> &HotExpertTable {
        match self {
            LoadedPredictor::Llapor(m) => &m.table,
            LoadedPredictor::Stats(t) | LoadedPredictor::Gate(t) => t,
            LoadedPredictor::OracleNoise { table, .. } => table,
        }
    }

    /// Starting hit rate of the prefetch tracker, measured on `profile`.
    pub fn offline_hit_rate(&self, profile: &Trace, seed: u64) -> Result<f64> {
        if let LoadedPredictor::OracleNoise { hit_rate, .. } = self {
            return Ok(*hit_rate);
        }
        let sc = scenario_from_trace(profile, self.source(), &BTreeSet::new(), seed)?;
        Ok(offline_hit_rate(&sc))
    }
}

/// A trace of `spec` sharing the evaluated trace's model but not its tokens.
pub fn profiling_trace(gen: &TraceGenConfig, spec: &ModelSpec, batch_size: usize, seed: u64) -> Result<Trace> {
    generate_trace(gen, spec, batch_size, seed.wrapping_add(PROFILE_SEED_OFFSET))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelChoice,
    #[serde(default)]
    pub trace: TraceGenConfig,
    pub cost: CostChoice,
    pub policies: Vec<SchedulerPolicy>,
    pub predictor: PredictorChoice,
    pub batch_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// GPU bytes reserved for resident experts; 0 keeps every expert on the host.
    #[serde(default)]
    pub residency_budget_bytes: u64,
    /// Prefetch slots per buffer group; absent means one per expert.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefetch_slots: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical TOML form; parsing it gives back an equal config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() || self.seeds.is_empty() || self.batch_sizes.is_empty() {
            return Err(Error::InvalidConfig("need at least one policy, one seed and one batch size".into()));
        }
        if self.batch_sizes.contains(&0) {
            return Err(Error::InvalidConfig("batch sizes must be >= 1".into()));
        }
        let mut seen = BTreeSet::new();
        if let Some(p) = self.policies.iter().find(|p| !seen.insert(**p)) {
            return Err(Error::InvalidConfig(format!("policy {p} is listed twice")));
        }
        if self.prefetch_slots == Some(0) {
            return Err(Error::InvalidConfig("prefetch_slots must be >= 1".into()));
        }
        self.model.resolve()?;
        self.trace.validate()?;
        if let CostChoice::Calibration { calibration } = &self.cost {
            if !calibration.is_file() {
                return Err(Error::InvalidConfig(format!("calibration file {} does not exist", calibration.display())));
            }
        }
        if let PredictorChoice::Llapor { checkpoint } = &self.predictor {
            if !checkpoint.is_file() {
                return Err(Error::InvalidConfig(format!("checkpoint {} does not exist", checkpoint.display())));
            }
        }
        self.cost.resolve()?;
        Ok(())
    }
}

/// Input of `gen-trace`: which model, how many tokens per iteration, and
/// the generator knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFileConfig {
    pub model: ModelChoice,
    pub batch_size: usize,
    #[serde(default)]
    pub trace: TraceGenConfig,
}

impl TraceFileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Generates the trace this config describes.
    pub fn generate(&self, seed: u64) -> Result<Trace> {
        generate_trace(&self.trace, &self.model.resolve()?, self.batch_size, seed)
    }
}

/// Outcome of one (policy, batch, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRecord {
    pub policy: SchedulerPolicy,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CellRecord {
    pub fn file_name(&self) -> String {
        let policy = self.policy.to_string().replace(':', "-");
        format!("{policy}_b{}_s{}.json", self.batch_size, self.seed)
    }
}

/// Per-layer prediction accuracy on one evaluated trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyRecord {
    pub batch_size: usize,
    pub seed: u64,
    pub predictor: String,
    pub layers: Vec<AccuracyReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub cells: Vec<CellRecord>,
    pub accuracy: Vec<AccuracyRecord>,
    pub out_dir: PathBuf,
}

impl ExperimentOutcome {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

/// Runs every policy on one (batch, seed) trace. Failures stay local to
/// their cell.
fn run_group(cfg: &ExperimentConfig, spec: &ModelSpec, params: CostParams, batch: usize, seed: u64) -> (Vec<CellRecord>, Option<AccuracyRecord>) {
    let cell = |policy, r: Result<Metrics>| {
        let (metrics, error) = match r {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        };
        CellRecord {
            policy,
            batch_size: batch,
            seed,
            metrics,
            error,
        }
    };
    let prepared = (|| -> Result<_> {
        let trace = generate_trace(&cfg.trace, spec, batch, seed)?;
        let profile = profiling_trace(&cfg.trace, spec, batch, seed)?;
        let predictor = LoadedPredictor::load(&cfg.predictor, &profile)?;
        let resident: BTreeSet<(usize, usize)> =
            plan_residency(predictor.table(), cfg.residency_budget_bytes, spec.expert_bytes).into_iter().collect();
        let mut sim = SimConfig::new(params);
        sim.prefetch_slots = cfg.prefetch_slots;
        sim.initial_hit_rate = predictor.offline_hit_rate(&profile, seed)?;
        let sc = scenario_from_trace(&trace, predictor.source(), &resident, seed)?;
        let accuracy = prediction_accuracy(&trace, predictor.source(), seed)?;
        Ok((sc, sim, accuracy))
    })();
    let (sc, sim, layers) = match prepared {
        Ok(x) => x,
        Err(e) => {
            let msg = e.to_string();
            let cells = cfg.policies.iter().map(|&p| cell(p, Err(Error::InvalidArgument(msg.clone())))).collect();
            return (cells, None);
        }
    };
    let cells = cfg
        .policies
        .iter()
        .map(|&p| cell(p, run_scenario(&sc, &sim, p).map(|out| compute_metrics(&out.timeline))))
        .collect();
    let acc = AccuracyRecord {
        batch_size: batch,
        seed,
        predictor: cfg.predictor.to_string(),
        layers,
    };
    (cells, Some(acc))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_atomic(path, text.as_bytes())
}

/// Runs the whole grid, writing cell records and the summary under `out`.
/// (batch, seed) groups run on separate threads; outputs are ordered by
/// batch, seed, then policy as listed.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let spec = cfg.model.resolve()?;
    let params = cfg.cost.resolve()?;
    let groups: Vec<(usize, u64)> = cfg.batch_sizes.iter().flat_map(|&b| cfg.seeds.iter().map(move |&s| (b, s))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut results = Vec::with_capacity(groups.len());
    for chunk in groups.chunks(workers) {
        let done: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(b, s)| {
                    let spec = &spec;
                    scope.spawn(move || run_group(cfg, spec, params, b, s))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("experiment worker panicked")).collect()
        });
        results.extend(done);
    }
    let mut cells = Vec::new();
    let mut accuracy = Vec::new();
    for (c, a) in results {
        cells.extend(c);
        accuracy.extend(a);
    }
    write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    for c in &cells {
        write_json(&out.join("cells").join(c.file_name()), c)?;
    }
    for a in &accuracy {
        write_json(&out.join("accuracy").join(format!("b{}_s{}.json", a.batch_size, a.seed)), a)?;
    }
    write_atomic(&out.join("summary.csv"), summary_csv(&cells)?.as_bytes())?;
    Ok(ExperimentOutcome {
        cells,
        accuracy,
        out_dir: out.to_path_buf(),
    })
}

/// Relative makespan gain of the prefetch-aware policy over `base`.
pub fn relative_gain(base: u64, presched: u64) -> Option<f64> {
    (base > 0).then(|| (base as f64 - presched as f64) / base as f64)
}

fn policies_in(cells: &[CellRecord]) -> Vec<SchedulerPolicy> {
    let mut out: Vec<SchedulerPolicy> = Vec::new();
    for c in cells {
        if !out.contains(&c.policy) {
            out.push(c.policy);
        }
    }
    out
}

fn csv_text(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(r).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per (batch, seed): each policy's makespan, then one
/// `gain_vs_<policy>` column per baseline when the prefetch-aware policy is
/// present. Failed cells show `error`.
pub fn summary_csv(cells: &[CellRecord]) -> Result<String> {
    let policies = policies_in(cells);
    let has_presched = policies.contains(&SchedulerPolicy::PreSched);
    let baselines: Vec<SchedulerPolicy> = policies.iter().copied().filter(|&p| p != SchedulerPolicy::PreSched).collect();
    let mut header = vec!["batch_size".to_string(), "seed".to_string()];
    header.extend(policies.iter().map(|p| format!("makespan_{p}")));
    if has_presched {
        header.extend(baselines.iter().map(|p| format!("gain_vs_{p}")));
    }
    let mut groups: BTreeMap<(usize, u64), BTreeMap<SchedulerPolicy, Option<u64>>> = BTreeMap::new();
    for c in cells {
        groups
            .entry((c.batch_size, c.seed))
            .or_default()
            .insert(c.policy, c.metrics.as_ref().map(|m| m.makespan));
    }
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|(&(b, s), m)| {
            let get = |p: &SchedulerPolicy| m.get(p).copied().flatten();
            let mut row = vec![b.to_string(), s.to_string()];
            row.extend(policies.iter().map(|p| match m.get(p) {
                Some(Some(v)) => v.to_string(),
                Some(None) => "error".to_string(),
                None => String::new(),
            }));
            if has_presched {
                let pre = get(&SchedulerPolicy::PreSched);
                row.extend(baselines.iter().map(|p| match (get(p), pre) {
                    (Some(base), Some(pre)) => relative_gain(base, pre).map_or(String::new(), |g| format!("{g:.6}")),
                    _ => String::new(),
                }));
            }
            row
        })
        .collect();
    csv_text(&header, &rows)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Files written by [`report`], and the inputs it could not use.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportOutcome {
    pub written: Vec<PathBuf>,
    pub problems: Vec<String>,
}

fn read_dir_json<T: for<'de> Deserialize<'de>>(dir: &Path, problems: &mut Vec<String>) -> Vec<T> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "json")).collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match std::fs::read_to_string(&p).map_err(|e| e.to_string()).and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string())) {
            Ok(v) => out.push(v),
            Err(e) => problems.push(format!("{}: {e}", p.display())),
        }
    }
    out
}

/// Rebuilds the summary and writes plot-ready series from an experiment
/// directory: `summary.csv`, `latency_vs_batch.csv`, `cpu_gpu_gap.csv` and
/// `accuracy_per_layer.csv`. Unreadable inputs are skipped and listed.
pub fn report(metrics_dir: &Path, out: &Path) -> Result<ReportOutcome> {
    let mut outcome = ReportOutcome::default();
    if !metrics_dir.is_dir() {
        outcome.problems.push(format!("{}: not a directory", metrics_dir.display()));
    }
    let mut cells: Vec<CellRecord> = read_dir_json(&metrics_dir.join("cells"), &mut outcome.problems);
    cells.sort_by(|a, b| (a.batch_size, a.seed, a.policy).cmp(&(b.batch_size, b.seed, b.policy)));
    let accuracy: Vec<AccuracyRecord> = read_dir_json(&metrics_dir.join("accuracy"), &mut outcome.problems);

    let mut files: Vec<(&str, String)> = vec![("summary.csv", summary_csv(&cells)?)];

    let mut by_policy_batch: BTreeMap<(SchedulerPolicy, usize), Vec<&Metrics>> = BTreeMap::new();
    for c in &cells {
        if let Some(m) = &c.metrics {
            by_policy_batch.entry((c.policy, c.batch_size)).or_default().push(m);
        }
    }
    let header: Vec<String> = ["policy", "batch_size", "cells", "mean_makespan", "mean_decode_latency", "mean_throughput"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = by_policy_batch
        .iter()
        .map(|(&(p, b), ms)| {
            vec![
                p.to_string(),
                b.to_string(),
                ms.len().to_string(),
                format!("{:.3}", mean(&ms.iter().map(|m| m.makespan as f64).collect::<Vec<_>>())),
                format!("{:.3}", mean(&ms.iter().map(|m| m.decode_latency).collect::<Vec<_>>())),
                format!("{:.6}", mean(&ms.iter().map(|m| m.throughput).collect::<Vec<_>>())),
            ]
        })
        .collect();
    files.push(("latency_vs_batch.csv", csv_text(&header, &rows)?));

    let header: Vec<String> = ["policy", "batch_size", "seed", "stage", "gap"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = cells
        .iter()
        .filter_map(|c| c.metrics.as_ref().map(|m| (c, m)))
        .flat_map(|(c, m)| {
            m.cpu_gpu_gap
                .iter()
                .enumerate()
                .map(move |(g, gap)| vec![c.policy.to_string(), c.batch_size.to_string(), c.seed.to_string(), g.to_string(), gap.to_string()])
        })
        .collect();
    files.push(("cpu_gpu_gap.csv", csv_text(&header, &rows)?));

    let header: Vec<String> = ["predictor", "batch_size", "seed", "layer", "hits", "total", "rate"].map(String::from).to_vec();
    let mut acc_sorted: Vec<&AccuracyRecord> = accuracy.iter().collect();
    acc_sorted.sort_by(|a, b| (a.batch_size, a.seed).cmp(&(b.batch_size, b.seed)));
    let rows: Vec<Vec<String>> = acc_sorted
        .iter()
        .flat_map(|a| {
            a.layers.iter().enumerate().filter(|(_, r)| r.total > 0).map(move |(l, r)| {
                vec![
                    a.predictor.clone(),
                    a.batch_size.to_string(),
                    a.seed.to_string(),
                    l.to_string(),
                    r.hits.to_string(),
                    r.total.to_string(),
                    format!("{:.6}", r.rate()),
                ]
            })
        })
        .collect();
    files.push(("accuracy_per_layer.csv", csv_text(&header, &rows)?));

    for (name, text) in files {
        let path = out.join(name);
        write_atomic(&path, text.as_bytes())?;
        outcome.written.push(path);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
model = "mixtral-desk"
policies = ["presched", "ondemand"]
batch_sizes = [4]
seeds = [1]

[cost]
t_io = 4000
t_g = 200
t_attn = 3000
beta = 40.0
startup = 500.0

[predictor]
kind = "oracle_noise"
hit_rate = 0.9

[trace]
iterations = 2
"#;

    #[test]
    fn config_round_trips_through_canonical_toml() {
        let cfg = ExperimentConfig::parse(SAMPLE).unwrap();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::parse(&text).unwrap().to_toml().unwrap(), text);
    }

    #[test]
    fn config_errors_are_config_errors() {
        let bad = SAMPLE.replace(r#"policies = ["presched", "ondemand"]"#, "policies = []");
        assert!(matches!(ExperimentConfig::parse(&bad).unwrap().validate(), Err(Error::InvalidConfig(_))));
        let typo = SAMPLE.replace("seeds", "sedes");
        assert!(matches!(ExperimentConfig::parse(&typo), Err(Error::InvalidConfig(_))));
        let missing = SAMPLE.replace(r#"kind = "oracle_noise""#, "kind = \"llapor\"\ncheckpoint = \"/nonexistent.ckpt\"").replace("hit_rate = 0.9", "");
        assert!(matches!(ExperimentConfig::parse(&missing).unwrap().validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn predictor_choice_parses() {
        assert_eq!("stats".parse::<PredictorChoice>().unwrap(), PredictorChoice::Stats);
        assert_eq!(
            "oracle_noise:0.5".parse::<PredictorChoice>().unwrap(),
            PredictorChoice::OracleNoise { hit_rate: 0.5 }
        );
        for s in ["oracle_noise:2", "lru", "llapor:"] {
            assert!(s.parse::<PredictorChoice>().is_err(), "{s}");
        }
        let c = "llapor:a/b.ckpt".parse::<PredictorChoice>().unwrap();
        assert_eq!(c.to_string().parse::<PredictorChoice>().unwrap(), c);
    }

    #[test]
    fn summary_gain_is_relative_to_each_baseline() {
        let m = |makespan| Metrics {
            stage_latency: vec![],
            makespan,
            decode_latency: 0.0,
            throughput: 0.0,
            io_busy_fraction: 0.0,
            gpu_idle_fraction: 0.0,
            cpu_gpu_gap: vec![],
        };
        let rec = |policy, metrics: Option<Metrics>| CellRecord {
            policy,
            batch_size: 8,
            seed: 3,
            error: metrics.is_none().then(|| "boom".to_string()),
            metrics,
        };
        let cells = vec![
            rec(SchedulerPolicy::PreSched, Some(m(75))),
            rec(SchedulerPolicy::OnDemandOnly, Some(m(100))),
            rec(SchedulerPolicy::LayerGreedy, None),
        ];
        let text = summary_csv(&cells).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "batch_size,seed,makespan_presched,makespan_ondemand,makespan_greedy,gain_vs_ondemand,gain_vs_greedy"
        );
        assert_eq!(lines.next().unwrap(), "8,3,75,100,error,0.250000,");
        assert_eq!(relative_gain(0, 5), None);
    }
}
