use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moesched::cost::{fit_cost_params, read_samples_csv, Calibration, CostParams, Ticks};
use moesched::experiment::{report, run_experiment, ExperimentConfig, LoadedPredictor, PredictorChoice, TraceFileConfig};
use moesched::predictor::{load_checkpoint, plan_residency, save_checkpoint, train, trace_accuracy, AccuracyMode, TrainConfig};
use moesched::scheduler::SchedulerPolicy;
use moesched::sim::{compute_metrics, replay_golden, run_scenario, scenario_from_trace, SimConfig, GOLDEN_IDS};
use moesched::workload::{generate_trace, read_trace, write_trace, Trace};
use moesched::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_GOLDEN: u8 = 3;

#[derive(Parser)]
#[command(name = "moesched", version, about = "Expert scheduling experiments for offloaded MoE inference")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic routing trace.
    GenTrace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the CPU cost line from `tokens,ticks` samples.
    Calibrate {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4000)]
        t_io: Ticks,
        #[arg(long, default_value_t = 200)]
        t_g: Ticks,
        #[arg(long, default_value_t = 3000)]
        t_attn: Ticks,
    },
    /// Train the activation predictor on a trace.
    TrainPredictor {
        #[arg(long)]
        trace: PathBuf,
        /// TOML training config; defaults apply to omitted keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a trace.
    EvalPredictor {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "sliding")]
        mode: AccuracyMode,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 6)]
        kprime: usize,
    },
    /// Print the per-stage decisions of a policy on a trace.
    Schedule {
        #[arg(long)]
        policy: SchedulerPolicy,
        #[command(flatten)]
        sim: SimArgs,
        /// Write the dump here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a trace under one policy and export timeline and metrics.
    Simulate {
        #[arg(long)]
        policy: SchedulerPolicy,
        #[command(flatten)]
        sim: SimArgs,
        /// Directory receiving timeline.jsonl and metrics.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a policy x batch x seed grid from a TOML config.
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay hand-derived scenarios tick by tick.
    ReplayGolden {
        id: Option<String>,
        #[arg(long, conflicts_with = "id")]
        all: bool,
        /// Also write each replayed timeline here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build summary and series CSVs from an experiment directory.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    trace: PathBuf,
    /// stats, gate, oracle_noise:<rate> or llapor:<ckpt>.
    #[arg(long, default_value = "stats")]
    predictor: PredictorChoice,
    /// Trace used for frequency tables, residency and the starting hit
    /// rate; defaults to the evaluated trace.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Calibration file; overrides the cost flags below.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, default_value_t = 4000)]
    t_io: Ticks,
    #[arg(long, default_value_t = 200)]
    t_g: Ticks,
    #[arg(long, default_value_t = 3000)]
    t_attn: Ticks,
    #[arg(long, default_value_t = 40.0)]
    beta: f64,
    #[arg(long, default_value_t = 500.0)]
    startup: f64,
    #[arg(long, default_value_t = 0)]
    residency_budget: u64,
    #[arg(long)]
    prefetch_slots: Option<usize>,
    /// Seed of noisy prediction draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Prepared {
    scenario: moesched::sim::Scenario,
    config: SimConfig,
}

impl SimArgs {
    fn prepare(&self) -> moesched::Result<Prepared> {
        let trace = read_trace(&self.trace)?;
        let profile: Trace = match &self.profile {
            Some(p) => read_trace(p)?,
            None => trace.clone(),
        };
        let params = match &self.calibration {
            Some(p) => Calibration::load(p)?.params()?,
            None => CostParams::new(self.t_io, self.t_g, self.t_attn, self.beta, self.startup)?,
        };
        let predictor = LoadedPredictor::load(&self.predictor, &profile)?;
        let resident: BTreeSet<(usize, usize)> =
            plan_residency(predictor.table(), self.residency_budget, trace.spec.expert_bytes).into_iter().collect();
        let mut config = SimConfig::new(params);
        config.prefetch_slots = self.prefetch_slots;
        config.initial_hit_rate = predictor.offline_hit_rate(&profile, self.seed)?;
        let scenario = scenario_from_trace(&trace, predictor.source(), &resident, self.seed)?;
        Ok(Prepared { scenario, config })
    }
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidConfig(_)
            | Error::InvalidSpec(_)
            | Error::InvalidArgument(_)
            | Error::Format { .. }
            | Error::VersionMismatch { .. }
            | Error::ChecksumMismatch { .. }
            | Error::UnknownScenario(_)
            | Error::Io { .. }
            | Error::DegenerateSamples(_)
    )
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { EXIT_RUNTIME })
}

fn write_out(path: &Path, text: &str) -> moesched::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.into(), source })
}

fn run(cmd: Cmd) -> moesched::Result<ExitCode> {
    match cmd {
        Cmd::GenTrace { config, seed, out } => {
            let cfg = TraceFileConfig::load(&config)?;
            let spec = cfg.model.resolve()?;
            let trace = generate_trace(&cfg.trace, &spec, cfg.batch_size, seed)?;
            write_trace(&trace, &out)?;
            println!("wrote {} tokens x {} layers of `{}` to {}", trace.num_tokens(), spec.num_layers, spec.name, out.display());
        }
        Cmd::Calibrate { samples, out, t_io, t_g, t_attn } => {
            let fit = fit_cost_params(&read_samples_csv(&samples)?)?;
            let params = CostParams::new(t_io, t_g, t_attn, fit.beta, fit.startup)?;
            Calibration::from_params(&params).save(&out)?;
            println!("beta={:.6} startup={:.6} r2={:.6}", fit.beta, fit.startup, fit.r_squared);
        }
        Cmd::TrainPredictor { trace, config, seed, out } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|source| Error::Io { path: p.clone(), source })?;
                    toml::from_str::<TrainConfig>(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
                }
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let trace = read_trace(&trace)?;
            let (model, curve) = train(std::slice::from_ref(&trace), &cfg)?;
            save_checkpoint(&model, &out)?;
            for (epoch, loss) in curve.iter().enumerate() {
                println!("epoch {epoch} loss {loss:.6}");
            }
        }
        Cmd::EvalPredictor { ckpt, trace, mode, k, kprime } => {
            let model = load_checkpoint(&ckpt)?;
            let trace = read_trace(&trace)?;
            if model.spec != trace.spec {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint is for `{}`, trace is `{}`",
                    model.spec.name, trace.spec.name
                )));
            }
            let r = trace_accuracy(&trace, &model, mode, k, kprime)?;
            println!("{} {}/{} = {:.4}", serde_json::to_string(&mode)?.trim_matches('"'), r.hits, r.total, r.rate());
        }
        Cmd::Schedule { policy, sim, out } => {
            let p = sim.prepare()?;
            let run = run_scenario(&p.scenario, &p.config, policy)?;
            let mut text = String::new();
            for (g, plan) in run.plans.iter().enumerate() {
                text.push_str(&plan.dump_line(g));
                text.push('\n');
            }
            match out {
                Some(path) => write_out(&path, &text)?,
                None => print!("{text}"),
            }
        }
        Cmd::Simulate { policy, sim, out } => {
            let p = sim.prepare()?;
            let run = run_scenario(&p.scenario, &p.config, policy)?;
            let metrics = compute_metrics(&run.timeline);
            run.timeline.save(out.join("timeline.jsonl"))?;
            write_out(&out.join("metrics.json"), &(serde_json::to_string_pretty(&metrics)? + "\n"))?;
            println!("policy={policy} makespan={} throughput={:.3}", metrics.makespan, metrics.throughput);
        }
        Cmd::RunExperiment { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let out = out
                .or_else(|| cfg.out_dir.clone())
                .ok_or_else(|| Error::InvalidConfig("no output directory: pass --out or set out_dir".into()))?;
            let outcome = run_experiment(&cfg, &out)?;
            let failed = outcome.failed_cells();
            println!("{} cells, {failed} failed, results in {}", outcome.cells.len(), out.display());
            for c in outcome.cells.iter().filter(|c| c.error.is_some()) {
                eprintln!("cell {}: {}", c.file_name(), c.error.as_deref().unwrap_or_default());
            }
            if failed > 0 {
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
        }
        Cmd::ReplayGolden { id, all, out } => {
            let ids: Vec<String> = match (id, all) {
                (Some(id), false) => vec![id],
                (None, true) => GOLDEN_IDS.iter().map(|s| s.to_string()).collect(),
                _ => return Err(Error::InvalidArgument("pass a scenario id or --all".into())),
            };
            let mut mismatched = false;
            for id in ids {
                let (rep, timelines) = replay_golden(&id)?;
                let ok = rep.passed();
                mismatched |= !ok;
                println!("{} {id}", if ok { "PASS" } else { "FAIL" });
                if !ok {
                    println!("{}", serde_json::to_string_pretty(&rep.runs)?);
                }
                if let Some(dir) = &out {
                    for (run, t) in rep.runs.iter().zip(&timelines) {
                        t.save(dir.join(format!("{id}_{}.jsonl", run.policy.to_string().replace(':', "-"))))?;
                    }
                }
            }
            if mismatched {
                return Ok(ExitCode::from(EXIT_GOLDEN));
            }
        }
        Cmd::Report { metrics, out } => {
            let r = report(&metrics, &out)?;
            for p in &r.written {
                println!("wrote {}", p.display());
            }
            for p in &r.problems {
                eprintln!("skipped {p}");
            }
            if !r.problems.is_empty() {
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    run(cli.cmd).unwrap_or_else(fail)
}
