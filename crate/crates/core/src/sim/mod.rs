//! Discrete-event simulation of the GPU / CPU / I/O-channel pipeline.

mod buffer;
mod engine;
mod golden;
mod instance;
mod metrics;
mod replay;
mod timeline;
mod verify;

pub use buffer::BufferPool;
pub use engine::{run_scenario, Engine, Scenario, SimConfig, SimOutput, StageInput, StageRecord, TRANSFER_CHUNKS};
pub use golden::{golden_case, replay_golden, GoldenCase, GoldenReport, GoldenRun, RunDiff, GOLDEN_IDS};
pub use instance::{random_instance, random_scenario, InstanceConfig};
pub use metrics::{compute_metrics, Metrics};
pub use replay::{offline_hit_rate, prediction_accuracy, scenario_from_trace, simulate, PredictionSource};
pub use timeline::{EventKind, Resource, Timeline, TimelineEvent, TimelineHeader};
pub use verify::{verify_timeline, Violation};
