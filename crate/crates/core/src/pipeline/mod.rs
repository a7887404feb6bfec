//! Streaming inference: server topologies, the staged engine, and latency reports.

pub mod engine;
pub mod report;
pub mod session;
pub mod topology;

pub use engine::{read_message, run_stream, write_message, StreamOptions, Transport, WireMessage, WIRE_MAGIC};
pub use report::{quantile, realtime_check, RealtimeRule, TTBCReport};
pub use session::{parse_mode_script, ModeController, StreamSession};
pub use topology::{simulate_topology, Case, CostModel, Topology};
