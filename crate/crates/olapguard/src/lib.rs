//! File formats, reports and the command-line driver for `olapguard-core`.

pub mod cli;
pub mod commands;
mod doc;
pub mod error;
pub mod report;
pub mod scenario;
pub mod topology;
pub mod workload;

pub use cli::{Command, RunConfig};
pub use error::{exit, Error, Problem, Result};
pub use report::{emit_report, Format, Report, Table};
pub use scenario::{emit_scenario, parse_scenario, parse_scenario_str};
pub use topology::{parse_topology, parse_topology_str, ClusterTopology};
pub use workload::{parse_workloads, parse_workloads_str};
