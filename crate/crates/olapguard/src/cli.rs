use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::commands;
use crate::error::{Error, Result};
use crate::report::{emit_report, Format, Report};
use crate::scenario::parse_scenario;
use crate::topology::parse_topology;
use crate::workload::parse_workloads;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Repair the zone layout of a topology.
    Place,
    /// Plan a safe move between two segment layouts of a topology.
    Rebalance,
    /// Run a routing simulation.
    Simulate,
    /// Run a simulation under workload budgets and report enforcement.
    QwiReport,
}

fn existing(s: &str) -> std::result::Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.exists() {
        Ok(p)
    } else {
        Err(format!("{s} does not exist"))
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "olapguard", version, about = "Placement, rebalance, routing and budget experiments")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario file (TOML).
    #[arg(long, global = true, value_parser = existing)]
    pub scenario: Option<PathBuf>,
    /// Cluster topology file (TOML).
    #[arg(long, global = true, value_parser = existing)]
    pub topology: Option<PathBuf>,
    /// Workload budget file (JSON).
    #[arg(long, global = true, value_parser = existing)]
    pub workloads: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::field(flag, "this subcommand needs the file"))
}

impl RunConfig {
    fn scenario(&self) -> Result<olapguard_core::sim::Scenario> {
        let mut s = match &self.scenario {
            Some(p) => parse_scenario(p)?,
            None => return Err(Error::field("--scenario", "this subcommand needs the file")),
        };
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        Ok(s)
    }

    /// Builds the report without writing anything.
    pub fn report(&self) -> Result<Report> {
        match self.command {
            Command::Place => commands::place(&parse_topology(required(&self.topology, "--topology")?)?),
            Command::Rebalance => commands::rebalance(&parse_topology(required(&self.topology, "--topology")?)?),
            Command::Simulate => {
                let mut s = self.scenario()?;
                if let Some(p) = &self.workloads {
                    commands::apply_workloads(&mut s, &parse_workloads(p)?);
                }
                commands::simulate(&s)
            }
            Command::QwiReport => {
                let mut s = self.scenario()?;
                let w = parse_workloads(required(&self.workloads, "--workloads")?)?;
                commands::apply_workloads(&mut s, &w);
                let topo = self.topology.as_deref().map(parse_topology).transpose()?;
                commands::qwi_report(&s, &w, topo.as_ref())
            }
        }
    }

    /// Builds and writes the report. Safety breaches are reported after the
    /// files are written so they can be inspected.
    pub fn execute(&self) -> Result<(Report, Vec<PathBuf>)> {
        let report = self.report()?;
        let written = emit_report(&report, &self.out, self.format)?;
        if !report.violations.is_empty() {
            return Err(Error::Invariant(report.violations));
        }
        Ok((report, written))
    }
}
