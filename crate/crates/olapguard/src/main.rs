use std::process::ExitCode;

use clap::Parser;
use olapguard::{exit, RunConfig};

fn main() -> ExitCode {
    let config = RunConfig::parse();
    match config.execute() {
        Ok((report, written)) => {
            if report.summary.get("best_effort") == Some(&serde_json::Value::Bool(true)) {
                eprintln!("warning: the zone pool is too unbalanced for a full repair; layout is best effort");
            }
            for p in written {
                println!("{}", p.display());
            }
            ExitCode::from(exit::OK)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
