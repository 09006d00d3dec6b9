use std::process::ExitCode;

use clap::Parser;
use vtrack_cli::{error::error_json, execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", error_json(&anyhow::Error::new(e).context("configuring the thread pool")));
            return ExitCode::FAILURE;
        }
    }
    match execute(cli) {
        Ok(outcome) => {
            let report = serde_json::json!({ "status": "ok", "command": outcome.command, "manifest": outcome.manifest, "outputs": outcome.outputs });
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
