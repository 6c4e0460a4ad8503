use std::io::Write;

use clap::Parser;
use culture_manager::app::{self, Cli};
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let code = match app::run(&cli).await {
        Ok(report) => {
            // a closed pipe (e.g. `| head`) is not an error worth reporting
            let _ = writeln!(std::io::stdout(), "{}", report.render(cli.json));
            report.code
        }
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "{}", e.render(cli.json));
            e.code
        }
    };
    std::process::exit(code);
}
