use std::collections::HashMap;

use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_env("CWEGUARD_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .init();
    let vars: HashMap<String, String> = std::env::vars().collect();
    let code = cweguard_cli::run(std::env::args_os(), &vars, &mut std::io::stdout(), &mut std::io::stderr()).await;
    std::process::exit(code);
}
