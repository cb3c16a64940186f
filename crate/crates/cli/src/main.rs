use clap::Parser;
use rfmpose_cli::config::SEED_ENV;
use rfmpose_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli, std::env::var(SEED_ENV).ok()) {
        eprintln!("rfmpose: {}", e.diagnostic());
        std::process::exit(e.exit_code());
    }
}
