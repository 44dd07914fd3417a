use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = inkvit_cli::Cli::parse();
    if let Err(e) = inkvit_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(inkvit_cli::exit_code(&e));
    }
}
