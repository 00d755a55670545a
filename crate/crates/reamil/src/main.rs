use clap::FromArgMatches;
use reamil::cli;

fn main() {
    // Timestamps are stripped so logs are diff-able between runs.
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let matches = cli::command().get_matches();
    let parsed = match cli::Cli::from_arg_matches(&matches) {
        Ok(p) => p,
        Err(e) => e.exit(),
    };
    if let Err(e) = cli::execute(parsed) {
        eprintln!("{}", cli::error_line(&e));
        std::process::exit(1);
    }
}
