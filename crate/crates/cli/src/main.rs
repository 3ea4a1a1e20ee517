use clap::Parser;

use sfuda_cli::cli::Cli;

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.global.log_level)
        .format_timestamp_secs()
        .init();
    if let Err(e) = sfuda_cli::commands::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
