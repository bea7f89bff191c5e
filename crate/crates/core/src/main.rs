use clap::Parser;

use feddymem::cli::{error_json, init_logging, run, Cli};

fn main() {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    if let Err(e) = run(cli) {
        eprintln!("{}", error_json(&e));
        std::process::exit(e.exit_code());
    }
}
