use clap::Parser;

use interaction_moe::cli::{run, Cli};

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse_from(&argv);
    if let Err(e) = run(&cli, &argv) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
