use clap::Parser;
use maskmoe::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
