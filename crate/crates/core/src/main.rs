use clap::Parser;
use robust_growth::cli::{main_with, RunConfig};

fn main() {
    std::process::exit(main_with(RunConfig::parse()));
}
