use clap::Parser;

fn main() {
    std::process::exit(dsoba::cli::execute(dsoba::cli::Cli::parse()));
}
