use clap::Parser;
use npo_lab::cli;

fn main() {
    let args = cli::Cli::parse();
    std::process::exit(cli::run(args));
}
