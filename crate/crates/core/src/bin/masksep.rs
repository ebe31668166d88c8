use clap::Parser;

fn main() {
    std::process::exit(masksep::cli::run(masksep::cli::Cli::parse()));
}
