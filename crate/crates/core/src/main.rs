use clap::Parser;

fn main() {
    std::process::exit(mofi::cli::run(mofi::cli::Cli::parse()));
}
