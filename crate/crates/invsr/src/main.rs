use clap::Parser;

fn main() {
    let cli = invsr::cli::Cli::parse();
    std::process::exit(invsr::cli::run(cli));
}
