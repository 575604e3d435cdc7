use clap::Parser;

fn main() {
    let cli = dnls_cli::Cli::parse();
    std::process::exit(dnls_cli::run(&cli));
}
