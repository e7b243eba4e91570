use clap::Parser;

fn main() {
    let cli = pcrdiff::cli::Cli::parse();
    if let Err(e) = pcrdiff::cli::run(cli) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}
