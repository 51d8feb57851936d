use clap::Parser;

fn main() {
    let cli = mkl_cli::Cli::parse();
    if let Err(e) = mkl_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
