use clap::Parser;

fn main() {
    let cli = eag::cli::Cli::parse();
    if let Err(err) = eag::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
