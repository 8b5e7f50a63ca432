use clap::Parser;

fn main() {
    let cli = gsedit::cli::Cli::parse();
    if let Err(e) = gsedit::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(gsedit::cli::exit_code(&e));
    }
}
