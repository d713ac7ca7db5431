use clap::Parser;

fn main() {
    let cli = srnn::cli::Cli::parse();
    if let Err(e) = srnn::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
