use clap::Parser;

fn main() {
    txst_cli::logging::init();
    let cli = txst_cli::Cli::parse();
    if let Err(e) = txst_cli::run(cli) {
        eprintln!(
            "{}",
            serde_json::to_string(&e.line()).expect("error line serializes")
        );
        std::process::exit(e.exit_code());
    }
}
