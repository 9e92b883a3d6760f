use clap::Parser;

fn main() {
    let cli = deskqa_cli::Cli::parse();
    if let Err(e) = deskqa_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(deskqa_cli::exit_code(&e));
    }
}
