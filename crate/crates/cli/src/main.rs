use clap::Parser;

fn main() {
    let cli = panofuse_cli::Cli::parse();
    if let Err(e) = panofuse_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
