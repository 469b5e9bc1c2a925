use clap::Parser;

fn main() {
    let cli = ivim_cli::Cli::parse();
    if let Err(e) = ivim_cli::run(cli) {
        eprintln!("ivim: {e}");
        std::process::exit(e.exit_code());
    }
}
