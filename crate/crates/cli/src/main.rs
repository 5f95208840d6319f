use clap::Parser;
use epk_cli::args::Cli;

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = epk_cli::commands::dispatch(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(epk_cli::exit_code(&e));
    }
}
