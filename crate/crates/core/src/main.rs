use clap::Parser;
use qglab::cli::{dispatch, init_threads, Cli};

fn main() {
    init_threads();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
