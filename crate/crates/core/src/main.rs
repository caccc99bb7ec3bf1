use clap::Parser;
use gradiga::cli::{execute, exit_code, Cli};
use gradiga::error::Error;

fn main() {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonConvergence { history, .. } = &e {
                let h: Vec<String> = history.iter().map(|r| format!("{r:.3e}")).collect();
                eprintln!("residual history: {}", h.join(" "));
            }
            std::process::exit(exit_code(&e));
        }
    }
}
