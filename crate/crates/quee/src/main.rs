use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = quee::cli::Cli::parse();
    match quee::cli::run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
