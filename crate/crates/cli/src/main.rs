use std::process::ExitCode;

fn main() -> ExitCode {
    match vfd_cli::run_env() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
