use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(homoglab_harness::cli::run(std::env::args_os()))
}
