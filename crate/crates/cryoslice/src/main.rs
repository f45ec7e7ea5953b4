use std::process::ExitCode;

fn main() -> ExitCode {
    cryoslice::cli::main_with_args(std::env::args_os())
}
