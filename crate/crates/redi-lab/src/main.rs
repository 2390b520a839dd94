use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(redi_lab::cli::dispatch(std::env::args_os()) as u8)
}
