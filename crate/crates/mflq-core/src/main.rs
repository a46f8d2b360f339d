use std::process::ExitCode;

fn main() -> ExitCode {
    mflq_core::cli::main_entry()
}
