use std::process::ExitCode;

fn main() -> ExitCode {
    sparse_prefill_cli::main_with_args(std::env::args_os())
}
