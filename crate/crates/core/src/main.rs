use std::process::ExitCode;

fn main() -> ExitCode {
    rsdbpf::cli::main_with_args(std::env::args_os())
}
