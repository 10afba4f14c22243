fn main() -> std::process::ExitCode {
    fmvr_core::cli::main_with_args(std::env::args_os())
}
