fn main() -> std::process::ExitCode {
    vibrodiag::cli::run_from(std::env::args_os())
}
