fn main() -> std::process::ExitCode {
    ragforge::cli::main_with_args(std::env::args_os())
}
