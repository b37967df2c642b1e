fn main() -> std::process::ExitCode {
    wstal::cli::run(std::env::args_os())
}
