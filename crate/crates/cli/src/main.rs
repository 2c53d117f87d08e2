fn main() -> std::process::ExitCode {
    psygat_cli::run(std::env::args_os())
}
