fn main() {
    std::process::exit(sdmae::cli::run_command(std::env::args_os()));
}
