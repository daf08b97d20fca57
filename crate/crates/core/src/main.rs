fn main() {
    std::process::exit(b2b::cli::run_cli(std::env::args_os()));
}
