fn main() {
    std::process::exit(iapo::cli::run_cli(std::env::args_os()));
}
