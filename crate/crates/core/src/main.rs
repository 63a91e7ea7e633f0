fn main() {
    env_logger::init();
    std::process::exit(kmr::harness::cli::run_cli(std::env::args_os()));
}
