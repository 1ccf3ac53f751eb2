fn main() {
    env_logger::init();
    std::process::exit(dsmp_cli::run(std::env::args_os()));
}
