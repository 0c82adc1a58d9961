fn main() {
    std::process::exit(aligns_service::cli::run(std::env::args_os()));
}
