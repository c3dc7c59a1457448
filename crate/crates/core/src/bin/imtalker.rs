fn main() {
    std::process::exit(imtalker::cli::run(std::env::args_os()));
}
