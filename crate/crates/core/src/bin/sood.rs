fn main() {
    std::process::exit(sood_core::cli::run(std::env::args_os()));
}
