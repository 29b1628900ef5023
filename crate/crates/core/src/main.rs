fn main() {
    std::process::exit(protogmm::cli::run(std::env::args_os()));
}
