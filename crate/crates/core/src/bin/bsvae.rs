fn main() {
    std::process::exit(bsvae::cli::run(std::env::args_os()));
}
