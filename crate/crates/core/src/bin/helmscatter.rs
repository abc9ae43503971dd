fn main() {
    std::process::exit(helmscatter::cli::run(std::env::args_os()));
}
