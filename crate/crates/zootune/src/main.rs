fn main() {
    std::process::exit(zootune::cli::run(std::env::args_os()));
}
