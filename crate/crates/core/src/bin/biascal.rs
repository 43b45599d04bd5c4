fn main() {
    std::process::exit(biascal::cli::run(std::env::args_os()));
}
