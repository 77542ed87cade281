fn main() {
    std::process::exit(canopy::cli::run(std::env::args_os()));
}
