fn main() {
    std::process::exit(toucan::cli::run(std::env::args()));
}
