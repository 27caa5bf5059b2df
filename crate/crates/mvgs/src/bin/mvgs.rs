fn main() {
    std::process::exit(mvgs::cli::run(std::env::args()));
}
