fn main() {
    std::process::exit(xptlab::cli::run());
}
