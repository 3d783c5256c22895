fn main() {
    std::process::exit(mimofan::cli::run());
}
