fn main() {
    std::process::exit(kinoplan::cli::run());
}
