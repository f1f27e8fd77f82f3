fn main() {
    std::process::exit(skd::cli::run());
}
