fn main() {
    std::process::exit(tilplan::cli::run(std::env::args_os()));
}
