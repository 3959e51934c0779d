fn main() {
    std::process::exit(timeartist::cli::run(std::env::args_os()));
}
