fn main() {
    std::process::exit(mople::cli::run(std::env::args_os()));
}
