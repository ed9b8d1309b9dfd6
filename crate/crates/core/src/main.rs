fn main() {
    std::process::exit(graphtext::cli::run(std::env::args_os()));
}
