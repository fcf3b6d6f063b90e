fn main() {
    std::process::exit(mrflow::cli::run(std::env::args_os()));
}
