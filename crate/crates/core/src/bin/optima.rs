fn main() {
    std::process::exit(optima::cli::run(std::env::args_os()));
}
