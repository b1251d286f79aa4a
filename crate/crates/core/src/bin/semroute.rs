fn main() {
    std::process::exit(semroute::cli::main_with_args(std::env::args_os().collect()));
}
