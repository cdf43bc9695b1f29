fn main() {
    std::process::exit(diagq::pipeline::cli::main_with_args(std::env::args_os()));
}
