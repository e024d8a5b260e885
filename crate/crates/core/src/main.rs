fn main() {
    std::process::exit(iforge::cli::main_with_args(std::env::args_os()));
}
