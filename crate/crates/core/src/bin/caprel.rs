fn main() {
    std::process::exit(caprel::cli::main_with_args(std::env::args_os()));
}
