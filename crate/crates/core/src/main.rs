fn main() {
    std::process::exit(springtwin::cli::main_with_args(std::env::args_os()));
}
