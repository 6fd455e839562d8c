fn main() {
    std::process::exit(reformer_cli::main_with_args(std::env::args_os()));
}
