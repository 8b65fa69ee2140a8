fn main() {
    std::process::exit(kvdit_cli::main_with_args(std::env::args_os()));
}
