fn main() {
    std::process::exit(frkan_cli::main_with_args(std::env::args_os()));
}
