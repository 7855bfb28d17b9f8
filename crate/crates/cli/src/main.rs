fn main() {
    std::process::exit(ddesc_cli::main_with_args(std::env::args_os()));
}
