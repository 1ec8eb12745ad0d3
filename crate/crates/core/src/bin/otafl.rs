fn main() {
    std::process::exit(otafl::cli::main_with_args(std::env::args_os()));
}
