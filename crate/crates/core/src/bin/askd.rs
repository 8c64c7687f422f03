fn main() {
    std::process::exit(askd::cli::main_with_args(std::env::args_os()));
}
