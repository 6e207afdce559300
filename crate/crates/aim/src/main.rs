fn main() {
    std::process::exit(aim::cli::main_with_args(std::env::args_os()));
}
