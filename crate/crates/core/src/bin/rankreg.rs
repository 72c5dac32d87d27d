fn main() {
    std::process::exit(rankreg::cli::main_with_args(std::env::args_os()));
}
