fn main() {
    std::process::exit(mrem::cli::main_with_args(std::env::args_os()));
}
