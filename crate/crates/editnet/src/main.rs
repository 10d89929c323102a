fn main() {
    std::process::exit(editnet::cli::main_with_args(std::env::args_os()));
}
