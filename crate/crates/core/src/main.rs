fn main() {
    std::process::exit(uda_core::cli::main_with_args(std::env::args_os()));
}
