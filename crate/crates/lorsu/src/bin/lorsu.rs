fn main() {
    std::process::exit(lorsu::cli::main_with_args(std::env::args_os()));
}
