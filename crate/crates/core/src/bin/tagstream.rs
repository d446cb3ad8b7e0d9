fn main() {
    std::process::exit(tagstream::cli::main_with_args(std::env::args_os()));
}
