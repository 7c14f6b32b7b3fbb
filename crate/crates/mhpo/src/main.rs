fn main() {
    std::process::exit(mhpo::cli::main_with_args(std::env::args_os()));
}
