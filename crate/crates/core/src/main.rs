fn main() {
    std::process::exit(clipdistill::cli::main_with_args(std::env::args_os()));
}
