fn main() {
    std::process::exit(avedit::cli::main_with_args(std::env::args_os()));
}
