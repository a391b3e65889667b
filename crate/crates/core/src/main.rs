fn main() {
    std::process::exit(transfusion::cli::main_with_args(std::env::args_os()));
}
