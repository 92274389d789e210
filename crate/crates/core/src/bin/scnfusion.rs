fn main() {
    std::process::exit(scnfusion::cli::main_with_args(std::env::args_os()));
}
