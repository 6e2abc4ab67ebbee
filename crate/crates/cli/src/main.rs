fn main() {
    std::process::exit(covadj_cli::main_with_args(std::env::args().collect()));
}
