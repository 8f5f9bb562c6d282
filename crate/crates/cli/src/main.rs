fn main() {
    std::process::exit(triplet_cli::main_with_args(std::env::args_os()));
}
