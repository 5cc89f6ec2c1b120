fn main() {
    std::process::exit(spsa_perturb::cli::main_with_args(std::env::args_os()));
}
