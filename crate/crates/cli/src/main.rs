fn main() {
    std::process::exit(cpfas_cli::main_with_args(std::env::args_os()));
}
