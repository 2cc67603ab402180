fn main() {
    std::process::exit(calmi_cli::main_with_args(std::env::args_os()));
}
