fn main() {
    std::process::exit(perfed_cli::main_with(std::env::args_os()));
}
