fn main() {
    std::process::exit(alio_cli::main_with(std::env::args_os()));
}
