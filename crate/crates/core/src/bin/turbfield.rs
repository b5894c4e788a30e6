fn main() {
    std::process::exit(turbfield::cli::main_with(std::env::args_os()));
}
