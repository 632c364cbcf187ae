fn main() {
    std::process::exit(freekd_cli::cli::main_with(std::env::args_os()));
}
