fn main() {
    std::process::exit(optcoord::cli::main_with(std::env::args_os()));
}
