fn main() {
    std::process::exit(vgf::cli::main_with_args(std::env::args_os()));
}
