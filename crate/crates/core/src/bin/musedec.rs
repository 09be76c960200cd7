fn main() {
    std::process::exit(musedec::cli::main_with_args(std::env::args_os()));
}
