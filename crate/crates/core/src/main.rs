fn main() {
    std::process::exit(tbptt_core::cli::main_with_args(std::env::args_os()));
}
