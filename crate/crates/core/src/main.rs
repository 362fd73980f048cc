fn main() {
    std::process::exit(selcls::cli::main_with_args(std::env::args_os()));
}
