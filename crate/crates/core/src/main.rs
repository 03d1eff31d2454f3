fn main() {
    std::process::exit(acip::cli::main_with_args(std::env::args_os()));
}
