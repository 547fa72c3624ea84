fn main() {
    std::process::exit(sphdeconv::cli::main_with_args(std::env::args_os()));
}
