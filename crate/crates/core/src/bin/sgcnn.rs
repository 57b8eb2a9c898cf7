fn main() {
    std::process::exit(sgconv::cli::run(std::env::args_os()));
}
