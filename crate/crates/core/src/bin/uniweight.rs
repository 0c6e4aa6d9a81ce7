fn main() {
    std::process::exit(uniweight::cli::run(std::env::args_os()));
}
