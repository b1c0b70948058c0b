fn main() {
    std::process::exit(must_cli::run(std::env::args_os()));
}
