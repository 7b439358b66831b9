fn main() {
    std::process::exit(mmrag_cli::run(std::env::args_os()));
}
