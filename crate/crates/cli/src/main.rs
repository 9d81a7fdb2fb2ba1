fn main() {
    std::process::exit(nssl_cli::run(std::env::args_os()));
}
