fn main() {
    std::process::exit(gls_cli::run(std::env::args_os()));
}
