fn main() {
    std::process::exit(unfoldcs_cli::run(std::env::args_os()));
}
