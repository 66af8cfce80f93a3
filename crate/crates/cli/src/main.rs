fn main() {
    std::process::exit(decil_cli::run(std::env::args_os()));
}
