fn main() {
    std::process::exit(opacert_cli::run(std::env::args_os()));
}
