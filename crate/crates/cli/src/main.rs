fn main() {
    std::process::exit(tcgan_cli::run(std::env::args_os()));
}
