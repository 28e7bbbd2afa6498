fn main() {
    std::process::exit(hiresnet_cli::run(std::env::args_os()));
}
