fn main() {
    std::process::exit(dualground_cli::run(std::env::args_os()));
}
