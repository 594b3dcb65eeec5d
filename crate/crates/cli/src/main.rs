fn main() {
    std::process::exit(acd_cli::run(std::env::args_os()));
}
