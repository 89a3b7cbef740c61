fn main() {
    std::process::exit(laxoc_cli::run_cli(std::env::args_os()));
}
