fn main() {
    std::process::exit(jumpkde::experiments::run_cli(std::env::args_os()));
}
