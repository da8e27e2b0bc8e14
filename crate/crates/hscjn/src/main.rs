fn main() {
    std::process::exit(hscjn::cli::run_cli(std::env::args_os()))
}
