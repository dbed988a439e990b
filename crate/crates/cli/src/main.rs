fn main() {
    std::process::exit(mcanet_cli::run_cli(std::env::args_os()));
}
