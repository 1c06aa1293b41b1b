fn main() {
    std::process::exit(ctts_cli::run(std::env::args_os()));
}
