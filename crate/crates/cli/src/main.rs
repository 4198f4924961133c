fn main() {
    std::process::exit(pfcm_cli::run(std::env::args_os()));
}
