fn main() {
    std::process::exit(pyramidat_cli::run(std::env::args_os()));
}
