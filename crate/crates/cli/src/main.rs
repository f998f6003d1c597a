fn main() {
    std::process::exit(wmark_cli::run(std::env::args_os()));
}
