fn main() {
    std::process::exit(laf_cli::run(std::env::args_os()));
}
