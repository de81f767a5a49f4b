fn main() {
    std::process::exit(confforge_cli::run(std::env::args_os()));
}
