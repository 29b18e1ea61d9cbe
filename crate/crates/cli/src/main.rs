fn main() {
    std::process::exit(metaforge_cli::run(std::env::args_os()));
}
