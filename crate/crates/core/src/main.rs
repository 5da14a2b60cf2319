fn main() {
    std::process::exit(directcaps::cli::run(std::env::args_os()));
}
