fn main() {
    std::process::exit(c4::cli::run(std::env::args_os()));
}
