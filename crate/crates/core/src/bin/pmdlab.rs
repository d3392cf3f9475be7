fn main() {
    std::process::exit(pmdlab::cli::run(std::env::args_os()));
}
