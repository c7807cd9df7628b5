fn main() {
    std::process::exit(nphd::cli::run(std::env::args_os()));
}
