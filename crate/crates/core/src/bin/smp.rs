fn main() {
    std::process::exit(semimarkov::cli::run(std::env::args_os()));
}
