fn main() {
    std::process::exit(timedart::cli::run(std::env::args_os()));
}
