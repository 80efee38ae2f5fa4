fn main() {
    std::process::exit(slq::cli::run(std::env::args_os()));
}
