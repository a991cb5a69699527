fn main() {
    std::process::exit(printer::cli::run(std::env::args_os()));
}
