fn main() {
    std::process::exit(windhmm::cli::cli_main(std::env::args_os()));
}
