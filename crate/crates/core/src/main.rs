fn main() {
    std::process::exit(cpisac::cli::cli_main(std::env::args_os()));
}
