fn main() {
    std::process::exit(ecomplex::cli::cli_main());
}
