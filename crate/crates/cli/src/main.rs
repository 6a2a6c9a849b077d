fn main() {
    std::process::exit(ffrg_cli::parse_and_dispatch(std::env::args_os()));
}
