fn main() {
    std::process::exit(anneal_stein::cli_io::run_cli(std::env::args_os()));
}
