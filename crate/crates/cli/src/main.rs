fn main() {
    std::process::exit(histokt_cli::run_cli(std::env::args_os()));
}
