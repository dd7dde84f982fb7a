fn main() {
    std::process::exit(milboundary_cli::dispatch(std::env::args_os()));
}
