fn main() {
    std::process::exit(pairsim_cli::cli::dispatch(std::env::args_os()));
}
