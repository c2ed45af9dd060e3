fn main() {
    std::process::exit(raven_core::cli::dispatch(std::env::args().collect()));
}
