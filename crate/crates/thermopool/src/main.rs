fn main() {
    std::process::exit(thermopool::cli::dispatch(std::env::args()));
}
