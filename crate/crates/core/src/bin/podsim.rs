fn main() {
    std::process::exit(podsim::cli::cli(std::env::args_os()));
}
