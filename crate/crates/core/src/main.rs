fn main() {
    std::process::exit(doa_sim::cli::run_from_args(std::env::args_os()));
}
