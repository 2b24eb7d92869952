fn main() {
    std::process::exit(normformer_core::cli::run(std::env::args_os()));
}
