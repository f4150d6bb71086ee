fn main() {
    std::process::exit(cones_core::cli::run(std::env::args_os()));
}
