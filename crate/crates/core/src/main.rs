fn main() {
    std::process::exit(subnerf::cli::run(std::env::args_os()));
}
