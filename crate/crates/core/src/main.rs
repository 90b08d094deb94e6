fn main() {
    std::process::exit(layerskip::cli::run(std::env::args_os()));
}
