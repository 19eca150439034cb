fn main() {
    std::process::exit(geosal::cli::run(std::env::args_os()));
}
