fn main() {
    std::process::exit(lexcon::cli::run(std::env::args_os()));
}
