fn main() {
    std::process::exit(cfcml::cli::run(std::env::args_os()));
}
