fn main() {
    std::process::exit(rasf::cli::run(std::env::args_os()));
}
