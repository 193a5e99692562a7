fn main() {
    std::process::exit(hyperattn::cli::run(std::env::args_os()));
}
