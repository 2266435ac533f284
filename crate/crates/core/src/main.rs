fn main() {
    std::process::exit(nashnet::cli::run(std::env::args_os()));
}
