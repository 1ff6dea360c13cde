fn main() {
    std::process::exit(continual_t2v::cli::run(std::env::args_os()));
}
